"""Command-line entry point.

Exit codes: 0 success, 2 validation error (bad config, records, flags), 3 numerical failure.
"""

from __future__ import annotations

import os

# single-threaded BLAS keeps floating-point reductions in a fixed order across runs
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import harness  # noqa: E402
from .list_estimator import DeficiencyError, CoverageError, design as list_design  # noqa: E402
from .mle import NumericalFailure  # noqa: E402
from .pauli import Instrument, certify  # noqa: E402
from .process_tensor import RankDeficientError  # noqa: E402
from .simulate import enumerate_circuits, exact_records, sampled_records  # noqa: E402

log = logging.getLogger("nmgst")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nmgst", description="Non-Markovian instrument set tomography toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON config (schema 1)")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=".", help="output directory")
        return sp

    common(sub.add_parser("simulate", help="simulate records for a scenario"))
    common(sub.add_parser("design", help="emit the LIST experiment design"))
    tomo = common(sub.add_parser("tomograph", help="fit one estimator to a record file"))
    tomo.add_argument("--method", required=True, choices=harness.METHODS)
    tomo.add_argument("--records", help="record file; overrides the config entry")
    common(sub.add_parser("benchmark", help="run a benchmark grid"))
    cert = common(sub.add_parser("certify", help="certify the instruments of a result file"), False)
    cert.add_argument("--input", required=True, help="result JSON from tomograph")
    rep = common(sub.add_parser("report", help="summary and plots from a benchmark CSV"), False)
    rep.add_argument("--input", required=True, help="sep.csv from benchmark")
    return p


def load_config(path: str | None) -> tuple[dict, Path]:
    if path is None:
        return {"schema": harness.SCHEMA}, Path.cwd()
    p = Path(path)
    try:
        blob = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(blob, dict):
        raise ConfigError("config must be a JSON object")
    if blob.get("schema") != harness.SCHEMA:
        raise ConfigError(f"config schema must be {harness.SCHEMA}, got {blob.get('schema')!r}")
    return blob, p.parent


def _scenario(cfg: dict):
    if "scenario" not in cfg:
        raise ConfigError("config needs a 'scenario' object")
    try:
        return harness.build_scenario_from_config(cfg["scenario"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _dump(blob) -> str:
    return json.dumps(blob, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, tuple)):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def cmd_simulate(args, cfg, base: Path) -> int:
    iset = _scenario(cfg)
    data = cfg.get("data", "exact")
    which = cfg.get("circuits", "all")
    if which == "all":
        circuits = enumerate_circuits(iset)
    elif which == "design":
        circuits = list_design(iset).circuits
    else:
        raise ConfigError("circuits must be 'all' or 'design'")
    if data == "exact":
        records = exact_records(iset, circuits)
    elif isinstance(data, dict) and isinstance(data.get("n_shots"), int) and data["n_shots"] > 0:
        records = sampled_records(iset, circuits, data["n_shots"], args.seed)
    else:
        raise ConfigError("data must be 'exact' or {'n_shots': positive int}")
    header = {"scenario": cfg["scenario"], "scenario_hash": iset.metadata.get("scenario_hash"), "seed": args.seed,
              "data": data}
    _write(Path(args.out) / "records.jsonl", harness.export_records(records, iset.labels, header))
    return EXIT_OK


def cmd_design(args, cfg, base: Path) -> int:
    iset = _scenario(cfg)
    des = list_design(iset)
    _write(Path(args.out) / "design.json", _dump(des.to_json()))
    return EXIT_OK


def cmd_tomograph(args, cfg, base: Path) -> int:
    iset = _scenario(cfg)
    src = args.records or cfg.get("records")
    if src is None:
        raise ConfigError("no record file: pass --records or set 'records' in the config")
    path = Path(src) if Path(src).is_absolute() or args.records else base / src
    try:
        _, records = harness.ingest_counts(path, iset.labels)
    except FileNotFoundError:
        raise ConfigError(f"record file {path} not found") from None
    menu = cfg["scenario"].get("menu")
    out = harness.run_method(args.method, iset, records, menu, cfg.get("mle"), args.seed)
    circuits = sorted(out.design & {r.circuit for r in records})
    pred = out.predict([r.circuit for r in records])
    total, excluded = harness.sep(pred, records)
    payload = {"schema": harness.SCHEMA, "method": args.method, "seed": args.seed, "sep_records": total,
               "n_records": len(records), "n_excluded": excluded, "n_design_circuits": len(circuits),
               "labels": iset.labels, "result": out.payload}
    outdir = Path(args.out)
    _write(outdir / "result.json", _dump(payload))
    if hasattr(out.result, "trace_csv"):
        _write(outdir / "trace.csv", out.result.trace_csv())
    print(f"{args.method}: SEP over {len(records) - excluded} records = {total:.3e}")
    return EXIT_OK


def cmd_benchmark(args, cfg, base: Path) -> int:
    blob = cfg.get("benchmark")
    if not isinstance(blob, dict):
        raise ConfigError("config needs a 'benchmark' object")
    grid = harness.BenchmarkGrid.from_config(blob, args.seed)
    report = harness.run_benchmark(grid, args.seed)
    outdir = Path(args.out)
    _write(outdir / "sep.csv", report.to_csv())
    _write(outdir / "summary.json", _dump(report.summary))
    for regime in grid.regimes:
        _write(outdir / f"sep_{regime}.svg", harness.report_svg(report.rows, regime))
    _print_summary(report.summary)
    failed = [r for r in report.rows if r["status"] != "ok"]
    if failed:
        log.warning("%d of %d cells failed", len(failed), len(report.rows))
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    for pair, regimes in summary["pairs"].items():
        for regime, s in regimes.items():
            print(f"{pair:24s} {regime:10s} cells={s['cells']:3d} mean_gap={s['mean_log10_gap']:8.2f} "
                  f"wins={s['win_fraction']:.2f}")


def _kind(label: str, kinds_blob, t: int, i: int) -> str:
    if kinds_blob is not None:
        return kinds_blob[t][i]
    return "measurement" if label == "M" else "gate"


def cmd_certify(args, cfg, base: Path) -> int:
    try:
        blob = json.loads(Path(args.input).read_text())
    except FileNotFoundError:
        raise ConfigError(f"input {args.input} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"input {args.input}: line {exc.lineno}: {exc.msg}") from None
    result = blob.get("result", blob)
    if "instruments" not in result:
        raise ConfigError("input holds no instruments to certify")
    tol = float(cfg.get("tolerance", 1e-8))
    kinds = result.get("kinds")
    rows = []
    for t, step in enumerate(result["instruments"]):
        for i, (label, ptm) in enumerate(step.items()):
            rep = certify(Instrument(label, _kind(label, kinds, t, i), np.asarray(ptm, dtype=float)), tol)
            rows.append({"t": t, "label": label, **rep.as_dict()})
    passed = all(r["valid"] for r in rows)
    _write(Path(args.out) / "certify.json", _dump({"schema": harness.SCHEMA, "tolerance": tol, "all_pass": passed,
                                                   "instruments": rows}))
    print(f"certified {len(rows)} instruments: {'all pass' if passed else 'FAILURES'}")
    return EXIT_OK if passed else EXIT_NUMERICAL


def cmd_report(args, cfg, base: Path) -> int:
    try:
        rows = harness.read_report_csv(Path(args.input).read_text())
    except FileNotFoundError:
        raise ConfigError(f"input {args.input} not found") from None
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed benchmark CSV: {exc}") from None
    for r in rows:
        r.setdefault("status", "ok")
    methods = sorted({r["method"] for r in rows})
    summary = harness.summarize(rows, methods)
    outdir = Path(args.out)
    lines = ["| label | regime | " + " | ".join(methods) + " |", "|---|---|" + "---|" * len(methods)]
    cells = {(r["label"], r["regime"], r["method"]): r["log10_sep"] for r in rows}
    for lab, reg in sorted({(r["label"], r["regime"]) for r in rows}):
        vals = [cells.get((lab, reg, m), float("nan")) for m in methods]
        lines.append(f"| {lab} | {reg} | " + " | ".join(f"{v:.2f}" for v in vals) + " |")
    _write(outdir / "report.md", "log10 SEP per cell\n\n" + "\n".join(lines) + "\n")
    _write(outdir / "summary.json", _dump(summary))
    for regime in sorted({r["regime"] for r in rows}):
        _write(outdir / f"sep_{regime}.svg", harness.report_svg(rows, regime))
    _print_summary(summary)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "design": cmd_design, "tomograph": cmd_tomograph,
            "benchmark": cmd_benchmark, "certify": cmd_certify, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, base = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        return COMMANDS[args.command](args, cfg, base)
    except CoverageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for circ in getattr(exc, "missing", [])[:50]:
            print(f"  missing: {circ}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DeficiencyError, RankDeficientError, NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
