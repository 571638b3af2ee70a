"""Benchmark orchestration: methods, grids, SEP tables, count ingestion and plots."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from . import library
from .list_estimator import design as list_design
from .list_estimator import recover
from .mle import MleConfig, MleData, fit_mle_gst, fit_mle_ist, fit_mle_ist_reduced
from .process_tensor import ptt
from .simulate import (
    Circuit,
    ExperimentRecord,
    FullInstrumentSet,
    ScenarioConfig,
    build_general_scenario,
    enumerate_circuits,
    exact_records,
    probabilities,
    sampled_records,
)

log = logging.getLogger(__name__)

SCHEMA = 1
METHODS = ("list", "ptt", "mle-ist", "mle-gst", "mle-gst-s", "mle-ist-reduced")
CSV_COLUMNS = ("label", "method", "regime", "sep", "log10_sep", "sep_design", "sep_heldout", "n_circuits",
               "n_excluded", "status")
SEP_FLOOR = 1e-32
FULL_EVAL_LIMIT = 5000
HELDOUT = 200


class IngestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# SEP


def sep(predicted: Sequence[float], records: Sequence[ExperimentRecord]) -> tuple[float, int]:
    """Unweighted squared error; circuits the result cannot predict (NaN) are excluded and counted."""
    pred = np.asarray(predicted, dtype=float)
    data = np.array([r.p for r in records])
    ok = np.isfinite(pred)
    return float(np.sum((pred[ok] - data[ok]) ** 2)), int(np.sum(~ok))


def log10_sep(value: float) -> float:
    return math.log10(max(value, SEP_FLOOR))


def evaluation_circuits(iset: FullInstrumentSet, seed: int = 0) -> list[Circuit]:
    """Every circuit when there are at most a few thousand, else a seeded sample of them."""
    allc = enumerate_circuits(iset)
    if len(allc) <= FULL_EVAL_LIMIT:
        return allc
    rng = np.random.default_rng([int(seed), 2])
    pick = sorted(rng.choice(len(allc), size=HELDOUT, replace=False))
    return [allc[i] for i in pick]


# ---------------------------------------------------------------------------
# methods


@dataclass
class MethodOutcome:
    method: str
    predict: Callable[[Sequence[Circuit]], NDArray[np.float64]]
    design: set[Circuit]
    payload: dict = field(default_factory=dict)
    result: object = None


def _knowledge(iset: FullInstrumentSet) -> list[NDArray]:
    return [np.stack([i.ptm for i in step]) for step in iset.knowledge]


def _kinds(iset: FullInstrumentSet) -> list[list[str]]:
    return [[i.kind for i in step] for step in iset.instruments]


def run_method(method: str, iset: FullInstrumentSet, records: Sequence[ExperimentRecord], menu=None,
               mle: Mapping | None = None, seed: int = 0) -> MethodOutcome:
    """Fit one estimator to the records; the outcome predicts arbitrary circuits."""
    lookup = {r.circuit: r.p for r in records}
    if method == "list":
        des = list_design(iset)
        res = recover(records, des, _knowledge(iset))
        return MethodOutcome(method, res.reduced.predict, set(des.circuits), res.to_json(), res)
    if method == "ptt":
        exclude = library.PTT_EXCLUDE.get(menu, ()) if isinstance(menu, str) else ()
        red = ptt(lookup, _knowledge(iset), iset.labels, _kinds(iset), exclude)
        needed = set()
        for tau, ups in red.tensors.items():
            sets = [red.basis[t] for t in range(tau)]
            meas = [i for i, kd in enumerate(_kinds(iset)[tau]) if kd == "measurement"]
            needed.update((*pre, m) for pre in itertools.product(*sets) for m in meas)
        payload = {"process_tensors": {str(t): u.to_json() for t, u in sorted(red.tensors.items())},
                   "basis": red.basis, "excluded": list(exclude)}
        return MethodOutcome(method, red.predict, needed, payload, red)
    cfg_blob = dict(mle or {})
    cfg_blob.setdefault("seed", seed)
    data = MleData.from_records(records)
    if method == "mle-ist":
        cfg = MleConfig.from_dict({**cfg_blob, "d_env": cfg_blob.get("d_env", iset.d_env)})
        res = fit_mle_ist(data, iset, cfg)
    elif method in ("mle-gst", "mle-gst-s"):
        cfg = MleConfig.from_dict(cfg_blob)
        res = fit_mle_gst(data, iset, cfg, shared=method == "mle-gst-s")
    elif method == "mle-ist-reduced":
        cfg_blob.setdefault("mode", "full")
        res = fit_mle_ist_reduced(data, iset, MleConfig.from_dict(cfg_blob))
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return MethodOutcome(method, res.predict, set(data.circuits), res.to_json(), res)


# ---------------------------------------------------------------------------
# grids


def default_labels(k: int = 4, seed: int = 0, extra: int = 8) -> list[str]:
    """All binary labels of length ``k + 1`` plus ``extra`` seeded labels containing a ``2``."""
    base = ["".join(p) for p in itertools.product("01", repeat=k + 1)]
    with_two = [s for s in ("".join(p) for p in itertools.product("012", repeat=k + 1)) if "2" in s]
    rng = np.random.default_rng([int(seed), 3])
    pick = sorted(rng.choice(len(with_two), size=min(extra, len(with_two)), replace=False))
    return base + [with_two[i] for i in pick]


PRESETS = {
    "list-vs-ptt": {"menu": "J_oc", "bias": "reference", "methods": ["list", "ptt"]},
    # desk-scale budget: two penalty rounds of at most 200 solver evaluations per fit
    "mle-baselines": {"menu": "J_ibm", "bias": None, "methods": ["mle-ist", "mle-gst", "mle-gst-s"],
             "mle": {"max_inner": 200, "max_rounds": 2}},
}


@dataclass
class BenchmarkGrid:
    labels: list[str]
    methods: list[str]
    regimes: list[str] = field(default_factory=lambda: ["perfect", "imperfect"])
    data: str | int = "exact"
    menu: str | list[str] = "J_ibm"
    bias: object = None
    mle: dict = field(default_factory=dict)
    workers: int = 1
    d_env: int = 2

    def __post_init__(self):
        for lab in self.labels:
            if len(lab) < 2 or set(lab) - set("012"):
                raise ValueError(f"invalid scenario label {lab!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for r in self.regimes:
            if r not in ("perfect", "imperfect"):
                raise ValueError(f"unknown regime {r!r}")
        if self.d_env not in (1, 2):
            raise ValueError("d_env must be 1 (Markovian) or 2")
        if self.data != "exact" and not (isinstance(self.data, int) and self.data > 0):
            raise ValueError("data must be 'exact' or a positive shot count")

    @classmethod
    def from_config(cls, blob: Mapping, seed: int = 0) -> "BenchmarkGrid":
        blob = dict(blob)
        preset = blob.pop("preset", None)
        if preset and preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}")
        base = dict(PRESETS[preset]) if preset else {}
        base.update(blob)
        labels = base.pop("labels", None)
        k = int(base.pop("k", 4))
        extra = int(base.pop("extra_labels", 8))
        if labels is None:
            labels = default_labels(k, seed, extra)
        allowed = {"methods", "regimes", "data", "menu", "bias", "mle", "workers", "d_env"}
        unknown = set(base) - allowed - {"schema", "command"}
        if unknown:
            raise ValueError(f"unknown benchmark keys: {sorted(unknown)}")
        return cls(list(labels), **{k2: v for k2, v in base.items() if k2 in allowed})

    def cells(self) -> list[tuple[str, str, str]]:
        return [(lab, reg, m) for lab in self.labels for reg in self.regimes for m in self.methods]


def cell_seed(seed: int, *parts: str) -> int:
    h = hashlib.sha256("|".join([str(seed), *parts]).encode()).digest()
    return int.from_bytes(h[:4], "little")


def scenario_for(grid: BenchmarkGrid, label: str, regime: str) -> ScenarioConfig:
    noise = {"schedule": "linear"} if regime == "imperfect" else None
    return ScenarioConfig(label, grid.menu, grid.bias, noise, d_env=grid.d_env)


def _records_for(grid: BenchmarkGrid, iset: FullInstrumentSet, circuits, seed: int, label: str, regime: str):
    if grid.data == "exact":
        return exact_records(iset, circuits)
    return sampled_records(iset, circuits, int(grid.data), cell_seed(seed, label, regime, "data"))


def _run_cells(args) -> list[dict]:
    grid, seed, label, regime, methods = args
    cfg = scenario_for(grid, label, regime)
    iset = cfg.build()
    circuits = evaluation_circuits(iset, cell_seed(seed, label, regime, "eval"))
    fit_circuits = enumerate_circuits(iset)
    records = _records_for(grid, iset, fit_circuits, seed, label, regime)
    by_circ = {r.circuit: r for r in records}
    eval_records = [by_circ[c] for c in circuits]
    rows = []
    for method in methods:
        row = {"label": label, "method": method, "regime": regime}
        start = time.perf_counter()
        try:
            out = run_method(method, iset, records, grid.menu, grid.mle, cell_seed(seed, label, regime, method))
            pred = out.predict(circuits)
            total, excluded = sep(pred, eval_records)
            dmask = np.array([c in out.design for c in circuits])
            sd, _ = sep(pred[dmask], [r for r, m in zip(eval_records, dmask) if m])
            sh, _ = sep(pred[~dmask], [r for r, m in zip(eval_records, dmask) if not m])
            row.update(sep=total, log10_sep=log10_sep(total), sep_design=sd, sep_heldout=sh,
                       n_circuits=len(circuits), n_excluded=excluded, status="ok")
        except Exception as exc:  # a failed cell is recorded, the run continues
            log.warning("cell %s/%s/%s failed: %s", label, regime, method, exc)
            row.update(sep=float("nan"), log10_sep=float("nan"), sep_design=float("nan"),
                       sep_heldout=float("nan"), n_circuits=len(circuits), n_excluded=0,
                       status=f"error: {type(exc).__name__}")
        # kept in memory and logs only; files stay byte-identical across reruns
        row["runtime_s"] = time.perf_counter() - start
        log.info("cell %s/%s/%s sep=%.3e (%.1fs)", label, regime, method, row["sep"], row["runtime_s"])
        rows.append(row)
    return rows


@dataclass
class SepReport:
    rows: list[dict]
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(CSV_COLUMNS), lineterminator="\n")
        w.writeheader()
        for row in self.rows:
            w.writerow({c: _fmt(row[c]) for c in CSV_COLUMNS})
        return buf.getvalue()

    def to_json(self) -> dict:
        rows = [{c: r[c] for c in CSV_COLUMNS} for r in self.rows]
        return {"schema": SCHEMA, "rows": rows, "summary": self.summary}


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def summarize(rows: Sequence[dict], methods: Sequence[str]) -> dict:
    """Mean log10-SEP gaps and win rates between every ordered pair of methods."""
    table: dict[tuple[str, str], dict[str, float]] = {}
    for r in rows:
        if r["status"] == "ok":
            table.setdefault((r["label"], r["regime"]), {})[r["method"]] = r["sep"]
    out: dict = {"methods": list(methods), "pairs": {}}
    for a, b in itertools.permutations(methods, 2):
        per_regime = {}
        for regime in sorted({reg for _, reg in table} | {"all"}):
            cells = [v for (lab, reg), v in sorted(table.items()) if (regime == "all" or reg == regime)
                     and a in v and b in v]
            if not cells:
                continue
            gaps = [log10_sep(v[b]) - log10_sep(v[a]) for v in cells]
            wins = sum(1 for v in cells if v[a] <= v[b])
            rel = [1.0 - v[a] / v[b] for v in cells if v[b] > 0]
            per_regime[regime] = {
                "cells": len(cells),
                "mean_log10_gap": float(np.mean(gaps)),
                "win_fraction": wins / len(cells),
                "median_relative_improvement": float(np.median(rel)) if rel else float("nan"),
            }
        out["pairs"][f"{a} vs {b}"] = per_regime
    return out


def run_benchmark(grid: BenchmarkGrid, seed: int = 0) -> SepReport:
    jobs = [(grid, seed, lab, reg, list(grid.methods)) for lab in grid.labels for reg in grid.regimes]
    if grid.workers > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            chunks = list(pool.map(_run_cells, jobs))
    else:
        chunks = [_run_cells(j) for j in jobs]
    rows = [r for chunk in chunks for r in chunk]
    return SepReport(rows, summarize(rows, grid.methods))


# ---------------------------------------------------------------------------
# record files


def export_records(records: Sequence[ExperimentRecord], labels: Sequence[Sequence[str]], header: Mapping) -> str:
    """JSONL: a header object, then one record per line with instrument labels."""
    lines = [json.dumps({"schema": SCHEMA, **header}, sort_keys=True)]
    for r in records:
        blob = {"circuit": [labels[t][i] for t, i in enumerate(r.circuit)]}
        if r.n_shots is None:
            blob["p"] = r.p
        else:
            blob["n_shots"] = r.n_shots
            blob["n_success"] = r.n_success
        lines.append(json.dumps(blob, sort_keys=True))
    return "\n".join(lines) + "\n"


def parse_records(text: str, labels: Sequence[Sequence[str]] | None = None) -> tuple[dict, list[ExperimentRecord]]:
    lines = text.splitlines()
    if not lines:
        raise IngestError("line 1: empty record file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise IngestError(f"line 1: header is not JSON ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise IngestError(f"line 1: header must be an object with schema {SCHEMA}")
    if labels is None:
        if "scenario" not in header:
            raise IngestError("line 1: header names no scenario and no instrument menu was supplied")
        labels = scenario_labels(header["scenario"])
    index = [{lab: i for i, lab in enumerate(step)} for step in labels]
    records = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            blob = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(f"line {n}: not JSON ({exc.msg})") from None
        if not isinstance(blob, dict) or "circuit" not in blob:
            raise IngestError(f"line {n}: record needs a 'circuit' list")
        circ = blob["circuit"]
        if not isinstance(circ, list) or not 1 <= len(circ) <= len(index):
            raise IngestError(f"line {n}: circuit must list 1 to {len(index)} instrument labels")
        try:
            c = tuple(index[t][lab] for t, lab in enumerate(circ))
        except KeyError as exc:
            raise IngestError(f"line {n}: unknown instrument label {exc.args[0]!r}") from None
        try:
            if "n_shots" in blob:
                ns, nx = blob["n_shots"], blob.get("n_success")
                if not isinstance(ns, int) or not isinstance(nx, int):
                    raise ValueError("n_shots and n_success must be integers")
                if nx > ns or nx < 0:
                    raise ValueError(f"n_success={nx} outside [0, {ns}]")
                records.append(ExperimentRecord.from_counts(c, ns, nx))
            elif "p" in blob:
                p = float(blob["p"])
                if not -1e-9 <= p <= 1 + 1e-9:
                    raise ValueError(f"probability {p} outside [0, 1]")
                records.append(ExperimentRecord(c, p))
            else:
                raise ValueError("record needs n_shots/n_success or p")
        except ValueError as exc:
            raise IngestError(f"line {n}: {exc}") from None
    return header, records


def ingest_counts(path: str | Path, labels: Sequence[Sequence[str]] | None = None) -> tuple[dict, list[ExperimentRecord]]:
    return parse_records(Path(path).read_text(), labels)


def scenario_labels(blob: Mapping) -> list[list[str]]:
    if blob.get("mode") == "general":
        return build_scenario_from_config(blob).labels
    cfg = ScenarioConfig.from_dict(blob)
    return library.available_labels(cfg.menu, cfg.k)


def build_scenario_from_config(blob: Mapping) -> FullInstrumentSet:
    """Scenario from its JSON description; ``mode: general`` selects the measure-and-prepare family."""
    blob = dict(blob)
    if blob.get("mode") == "general":
        label = str(blob["label"])
        dims = blob.get("dims", [2, 2])
        return build_general_scenario(label, int(dims[1]))
    blob.pop("mode", None)
    return ScenarioConfig.from_dict(blob).build()


# ---------------------------------------------------------------------------
# SVG


def svg_plot(series: Mapping[str, Sequence[float]], categories: Sequence[str], title: str = "",
             ylabel: str = "log10 SEP", width: int = 900, height: int = 360) -> str:
    """Self-contained SVG line-and-marker chart of one value per category and series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    vals = [v for s in series.values() for v in s if v is not None and np.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1, hi + 1
    left, right, top, bottom = 60, 20, 30, 70
    pw, ph = width - left - right, height - top - bottom
    n = max(len(categories), 1)

    def xy(i, v):
        x = left + (i + 0.5) * pw / n
        y = top + (hi - v) / (hi - lo) * ph
        return x, y

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" '
           f'font-size="11">', f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for j in range(6):
        v = lo + (hi - lo) * j / 5
        _, y = xy(0, v)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>')
        out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
    for i, c in enumerate(categories):
        x, _ = xy(i, lo)
        out.append(f'<text x="{x:.1f}" y="{top + ph + 12}" text-anchor="end" '
                   f'transform="rotate(-60 {x:.1f} {top + ph + 12})">{_esc(c)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" transform="rotate(-90 14 {top + ph / 2:.1f})" '
               f'text-anchor="middle">{_esc(ylabel)}</text>')
    for s, (name, values) in enumerate(series.items()):
        col = colors[s % len(colors)]
        pts = [xy(i, v) for i, v in enumerate(values) if v is not None and np.isfinite(v)]
        if pts:
            out.append('<polyline fill="none" stroke="{}" points="{}"/>'.format(
                col, " ".join(f"{x:.1f},{y:.1f}" for x, y in pts)))
            out.extend(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="2.5" fill="{col}"/>' for x, y in pts)
        out.append(f'<text x="{left + pw - 140}" y="{top + 14 + 14 * s}" fill="{col}">{_esc(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def report_svg(rows: Sequence[dict], regime: str) -> str:
    labels = sorted({r["label"] for r in rows if r["regime"] == regime})
    methods = sorted({r["method"] for r in rows if r["regime"] == regime})
    look = {(r["label"], r["method"]): float(r["log10_sep"]) for r in rows if r["regime"] == regime}
    series = {m: [look.get((lab, m), float("nan")) for lab in labels] for m in methods}
    return svg_plot(series, labels, title=f"log10 SEP per scenario ({regime})")


def read_report_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    for r in rows:
        for key in ("sep", "log10_sep", "sep_design", "sep_heldout"):
            r[key] = float(r[key])
        for key in ("n_circuits", "n_excluded"):
            r[key] = int(r[key])
    return rows
