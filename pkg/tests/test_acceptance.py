"""Acceptance criteria at desk scale, one test per criterion.

Each test records a single pass/fail line; the lines are repeated in the pytest
terminal summary.
"""

from __future__ import annotations

import itertools
import json
import time

import numpy as np
import pytest

from nmgst import cli, harness, library, pauli
from nmgst.list_estimator import run_list
from nmgst.mle import (
    MleConfig,
    MleData,
    MleModel,
    fit_mle_ist,
    fit_mle_ist_reduced,
    initialize,
    likelihood,
    likelihood_gradient,
)
from nmgst.pauli import Instrument, depolarizing_ptm
from nmgst.process_tensor import causality_check, dual_set, evaluate, from_probability_tensor, gauge_transform
from nmgst.simulate import (
    FullInstrumentSet,
    ScenarioConfig,
    build_general_scenario,
    enumerate_circuits,
    exact_records,
    probabilities,
)

from . import oracles

MP = np.stack([i.ptm for i in library.measure_prepare_instruments()])


def test_criterion_1_simulator_matches_density_matrices(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    pool = ["".join(p) for p in itertools.product("012", repeat=5)]
    worst = 0.0
    for _ in range(100):
        label = pool[rng.integers(len(pool))]
        bias, noise = bool(rng.integers(2)), bool(rng.integers(2))
        iset = ScenarioConfig(label, "J_oc", "reference" if bias else None,
                              {"schedule": "linear"} if noise else None).build()
        circuits = enumerate_circuits(iset)
        c = circuits[rng.integers(len(circuits))]
        got = probabilities(iset, [c])[0]
        names = [iset.labels[t][i] for t, i in enumerate(c)][:-1]
        worst = max(worst, abs(got - oracles.nisq_probability(label, names, bias, noise)))
    took = time.perf_counter() - start
    verdict(1, worst <= 1e-12 and took < 10, f"max |dp| = {worst:.2e} over 100 cases, {took:.1f} s")


def test_criterion_2_list_exact_on_biased_overcomplete_set(verdict):
    start = time.perf_counter()
    iset = ScenarioConfig("00000", "J_oc", "reference").build()
    recs = exact_records(iset, enumerate_circuits(iset))
    res = run_list(iset, recs)
    pred = res.reduced.predict([r.circuit for r in recs])
    total, excluded = harness.sep(pred, recs)
    dist = max(res.distances.values())
    by_t = {t: max(v for (s, _), v in res.distances.items() if s == t) for t in range(3)}
    ratio = by_t[0] / max(by_t[1], by_t[2])
    took = time.perf_counter() - start
    ok = total <= 1e-10 and excluded == 0 and dist >= 1e-3 and ratio >= 10 and took < 60
    verdict(2, ok, f"SEP = {total:.2e}, max distance = {dist:.2e}, t0/t12 ratio = {ratio:.1f}, {took:.1f} s")


def test_criterion_3_list_vs_ptt_gap(verdict):
    start = time.perf_counter()
    grid = harness.BenchmarkGrid.from_config({"preset": "list-vs-ptt"})
    report = harness.run_benchmark(grid, seed=0)
    s = report.summary["pairs"]["list vs ptt"]["all"]
    took = time.perf_counter() - start
    ok = s["mean_log10_gap"] >= 8 and s["cells"] == 2 * len(grid.labels) and took < 600
    verdict(3, ok, f"mean log10 gap = {s['mean_log10_gap']:.2f} over {s['cells']} cells, {took:.0f} s")


def test_criterion_4_mle_ist_fit_quality(verdict):
    start = time.perf_counter()
    iset = ScenarioConfig("00000", "J_ibm", None, {"schedule": "linear"}).build()
    data = MleData.from_records(exact_records(iset, enumerate_circuits(iset)))
    res = fit_mle_ist(data, iset, MleConfig())
    took = time.perf_counter() - start
    ok = res.sep <= 1e-5 and res.violation <= 1e-8 and took < 900
    verdict(4, ok, f"SEP = {res.sep:.2e}, violation = {res.violation:.1e}, {took:.0f} s")


def test_criterion_5_mle_ist_vs_gst_baselines(verdict):
    start = time.perf_counter()
    grid = harness.BenchmarkGrid.from_config({"preset": "mle-baselines"})
    report = harness.run_benchmark(grid, seed=0)
    pairs = report.summary["pairs"]
    gst, gsts = pairs["mle-ist vs mle-gst"]["all"], pairs["mle-ist vs mle-gst-s"]["all"]
    took = time.perf_counter() - start
    ok = (gst["mean_log10_gap"] >= 3 and gsts["mean_log10_gap"] >= 3 and gst["win_fraction"] >= 0.9
          and took < 7200)
    verdict(5, ok, f"gap vs GST = {gst['mean_log10_gap']:.2f}, vs GST-S = {gsts['mean_log10_gap']:.2f}, "
                   f"IST <= GST on {gst['win_fraction']:.0%} of {gst['cells']} cells, {took / 60:.0f} min")


def test_criterion_6_sampled_data(verdict):
    rng = np.random.default_rng(6)
    pool = ["".join(p) for p in itertools.product("012", repeat=5)]
    labels = sorted(rng.choice(pool, 10, replace=False).tolist())
    grid = harness.BenchmarkGrid(labels, ["mle-ist", "mle-gst"], regimes=["imperfect"], data=10000,
                                 mle=harness.PRESETS["mle-baselines"]["mle"])
    report = harness.run_benchmark(grid, seed=0)
    s = report.summary["pairs"]["mle-ist vs mle-gst"]["all"]
    wins = round(s["win_fraction"] * s["cells"])
    ok = s["cells"] == 10 and wins >= 9 and s["median_relative_improvement"] >= 0.3
    verdict(6, ok, f"IST <= GST on {wins}/{s['cells']}, median relative improvement = "
                   f"{s['median_relative_improvement']:.0%}")


def _gradient_error(rng):
    iset = ScenarioConfig("0121", "J_ibm", None, {"schedule": "linear"}).build()
    model = MleModel(iset.labels, [[i.kind for i in s] for s in iset.instruments], 2, 2, "nisq")
    data = MleData.from_records(exact_records(iset, enumerate_circuits(iset)))
    base = initialize(model, "knowledge", knowledge=iset.knowledge)
    worst = 0.0
    for _ in range(20):
        th = model.repair(np.clip(base + 0.05 * rng.normal(size=base.shape), *model.bounds()))
        _, g = likelihood_gradient(th, model, data)
        v = rng.normal(size=th.shape)
        v /= np.linalg.norm(v)
        fd = (likelihood(th + 1e-6 * v, model, data) - likelihood(th - 1e-6 * v, model, data)) / 2e-6
        worst = max(worst, abs(fd - g @ v) / max(abs(fd), abs(g @ v), 1e-12))
    return worst


def test_criterion_7_property_suites(verdict):
    rng = np.random.default_rng(7)
    checks = {}

    iset = build_general_scenario("010", 2)
    p = probabilities(iset, enumerate_circuits(iset)).reshape(16, 16)
    ups = from_probability_tensor(p, [dual_set(MP)] * 2)
    worst = 0.0
    for _ in range(100):
        gauges = [np.eye(4) + 0.3 * rng.normal(size=(4, 4)) for _ in range(2)]
        moved = gauge_transform(ups, gauges)
        a = [MP[rng.integers(16)], MP[rng.integers(16)]]
        worst = max(worst, abs(evaluate(moved, [gauges[t] @ a[t] for t in range(2)]) - evaluate(ups, a)))
    checks["gauge"] = (worst, 1e-10)

    worst = 0.0
    for _ in range(20):
        a = rng.normal(size=(16, 4, 4))
        worst = max(worst, np.abs(dual_set(a).coefficients(a) - np.eye(16)).max())
    checks["duals"] = (worst, 1e-10)

    worst = 0.0
    for _ in range(20):
        r = rng.normal(size=(4, 4))
        worst = max(worst, np.abs(pauli.choi_to_ptm(pauli.ptm_to_choi(r)) - r).max())
    checks["choi round trip"] = (worst, 1e-10)

    checks["gradient"] = (_gradient_error(rng), 1e-5)

    markov = build_general_scenario("000", 1)
    p = probabilities(markov, enumerate_circuits(markov)).reshape(16, 16)
    checks["causality"] = (causality_check(from_probability_tensor(p, [dual_set(MP)] * 2)).max_violation, 1e-6)

    fam = library.measure_prepare_instruments()
    noisy = [Instrument(i.label, i.kind, depolarizing_ptm(0.05) @ i.ptm) for i in fam]
    noisy_set = FullInstrumentSet(2, 2, 1, [noisy] * 2, [fam] * 2, markov.links, markov.initial, "general")
    data = MleData.from_records(exact_records(noisy_set, enumerate_circuits(noisy_set)))
    res = fit_mle_ist_reduced(data, noisy_set, MleConfig(mode="full", max_inner=150, max_rounds=3))
    checks["reduced k=2 SEP"] = (res.sep, 1e-6)
    checks["reduced k=2 violation"] = (res.violation, 1e-8)

    ok = all(v <= tol for v, tol in checks.values())
    verdict(7, ok, ", ".join(f"{k} {v:.1e}" for k, (v, _) in checks.items()))


def _pipeline(tmp, cfg_path):
    def run(*argv):
        code = cli.main([str(a) for a in argv])
        assert code == 0, argv

    run("simulate", "--config", cfg_path, "--out", tmp)
    run("design", "--config", cfg_path, "--out", tmp)
    for m in ("list", "ptt", "mle-ist", "mle-gst", "mle-gst-s"):
        run("tomograph", "--config", cfg_path, "--method", m, "--records", tmp / "records.jsonl", "--out", tmp / m)
    run("certify", "--input", tmp / "mle-ist" / "result.json", "--out", tmp / "mle-ist")
    run("benchmark", "--config", cfg_path, "--out", tmp / "bench")
    run("report", "--input", tmp / "bench" / "sep.csv", "--out", tmp / "report")


def test_criterion_8_cli_determinism(verdict, tmp_path):
    cfg = {"schema": 1, "seed": 11, "scenario": {"label": "0121", "menu": "J_ibm", "noise": {"schedule": "linear"}},
           "data": {"n_shots": 2000}, "mle": {"max_inner": 60, "max_rounds": 2},
           "benchmark": {"labels": ["0120"], "methods": ["list", "ptt", "mle-ist"], "data": 2000,
                         "mle": {"max_inner": 60, "max_rounds": 2}}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    _pipeline(tmp_path / "a", cfg_path)
    _pipeline(tmp_path / "b", cfg_path)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    verdict(8, bool(files) and not differ, f"{len(files)} output files compared, {len(differ)} differ {differ}")
