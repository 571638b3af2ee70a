from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from nmgst import library
from nmgst.list_estimator import run_list
from nmgst.mle import (
    REDUCED_MAX_STEPS,
    MleConfig,
    MleData,
    MleModel,
    ReducedModel,
    fit_mle_gst,
    fit_mle_ist,
    fit_mle_ist_reduced,
    initialize,
    likelihood,
    likelihood_gradient,
    penalty_scale,
    link_ptm_and_derivatives,
    reduced_parameter_count,
    truth_parameters,
    variance_floor,
)
from nmgst.pauli import Instrument, depolarizing_ptm, superket, unitary_ptm_from_angles
from nmgst.process_tensor import causality_check, process_tensor_choi
from nmgst.simulate import (
    ExperimentRecord,
    FullInstrumentSet,
    ScenarioConfig,
    build_general_scenario,
    enumerate_circuits,
    exact_records,
    probabilities,
    sampled_records,
)

FAST = dict(max_inner=150, max_rounds=3)


def scenario(label, menu="J_ibm", noise=False, bias=None):
    return ScenarioConfig(label, menu, bias, {"schedule": "linear"} if noise else None).build()


def data_for(iset, n_shots=None, seed=0):
    circ = enumerate_circuits(iset)
    recs = exact_records(iset, circ) if n_shots is None else sampled_records(iset, circ, n_shots, seed)
    return MleData.from_records(recs)


def ist_model(iset):
    return MleModel(iset.labels, [[i.kind for i in s] for s in iset.instruments], 2, 2, "nisq")


def truth(iset, model):
    units = [library.se_unitary(int(ch)) for ch in iset.metadata["label"][:iset.k]]
    return truth_parameters(model, iset, units)


class TestLikelihood:
    def test_zero_at_truth(self):
        iset = scenario("01210", noise=True)
        model = ist_model(iset)
        data = data_for(iset)
        assert likelihood(truth(iset, model), model, data) <= 1e-18

    def test_quadratic_growth(self):
        iset = scenario("0121")
        model = ist_model(iset)
        data = data_for(iset)
        th = truth(iset, model)
        v = np.zeros_like(th)
        v[3] = 1.0
        ls = [likelihood(th + e * v, model, data) for e in (1e-3, 2e-3, 4e-3)]
        assert ls[0] > 0
        assert ls[1] / ls[0] == pytest.approx(4.0, rel=1e-2)
        assert ls[2] / ls[1] == pytest.approx(4.0, rel=1e-2)

    def test_variance_floor_for_certain_outcomes(self):
        r0 = ExperimentRecord.from_counts((0,), 1000, 0)
        r1 = ExperimentRecord.from_counts((0,), 1000, 1000)
        assert variance_floor(r0) == variance_floor(r1) == pytest.approx(1e-6)
        rh = ExperimentRecord.from_counts((0,), 1000, 500)
        assert variance_floor(rh) == pytest.approx(0.25 / 1000)
        assert variance_floor(ExperimentRecord((0,), 0.3)) == 1.0

    def test_penalty_scale_tracks_weights(self):
        iset = scenario("012")
        assert penalty_scale(data_for(iset)) == 1.0
        sampled = data_for(iset, 10000, seed=2)
        assert penalty_scale(sampled) == pytest.approx(np.median(sampled.weights))
        assert penalty_scale(sampled) >= 4e4 - 1e-6

    def test_exact_weights_are_one_and_sep_matches(self):
        iset = scenario("0121")
        model = ist_model(iset)
        data = data_for(iset)
        th = truth(iset, model) + 1e-3
        th = np.clip(th, *model.bounds())
        p = model.predict(th, model.compile(data.circuits))
        assert np.all(data.weights == 1.0)
        assert likelihood(th, model, data) == pytest.approx(float(np.sum((p - data.p) ** 2)), rel=1e-12)


def _directional_check(model, data, th, rng, n_dirs=3):
    _, g = likelihood_gradient(th, model, data)
    worst = 0.0
    for _ in range(n_dirs):
        v = rng.normal(size=th.shape)
        v /= np.linalg.norm(v)
        h = 1e-6
        fd = (likelihood(th + h * v, model, data) - likelihood(th - h * v, model, data)) / (2 * h)
        worst = max(worst, abs(fd - g @ v) / max(abs(fd), abs(g @ v), 1e-12))
    return worst


class TestGradient:
    @pytest.mark.parametrize("kind", ["ist", "gst", "gst-s"])
    def test_random_feasible_points(self, kind, rng):
        iset = scenario("0121", noise=True)
        kinds = [[i.kind for i in s] for s in iset.instruments]
        model = MleModel(iset.labels, kinds, 2, 1 if kind != "ist" else 2, "nisq", shared=kind == "gst-s")
        # sampled data so weights are non-trivial
        data = data_for(iset, 1000, seed=1)
        base = initialize(model, "knowledge", knowledge=iset.knowledge)
        worst = 0.0
        for _ in range(50 if kind == "ist" else 20):
            th = base + 0.05 * rng.normal(size=base.shape)
            th = model.repair(np.clip(th, *model.bounds()))
            worst = max(worst, _directional_check(model, data, th, rng, 1))
        assert worst <= 1e-5

    def test_link_derivatives(self, rng):
        a = rng.uniform(-1, 1, 15)
        v, dv = link_ptm_and_derivatives(a, 4)
        assert np.allclose(v, unitary_ptm_from_angles(a), atol=1e-12)
        for j in (0, 6, 14):
            e = np.zeros(15)
            e[j] = 1e-6
            fd = (unitary_ptm_from_angles(a + e) - unitary_ptm_from_angles(a - e)) / 2e-6
            assert np.abs(fd - dv[j]).max() <= 1e-7

    def test_penalty_jacobian(self, rng):
        iset = scenario("012")
        model = ist_model(iset)
        th = initialize(model, "knowledge", knowledge=iset.knowledge)
        th[: model.n_instrument_params] += 0.1 * rng.normal(size=model.n_instrument_params)
        th = np.clip(th, *model.bounds())
        r, j = model.penalty(th, 10.0, jacobian=True)
        v = rng.normal(size=th.shape) * 1e-7
        r2 = model.penalty(th + v, 10.0)
        assert np.abs(r2 - r - j @ v).max() <= 1e-10


class TestModel:
    def test_parameter_counts(self):
        labels = library.available_labels("J_ibm", 4)
        kinds = [["measurement" if x == "M" else "gate" for x in s] for s in labels]
        m = MleModel(labels, kinds, 2, 2, "full")
        assert m.formula_parameter_count == 31 * 16 + 4 * 15
        nisq = MleModel(labels, kinds, 2, 2, "nisq")
        assert nisq.n_params == 27 * 12 + 4 * 4 + 4 * 15

    def test_shared_blocks(self):
        labels = library.available_labels("J_ibm", 4)
        kinds = [["measurement" if x == "M" else "gate" for x in s] for s in labels]
        shared = MleModel(labels, kinds, 2, 1, "nisq", shared=True)
        assert shared.n_params == 9 * 12 + 4

    def test_knowledge_init_reproduces_knowledge_probabilities(self):
        iset = scenario("0121", noise=True)
        model = ist_model(iset)
        th = initialize(model, "knowledge", knowledge=iset.knowledge)
        assert all(np.allclose(v, np.eye(16)) for v in model.links(th)[2])
        circ = enumerate_circuits(iset)
        ref = []
        for c in circ:
            v = superket(np.diag([1.0, 0.0]))
            for t, i in enumerate(c):
                v = iset.knowledge[t][i].ptm @ v
            ref.append(np.sqrt(2) * v[0])
        assert np.allclose(model.predict(th, model.compile(circ)), ref, atol=1e-12)

    def test_list_init_is_feasible(self):
        iset = scenario("00000", "J_oc", bias="reference")
        recs = exact_records(iset, enumerate_circuits(iset))
        lres = run_list(iset, recs)
        assert not all(r.valid for r in lres.certify().values())  # raw LIST output is not physical
        model = ist_model(iset)
        th = initialize(model, "list_result", upstream=lres)
        assert model.violation(th) <= 1e-8

    def test_missing_upstream(self):
        iset = scenario("012")
        with pytest.raises(ValueError):
            initialize(ist_model(iset), "list_result")


class TestFits:
    def test_perfect_ist_recovers_data(self):
        iset = scenario("01210")
        res = fit_mle_ist(data_for(iset), iset, MleConfig(**FAST))
        assert res.sep <= 1e-10 and res.violation <= 1e-8
        assert all(r.valid for r in res.certify().values())

    def test_markovian_gst_and_ist_agree(self):
        iset = scenario("0000", noise=True)
        iset = replace(iset, links=[np.eye(16)] * 2)
        data = data_for(iset)
        gst = fit_mle_gst(data, iset, MleConfig(**FAST))
        ist = fit_mle_ist(data, iset, MleConfig(**FAST))
        assert gst.sep <= 1e-8 and ist.sep <= 1e-8

    def test_non_markovian_ordering(self):
        iset = scenario("01210")
        data = data_for(iset)
        ist = fit_mle_ist(data, iset, MleConfig(**FAST))
        gst = fit_mle_gst(data, iset, MleConfig(max_inner=60, max_rounds=2))
        assert ist.sep <= 1e-3 * gst.sep

    def test_shared_worse_under_time_varying_noise(self):
        iset = scenario("0000", noise=True)
        iset = replace(iset, links=[np.eye(16)] * 2)
        data = data_for(iset)
        gst = fit_mle_gst(data, iset, MleConfig(**FAST))
        gsts = fit_mle_gst(data, iset, MleConfig(**FAST), shared=True)
        assert gsts.sep >= gst.sep

    def test_trace_monotone_within_rounds(self):
        iset = scenario("0121", noise=True)
        res = fit_mle_ist(data_for(iset), iset, MleConfig(**FAST))
        for rnd in {row["round"] for row in res.trace}:
            costs = [row["cost"] for row in res.trace if row["round"] == rnd]
            assert all(b <= a for a, b in zip(costs, costs[1:]))
        assert res.trace_csv().splitlines()[0] == "round,evaluation,mu,cost,likelihood,violation"

    def test_json_has_no_runtime(self):
        iset = scenario("012")
        blob = fit_mle_ist(data_for(iset), iset, MleConfig(**FAST)).to_json()
        assert "runtime_s" not in blob["metadata"]
        assert blob["kinds"][-1] == ["measurement"]

    def test_config_round_trip_and_unknown_keys(self):
        cfg = MleConfig(max_inner=7, jitter=0.1)
        assert MleConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(ValueError):
            MleConfig.from_dict({"bogus": 1})


class TestReduced:
    def test_parameter_count_formula(self):
        assert reduced_parameter_count([10, 10], 2) == 572

    def test_free_entries_k2(self):
        labels = [[i.label for i in library.measure_prepare_instruments()]] * 2
        model = ReducedModel(labels, [["general"] * 16] * 2)
        assert model.n_params - model.n_instrument_params == 51

    def test_refuses_long_processes(self):
        with pytest.raises(ValueError, match="intractable"):
            ReducedModel([["A"]] * (REDUCED_MAX_STEPS + 1), [["general"]] * (REDUCED_MAX_STEPS + 1))

    def test_k1(self):
        iset = build_general_scenario("00", 1)
        res = fit_mle_ist_reduced(data_for(iset), iset, MleConfig(mode="full", **FAST))
        assert res.sep <= 1e-8

    def test_k2_markovian_causal_and_feasible(self):
        fam = library.measure_prepare_instruments()
        noisy = [Instrument(i.label, i.kind, depolarizing_ptm(0.05) @ i.ptm) for i in fam]
        base = build_general_scenario("000", 1)
        iset = FullInstrumentSet(2, 2, 1, [noisy] * 2, [fam] * 2, base.links, base.initial, "general")
        res = fit_mle_ist_reduced(data_for(iset), iset, MleConfig(mode="full", **FAST))
        ups = res.model.process_tensor(res.theta)
        rep = causality_check(ups, tol=1e-6)
        assert rep.causal
        assert res.sep <= 1e-6 and res.violation <= 1e-8
        assert np.linalg.eigvalsh(process_tensor_choi(ups)).min() >= -1e-8
        assert res.metadata["causality"]["causal"]
        assert "process_tensor" in res.to_json()

    def test_repair_makes_tensor_psd(self, rng):
        labels = [[i.label for i in library.measure_prepare_instruments()]] * 2
        model = ReducedModel(labels, [["general"] * 16] * 2)
        th = rng.uniform(-1, 1, model.n_params)
        fixed = model.repair(th)
        assert model.violation(fixed) <= 1e-8

    def test_reduced_jacobian(self, rng):
        iset = build_general_scenario("000", 2)
        data = data_for(iset)
        model = ReducedModel(iset.labels, [["general"] * 16] * 2)
        compiled = model.compile(data.circuits)
        th = rng.uniform(-0.3, 0.3, model.n_params)
        p, j = model.predict(th, compiled, jacobian=True)
        v = rng.normal(size=th.shape) * 1e-6
        p2 = model.predict(th + v, compiled)
        assert np.abs(p2 - p - j @ v).max() <= 1e-9
