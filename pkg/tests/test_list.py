from __future__ import annotations

import numpy as np
import pytest

from nmgst import library
from nmgst.list_estimator import (
    CoverageError,
    DeficiencyError,
    assemble,
    design,
    gauge_optimize,
    run_list,
)
from nmgst.process_tensor import evaluate, gauge_transform
from nmgst.simulate import (
    ExperimentRecord,
    ScenarioConfig,
    enumerate_circuits,
    exact_records,
    probabilities,
    sampled_records,
)


def scenario(label="00000", menu="J_oc", bias=None, noise=None):
    return ScenarioConfig(label, menu, bias, {"schedule": "linear"} if noise else None).build()


@pytest.fixture(scope="module")
def biased():
    iset = scenario(bias="reference")
    recs = exact_records(iset, enumerate_circuits(iset))
    return iset, recs, run_list(iset, recs)


def sep_all(res, iset, recs):
    pred = res.reduced.predict([r.circuit for r in recs])
    return float(np.sum((pred - np.array([r.p for r in recs])) ** 2))


class TestDesign:
    def test_ibm_k4_shapes(self):
        d = design(scenario(menu="J_ibm"))
        shapes = {(b.t, b.block): (len(b.fiducials), len(b.columns)) for b in d.blocks}
        for t in range(3):
            assert shapes[(t, "cptp")] == (12, 9)
        assert shapes[(3, "measurement")] == (4, 1)

    def test_single_step_reports_deficiency(self):
        d = design(scenario("00", "J_ibm"))
        (block,) = d.blocks
        assert block.block == "measurement" and block.target == 4
        assert len(block.fiducials) == 1
        assert any("only 1 contexts" in w for w in d.warnings)

    def test_reproducible(self):
        a, b = design(scenario()), design(scenario())
        assert a.circuits == b.circuits
        assert a.to_json() == b.to_json()

    def test_fiducial_bijection(self):
        d = design(scenario(menu="J_ibm"))
        for b in d.blocks:
            alphas = [p.alpha for p in b.candidates]
            assert alphas == list(range(len(alphas)))
            circs = {p.circuit(b.columns[0]) for p in b.candidates}
            assert len(circs) == len(alphas)

    def test_empty_step_rejected(self):
        with pytest.raises(DeficiencyError):
            design([["A0", "M"], []])


class TestAssemble:
    def test_entries_are_probabilities(self):
        iset = scenario(menu="J_ibm")
        d = design(iset)
        recs = exact_records(iset, d.circuits)
        for m in assemble(recs, d, select="design"):
            b = next(b for b in d.blocks if (b.t, b.block) == (m.t, m.block))
            circ = b.circuits(m.rows)
            assert np.allclose(m.gamma.ravel(), probabilities(iset, circ))

    def test_sampled_entries(self):
        iset = scenario("000", "J_ibm")
        d = design(iset)
        recs = sampled_records(iset, d.circuits, 5000, seed=3)
        by = {r.circuit: r for r in recs}
        m = assemble(recs, d, select="design")[0]
        b = d.blocks[0]
        assert all(g == by[c].n_success / 5000 for g, c in zip(m.gamma.ravel(), b.circuits(m.rows)))

    def test_coverage_gap_lists_missing(self):
        iset = scenario("000", "J_ibm")
        d = design(iset)
        recs = exact_records(iset, d.circuits)[5:]
        with pytest.raises(CoverageError) as info:
            assemble(recs, d)
        assert len(info.value.missing) >= 1
        assert all(c in d.circuits for c in info.value.missing)

    def test_rank_at_step_one(self):
        iset = scenario()
        ms = assemble(exact_records(iset, enumerate_circuits(iset)), design(iset))
        cptp1 = next(m for m in ms if (m.t, m.block) == (1, "cptp"))
        assert cptp1.rank == 9


class TestGauge:
    def test_knowledge_recovered_for_independent_perfect_set(self):
        # Markovian perfect J_ibm set; at t=2 of k=5 two-gate prefixes and suffixes span every direction
        from dataclasses import replace
        iset = scenario("000000", "J_ibm")
        iset = replace(iset, links=[np.eye(16)] * 4)
        recs = exact_records(iset, enumerate_circuits(iset))
        res = run_list(iset, recs)
        got = res.reduced.instruments[2][:9]
        want = np.stack([i.ptm for i in iset.knowledge[2]])[:9]
        assert np.abs(got - want).max() <= 1e-8

    def test_row_transform_invariance(self, rng):
        gamma = rng.normal(size=(12, 9))
        xi = rng.normal(size=(12, 9))
        m = rng.normal(size=(12, 12)) + 4 * np.eye(12)
        a, b = gauge_optimize(gamma, xi), gauge_optimize(m @ gamma, xi)
        assert np.allclose(a.recovered, b.recovered, atol=1e-9)

    def test_condition_flag(self):
        gamma = np.diag([1.0, 1e-10, 1.0])
        assert gauge_optimize(gamma, np.eye(3)).flagged


class TestRecovery:
    def test_perfect_ibm_design_sep(self):
        iset = scenario(menu="J_ibm")
        recs = exact_records(iset, enumerate_circuits(iset))
        res = run_list(iset, recs)
        assert res.sep_design <= 1e-12

    def test_biased_overcomplete(self, biased):
        iset, recs, res = biased
        assert sep_all(res, iset, recs) <= 1e-10
        assert max(res.distances.values()) >= 1e-3
        by_t = {t: max(v for (s, _), v in res.distances.items() if s == t) for t in range(3)}
        assert by_t[0] >= 10 * max(by_t[1], by_t[2])

    def test_gauge_invariance_of_predictions(self, biased, rng):
        iset, recs, res = biased
        red = res.reduced
        tau = 3
        ups = red.tensors[tau]
        circ = [r.circuit for r in recs if len(r.circuit) == tau + 1][::25]
        base = red.predict(circ)
        for _ in range(20):
            gauges = [np.eye(4) + 0.2 * rng.normal(size=(4, 4)) for _ in range(tau + 1)]
            moved = gauge_transform(ups, gauges)
            vals = [evaluate(moved, [gauges[t] @ red.instruments[t][c[t]] for t in range(tau + 1)]) for c in circ]
            assert np.abs(np.array(vals) - base).max() <= 1e-10

    def test_idempotent_on_own_output(self, biased):
        iset, recs, res = biased
        circ = [r.circuit for r in recs]
        regenerated = [ExperimentRecord(c, float(p)) for c, p in zip(circ, res.reduced.predict(circ))]
        again = run_list(iset, regenerated)
        assert np.abs(again.reduced.predict(circ) - res.reduced.predict(circ)).max() <= 1e-9
        for t in range(len(res.reduced.instruments)):
            assert np.abs(again.reduced.instruments[t] - res.reduced.instruments[t]).max() <= 1e-9

    def test_certify_attached_not_enforced(self, biased):
        _, _, res = biased
        reports = res.certify()
        assert len(reports) == sum(len(s) for s in res.reduced.instruments)

    def test_to_json(self, biased):
        blob = biased[2].to_json()
        assert {"instruments", "distances", "process_tensors", "sep_design", "condition_numbers"} <= set(blob)
