"""Linear-inversion instrument set tomography (LIST).

For a target step ``t`` every probability is linear in the instrument applied
there: ``p = Tr[B^T A]`` with ``B`` fixed by the instruments before and after
``t`` and by the hidden SE evolution.  Fixing a set of such contexts (fiducial
pairs) gives a probability matrix ``Gamma`` (contexts x instruments) which equals
an unknown invertible transform of the vectorized instruments.  The transform is
fixed by least squares against the experimenter's knowledge, and a process tensor
built from the recovered instruments' duals reproduces every measured probability.

NISQ mode treats gates and measurements separately: gates drop their fixed first
PTM row (``d^2 (d^2 - 1)`` unknowns), measurements keep only their first row
(``d^2`` unknowns), and each step is in turn treated as the last.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from numpy.typing import NDArray

from .pauli import Instrument, certify, superket
from .process_tensor import ReducedInstrumentSet, build_reduced_set, independent_subset
from .simulate import Circuit, ExperimentRecord, FullInstrumentSet, enumerate_circuits

log = logging.getLogger(__name__)

COND_FLAG = 1e8
RANK_TOL = 1e-8


class DeficiencyError(ValueError):
    """The available sets cannot supply the requested probabilities."""


class CoverageError(ValueError):
    """Records do not cover the circuits a design needs."""

    def __init__(self, missing: Sequence[Circuit]):
        self.missing = list(missing)
        shown = ", ".join(str(c) for c in self.missing[:10])
        super().__init__(f"{len(self.missing)} design circuits have no record: {shown}"
                         + (" ..." if len(self.missing) > 10 else ""))


@dataclass(frozen=True)
class FiducialPair:
    """Instruments before (``prefix``) and after (``suffix``) the target step."""

    prefix: Circuit
    suffix: Circuit
    alpha: int

    def circuit(self, x: int) -> Circuit:
        return (*self.prefix, x, *self.suffix)


@dataclass
class StepDesign:
    """Fiducial contexts for one block: the gates of step ``t`` or its measurements."""

    t: int
    block: str  # "cptp", "measurement" or "general"
    columns: list[int]
    candidates: list[FiducialPair]
    fiducials: list[int]
    target: int

    @property
    def rows(self) -> list[FiducialPair]:
        return [self.candidates[i] for i in self.fiducials]

    def circuits(self, rows: Sequence[FiducialPair] | None = None) -> list[Circuit]:
        rows = self.rows if rows is None else rows
        return [pair.circuit(x) for pair in rows for x in self.columns]


@dataclass
class ListDesign:
    k: int
    d: int
    mode: str
    labels: list[list[str]]
    kinds: list[list[str]]
    circuits: list[Circuit]
    blocks: list[StepDesign]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def named(c):
            return [self.labels[t][i] for t, i in enumerate(c)]

        return {
            "k": self.k,
            "mode": self.mode,
            "circuits": [named(c) for c in self.circuits],
            "blocks": [
                {
                    "t": b.t,
                    "block": b.block,
                    "columns": [self.labels[b.t][i] for i in b.columns],
                    "fiducials": [
                        {"alpha": p.alpha, "prefix": named(p.prefix),
                         "suffix": [self.labels[b.t + 1 + j][i] for j, i in enumerate(p.suffix)]}
                        for p in b.rows
                    ],
                }
                for b in self.blocks
            ],
            "warnings": list(self.warnings),
        }


def _kinds_of(labels: Sequence[Sequence[str]]) -> list[list[str]]:
    return [["measurement" if lab == "M" else "gate" for lab in step] for step in labels]


def _context_order(pairs: list[tuple[Circuit, Circuit]], identity: list[int | None], t: int) -> list[tuple[Circuit, Circuit]]:
    def nontrivial(pre, suf):
        n = sum(1 for s, i in enumerate(pre) if i != identity[s])
        n += sum(1 for j, i in enumerate(suf) if i != identity[t + 1 + j])
        return n

    return sorted(pairs, key=lambda ps: (nontrivial(*ps), len(ps[1]), ps[0], ps[1]))


def _context_vector(pre: Circuit, suf: Circuit, t: int, knowledge: list[NDArray], block: str) -> NDArray:
    # Markovian knowledge model: B = f_plus f_minus^T with a qubit starting in |0>
    d2 = knowledge[0].shape[-1]
    d = int(round(np.sqrt(d2)))
    zero = np.zeros((d, d))
    zero[0, 0] = 1.0
    state = superket(zero)
    for s, i in enumerate(pre):
        state = knowledge[s][i] @ state
    func = np.zeros(d2)
    func[0] = np.sqrt(d)
    for j, i in reversed(list(enumerate(suf))):
        func = func @ knowledge[t + 1 + j][i]
    b = np.outer(func, state)
    if block == "cptp":
        return b[1:].ravel()
    if block == "measurement":
        return b[0]
    return b.ravel()


def _greedy_rows(vectors: NDArray, target: int) -> list[int]:
    chosen: list[int] = []
    basis = np.zeros((0, vectors.shape[1]))
    for i, v in enumerate(vectors):
        if len(chosen) == target:
            break
        resid = v - basis.T @ (basis @ v) if len(basis) else v
        if np.linalg.norm(resid) > RANK_TOL * max(1.0, np.linalg.norm(v)):
            chosen.append(i)
            basis = np.vstack([basis, resid / np.linalg.norm(resid)])
    # fill up to the target in enumeration order
    for i in range(len(vectors)):
        if len(chosen) >= target:
            break
        if i not in chosen:
            chosen.append(i)
    return sorted(chosen)


def design(
    labels: Sequence[Sequence[str]] | FullInstrumentSet,
    knowledge: Sequence[NDArray] | None = None,
    mode: str = "nisq",
    kinds: Sequence[Sequence[str]] | None = None,
) -> ListDesign:
    """Deterministic LIST design over the available sets.

    The circuit list holds every circuit over the available sets so the process
    tensor can be assembled afterwards.  For each block the candidate contexts are
    ordered by how many non-identity instruments they contain, then by suffix length,
    then lexicographically; fiducials are added greedily while they raise the rank
    of the knowledge-predicted (Markovian) context space, then filled to the
    target count in candidate order.
    """
    if isinstance(labels, FullInstrumentSet):
        iset = labels
        labels = iset.labels
        kinds = [[i.kind for i in step] for step in iset.instruments]
        if knowledge is None:
            knowledge = [np.stack([i.ptm for i in step]) for step in iset.knowledge]
        mode = iset.mode
    labels = [list(step) for step in labels]
    if not labels or any(not step for step in labels):
        raise DeficiencyError("every step needs at least one available instrument")
    kinds = _kinds_of(labels) if kinds is None else [list(s) for s in kinds]
    k = len(labels)
    if knowledge is None:
        from .library import knowledge_instrument

        knowledge = [np.stack([knowledge_instrument(lab).ptm for lab in step]) for step in labels]
    knowledge = [np.asarray(a, dtype=float) for a in knowledge]
    d2 = knowledge[0].shape[-1]
    d = int(round(np.sqrt(d2)))
    if mode not in ("nisq", "general"):
        raise ValueError(f"unknown mode {mode!r}")

    gates = [[i for i, kd in enumerate(step) if kd == "gate"] for step in kinds]
    meas = [[i for i, kd in enumerate(step) if kd == "measurement"] for step in kinds]
    identity = []
    for t in range(k):
        ident = [i for i in gates[t] if np.allclose(knowledge[t][i], np.eye(d2))]
        identity.append(ident[0] if ident else None)

    notes: list[str] = []
    blocks: list[StepDesign] = []
    if mode == "nisq":
        if not meas[k - 1]:
            raise DeficiencyError("NISQ designs need a measurement at the last step")
        if any(kd != "measurement" for kd in kinds[k - 1]):
            raise DeficiencyError("NISQ designs only allow measurements at the last step")
        for t in range(k):
            prefixes = list(itertools.product(*gates[:t]))
            if gates[t] and t < k - 1:
                suffixes = [
                    (*mid, m)
                    for tau in range(t + 1, k)
                    for mid in itertools.product(*gates[t + 1:tau])
                    for m in meas[tau]
                ]
                blocks.append(_block(t, "cptp", gates[t], prefixes, suffixes, identity, knowledge, d2 * (d2 - 1), notes))
            if meas[t]:
                blocks.append(_block(t, "measurement", meas[t], prefixes, [()], identity, knowledge, d2, notes))
    else:
        for t in range(k):
            prefixes = list(itertools.product(*[range(len(s)) for s in labels[:t]]))
            suffixes = list(itertools.product(*[range(len(s)) for s in labels[t + 1:]]))
            blocks.append(_block(t, "general", list(range(len(labels[t]))), prefixes, suffixes, identity, knowledge,
                                 d2 * d2, notes))
        notes.append("general-mode LIST is experimental")
    circuits = enumerate_circuits(labels, kinds, mode)
    return ListDesign(k, d, mode, labels, kinds, circuits, blocks, notes)


def _block(t, block, columns, prefixes, suffixes, identity, knowledge, target, notes) -> StepDesign:
    if not prefixes or not suffixes:
        raise DeficiencyError(f"step {t} has no contexts for its {block} block")
    ordered = _context_order([(p, s) for p in prefixes for s in suffixes], identity, t)
    pairs = [FiducialPair(tuple(p), tuple(s), a) for a, (p, s) in enumerate(ordered)]
    vecs = np.array([_context_vector(p.prefix, p.suffix, t, knowledge, block) for p in pairs])
    fid = _greedy_rows(vecs, target)
    if len(fid) < target:
        notes.append(f"step {t} {block}: only {len(fid)} contexts available, {target} wanted")
    return StepDesign(t, block, list(columns), pairs, fid, target)


@dataclass
class ProbabilityMatrix:
    t: int
    block: str
    columns: list[int]
    rows: list[FiducialPair]
    gamma: NDArray[np.float64]

    @property
    def rank(self) -> int:
        if self.gamma.size == 0:
            return 0
        sv = np.linalg.svd(self.gamma, compute_uv=False)
        return int(np.sum(sv > RANK_TOL * max(sv[0], 1e-300)))


def records_lookup(records: Sequence[ExperimentRecord] | Mapping[Circuit, float]) -> dict[Circuit, float]:
    if isinstance(records, Mapping):
        return {tuple(c): float(p) for c, p in records.items()}
    return {r.circuit: r.p for r in records}


def assemble(records, design: ListDesign, select: str = "data") -> list[ProbabilityMatrix]:
    """Probability matrices for every block of the design.

    ``select="design"`` keeps the fiducials frozen by :func:`design`.  With
    ``select="data"`` the rows are re-chosen by pivoted QR over all candidate
    contexts of the measured matrix, which recovers directions that the Markovian
    knowledge model cannot anticipate (correlations carried by the environment).
    """
    lookup = records_lookup(records)
    if select not in ("design", "data"):
        raise ValueError(f"unknown row selection {select!r}")
    missing = []
    out = []
    for b in design.blocks:
        rows = b.rows if select == "design" else b.candidates
        needed = b.circuits(rows)
        gaps = [c for c in needed if c not in lookup]
        if gaps:
            missing.extend(gaps)
            continue
        gamma = np.array([lookup[c] for c in needed]).reshape(len(rows), len(b.columns))
        if select == "data":
            keep = _pivot_rows(gamma, b.target)
            rows = [rows[i] for i in keep]
            gamma = gamma[keep]
        out.append(ProbabilityMatrix(b.t, b.block, b.columns, list(rows), gamma))
    if missing:
        raise CoverageError(sorted(set(missing), key=lambda c: (len(c), c)))
    return out


def _pivot_rows(gamma: NDArray, target: int) -> list[int]:
    import scipy.linalg

    _, _, piv = scipy.linalg.qr(gamma.T, mode="economic", pivoting=True)
    chosen = list(piv[: min(target, len(piv))])
    for i in range(gamma.shape[0]):
        if len(chosen) >= target:
            break
        if i not in chosen:
            chosen.append(i)
    return sorted(int(i) for i in chosen)


@dataclass
class GaugeResult:
    x: NDArray[np.float64]
    recovered: NDArray[np.float64]
    residual: float
    condition: float
    rank: int
    flagged: bool


def gauge_optimize(gamma: NDArray, knowledge: NDArray) -> GaugeResult:
    """``X = argmin ||X Gamma - Xi_knowledge||_F`` and the recovered ``Xi = X Gamma``.

    Uses the minimum-norm least-squares solution, which equals the closed form
    ``Xi_k Gamma^T (Gamma Gamma^T)^{-1}`` whenever ``Gamma`` has full row rank.
    """
    gamma = np.asarray(gamma, dtype=float)
    knowledge = np.asarray(knowledge, dtype=float)
    if gamma.shape[1] != knowledge.shape[1]:
        raise ValueError(f"Gamma has {gamma.shape[1]} columns, knowledge has {knowledge.shape[1]}")
    sol, _, rank, sv = np.linalg.lstsq(gamma.T, knowledge.T, rcond=None)
    x = sol.T
    recovered = x @ gamma
    residual = float(np.linalg.norm(recovered - knowledge))
    xs = np.linalg.svd(x, compute_uv=False) if x.size else np.array([1.0])
    cond = float(xs[0] / xs[-1]) if xs[-1] > 0 else float("inf")
    flagged = cond > COND_FLAG
    if gamma.shape[0] and rank < gamma.shape[0]:
        log.info("probability matrix rank %d below its %d rows", rank, gamma.shape[0])
    return GaugeResult(x, recovered, residual, cond, int(rank), flagged)


def _vectorize(ptms: NDArray, block: str) -> NDArray:
    if block == "cptp":
        return ptms[:, 1:, :].reshape(len(ptms), -1).T
    if block == "measurement":
        return ptms[:, 0, :].T
    return ptms.reshape(len(ptms), -1).T


def _devectorize(cols: NDArray, block: str, d2: int) -> NDArray:
    n = cols.shape[1]
    out = np.zeros((n, d2, d2))
    if block == "cptp":
        out[:, 0, 0] = 1.0
        out[:, 1:, :] = cols.T.reshape(n, d2 - 1, d2)
    elif block == "measurement":
        out[:, 0, :] = cols.T
    else:
        out[:] = cols.T.reshape(n, d2, d2)
    return out


@dataclass
class ListResult:
    reduced: ReducedInstrumentSet
    knowledge: list[NDArray[np.float64]]
    kinds: list[list[str]]
    gauges: dict[tuple[int, str], GaugeResult]
    matrices: list[ProbabilityMatrix]
    distances: dict[tuple[int, str], float]
    sep_design: float
    warnings: list[str]

    def certify(self, tol: float = 1e-8) -> dict:
        out = {}
        for t, step in enumerate(self.reduced.instruments):
            for i, ptm in enumerate(step):
                kind = "measurement" if self.kinds[t][i] == "measurement" else "gate"
                label = self.reduced.labels[t][i]
                out[(t, label)] = certify(Instrument(label, kind, ptm), tol)
        return out

    def to_json(self) -> dict:
        return {
            "instruments": [
                {lab: self.reduced.instruments[t][i].tolist() for i, lab in enumerate(labels)}
                for t, labels in enumerate(self.reduced.labels)
            ],
            "kinds": [list(k) for k in self.kinds],
            "distances": [
                {"t": t, "label": lab, "distance": dist} for (t, lab), dist in sorted(self.distances.items())
            ],
            "process_tensors": {str(tau): ups.to_json() for tau, ups in sorted(self.reduced.tensors.items())},
            "sep_design": self.sep_design,
            "condition_numbers": [
                {"t": t, "block": blk, "condition": g.condition, "residual": g.residual, "rank": g.rank}
                for (t, blk), g in sorted(self.gauges.items())
            ],
            "warnings": list(self.warnings),
        }


def recover(
    records,
    design: ListDesign,
    knowledge: Sequence[NDArray],
    select: str = "data",
) -> ListResult:
    """Run LIST: assemble, gauge-optimize per block, rebuild the process tensors."""
    lookup = records_lookup(records)
    knowledge = [np.asarray(a, dtype=float) for a in knowledge]
    d2 = knowledge[0].shape[-1]
    mats = assemble(lookup, design, select)
    recovered = [a.copy() for a in knowledge]
    gauges: dict[tuple[int, str], GaugeResult] = {}
    notes = list(design.warnings)
    for pm in mats:
        kn = _vectorize(knowledge[pm.t][pm.columns], pm.block)
        g = gauge_optimize(pm.gamma, kn)
        gauges[(pm.t, pm.block)] = g
        recovered[pm.t][pm.columns] = _devectorize(g.recovered, pm.block, d2)
        if g.flagged:
            notes.append(f"step {pm.t} {pm.block}: gauge condition number {g.condition:.3g}")
        unknowns = kn.shape[0]
        if pm.rank < unknowns and pm.rank < len(pm.columns):
            notes.append(f"step {pm.t} {pm.block}: probability matrix rank {pm.rank} < {unknowns}; "
                         "instruments there are only fixed up to the knowledge projection")
    for n in notes:
        if n not in design.warnings:
            log.info(n)

    k = design.k
    basis, terminal = [], []
    for t in range(k):
        kinds = design.kinds[t]
        if design.mode == "nisq":
            gates = [i for i in range(len(kinds)) if kinds[i] == "gate"]
            meas = [i for i in range(len(kinds)) if kinds[i] == "measurement"]
        else:
            gates = meas = list(range(len(kinds)))
        basis.append([gates[i] for i in independent_subset(recovered[t][gates])] if gates else [])
        terminal.append([meas[i] for i in independent_subset(recovered[t][meas])] if meas else [])
    lengths = [k] if design.mode == "general" else None
    reduced = build_reduced_set(lookup, recovered, design.labels, basis, terminal, lengths)

    distances = {}
    for t in range(k):
        for i, lab in enumerate(design.labels[t]):
            distances[(t, lab)] = float(np.linalg.norm(recovered[t][i] - knowledge[t][i]))
    circuits = design.circuits
    pred = reduced.predict(circuits)
    data = np.array([lookup[c] for c in circuits])
    sep_design = float(np.sum((pred - data) ** 2))
    return ListResult(reduced, knowledge, [list(s) for s in design.kinds], gauges, mats, distances, sep_design, notes)


def recover_nisq(records, design: ListDesign, knowledge: Sequence[NDArray], select: str = "data") -> ListResult:
    if design.mode != "nisq":
        raise ValueError("recover_nisq needs a NISQ design")
    return recover(records, design, knowledge, select)


def run_list(iset: FullInstrumentSet, records, select: str = "data") -> ListResult:
    knowledge = [np.stack([i.ptm for i in step]) for step in iset.knowledge]
    return recover(records, design(iset), knowledge, select)
