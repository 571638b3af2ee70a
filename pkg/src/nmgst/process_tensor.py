"""Process tensors in PTM form, dual sets, causality certification and the PTT baseline.

A ``k``-step process tensor is stored as a real ``D^k x D^k`` matrix (``D = d^2``)
whose row multi-index ``(i_0, ..., i_{k-1})`` and column multi-index
``(j_0, ..., j_{k-1})`` match ``kron(A_0, ..., A_{k-1})``; the outcome probability
is ``sum(Y * kron(A_0, ..., A_{k-1}))``.

Choi form: ``(1/d^{2k}) sum_IJ Y_IJ (x)_t (P_{j_t}^T (x) P_{i_t})``, the slot-wise
extension of the instrument Choi convention.  Causality is stated on the Pauli
components ``Y_IJ`` read in reverse time, slots ``(i_{k-1}, j_{k-1}, i_{k-2}, ...)``:
a component whose leading slots are all identity and whose first non-identity slot
is an output slot ``i_s`` is banned, and the all-identity component equals one.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .pauli import _choi_basis

MAX_STEPS = 5
PIVOT_TOL = 1e-8


class RankDeficientError(ValueError):
    """Raised when an instrument list is linearly dependent."""

    def __init__(self, message: str, rank: int, dependent: list[int]):
        super().__init__(message)
        self.rank = rank
        self.dependent = dependent


def independent_subset(ptms: ArrayLike, tol: float = PIVOT_TOL) -> list[int]:
    """Indices of a maximal linearly independent subset, chosen by pivoted QR.

    Returned in ascending order.
    """
    mats = np.asarray(ptms, dtype=float)
    if mats.ndim == 1:
        mats = mats[:, None]
    cols = mats.reshape(mats.shape[0], -1).T
    if cols.size == 0:
        return []
    _, r, piv = scipy.linalg.qr(cols, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    scale = max(1.0, diag[0]) if diag.size else 1.0
    rank = int(np.sum(diag > tol * scale))
    return sorted(int(i) for i in piv[:rank])


@dataclass(frozen=True)
class DualSet:
    """Matrices ``D_i`` with ``Tr[D_i^T A_j] = delta_ij``."""

    duals: NDArray[np.float64]

    def __len__(self) -> int:
        return self.duals.shape[0]

    def coefficients(self, ptms: ArrayLike) -> NDArray[np.float64]:
        """``C[y, x] = Tr[D_x^T A_y]`` for a stack of PTMs ``A_y``."""
        a = np.asarray(ptms, dtype=float)
        return a.reshape(a.shape[0], -1) @ self.duals.reshape(len(self), -1).T


def dual_set(ptms: ArrayLike, tol: float = PIVOT_TOL) -> DualSet:
    mats = np.asarray(ptms, dtype=float)
    vecs = mats.reshape(mats.shape[0], -1)
    keep = independent_subset(mats, tol)
    if len(keep) < len(vecs):
        dependent = [i for i in range(len(vecs)) if i not in keep]
        raise RankDeficientError(
            f"instruments are linearly dependent: rank {len(keep)} < {len(vecs)}; dependent indices {dependent}",
            len(keep),
            dependent,
        )
    # (V V^T)^{-1} V computed as R^{-1} Q^T from V^T = QR, which avoids squaring the condition number
    q, r = np.linalg.qr(vecs.T)
    duals = scipy.linalg.solve_triangular(r, q.T)
    return DualSet(duals.reshape(mats.shape))


@dataclass(frozen=True)
class ProcessTensorPTM:
    k: int
    d: int
    matrix: NDArray[np.float64]

    def __post_init__(self):
        side = self.d ** (2 * self.k)
        if self.matrix.shape != (side, side):
            raise ValueError(f"process tensor must be {side}x{side}, got {self.matrix.shape}")

    @property
    def pair_tensor(self) -> NDArray[np.float64]:
        """Entries reshaped to ``(D*D,) * k``, one ``(i_t, j_t)`` pair per step."""
        dd = self.d**2
        t = self.matrix.reshape((dd,) * (2 * self.k))
        order = [ax for s in range(self.k) for ax in (s, self.k + s)]
        return t.transpose(order).reshape((dd * dd,) * self.k)

    def to_json(self) -> dict:
        return {"k": self.k, "d": self.d, "entries": self.matrix.ravel().tolist()}

    @classmethod
    def from_json(cls, blob: Mapping) -> "ProcessTensorPTM":
        k, d = int(blob["k"]), int(blob["d"])
        side = d ** (2 * k)
        return cls(k, d, np.asarray(blob["entries"], dtype=float).reshape(side, side))


def _from_pairs(pairs: NDArray, k: int, d: int) -> ProcessTensorPTM:
    dd = d**2
    t = pairs.reshape((dd,) * (2 * k))
    # (i0, j0, i1, j1, ...) -> (i0, i1, ..., j0, j1, ...)
    order = [2 * s for s in range(k)] + [2 * s + 1 for s in range(k)]
    return ProcessTensorPTM(k, d, t.transpose(order).reshape(dd**k, dd**k))


def from_probability_tensor(probs: ArrayLike, duals_per_step: Sequence[DualSet]) -> ProcessTensorPTM:
    """``sum_x p_x D_{x_0} (x) ... (x) D_{x_{k-1}}`` with ``p`` given as a dense tensor."""
    p = np.asarray(probs, dtype=float)
    k = len(duals_per_step)
    if p.shape != tuple(len(ds) for ds in duals_per_step):
        raise ValueError(f"probability tensor shape {p.shape} does not match dual sets")
    if k > MAX_STEPS:
        raise ValueError(f"process tensors are limited to {MAX_STEPS} steps")
    dd = duals_per_step[0].duals.shape[1]
    d = int(round(np.sqrt(dd)))
    out = p
    for ds in duals_per_step:
        # contract the leading instrument axis, append this step's (i, j) pair axis
        flat = ds.duals.reshape(len(ds), -1)
        out = np.tensordot(out, flat, axes=([0], [0]))
    return _from_pairs(out, k, d)


def from_probabilities(probs: Mapping[tuple[int, ...], float], duals_per_step: Sequence[DualSet]) -> ProcessTensorPTM:
    """Process tensor from probabilities keyed by index tuples into each dual set."""
    shape = tuple(len(ds) for ds in duals_per_step)
    tensor = np.empty(shape)
    missing = []
    for x in itertools.product(*[range(n) for n in shape]):
        try:
            tensor[x] = probs[x]
        except KeyError:
            missing.append(x)
    if missing:
        raise KeyError(f"{len(missing)} instrument tuples missing, e.g. {missing[:5]}")
    return from_probability_tensor(tensor, duals_per_step)


def evaluate(upsilon: ProcessTensorPTM, ptms: Sequence[ArrayLike]) -> float:
    if len(ptms) != upsilon.k:
        raise ValueError(f"expected {upsilon.k} instruments, got {len(ptms)}")
    dd = upsilon.d**2
    for a in ptms:
        if np.shape(a) != (dd, dd):
            raise ValueError(f"instrument shape {np.shape(a)} does not match dimension {upsilon.d}")
    return float(evaluate_batch(upsilon, [np.asarray(a, dtype=float)[None] for a in ptms])[0])


def evaluate_batch(upsilon: ProcessTensorPTM, stacks: Sequence[ArrayLike]) -> NDArray[np.float64]:
    """Vectorized evaluation; ``stacks[t]`` has shape ``(N, D, D)``."""
    k = upsilon.k
    pairs = upsilon.pair_tensor
    n = np.asarray(stacks[0]).shape[0]
    dd2 = upsilon.d**4
    flat = [np.asarray(a, dtype=float).reshape(n, dd2) for a in stacks]
    rest = pairs.reshape(dd2, -1)
    acc = flat[0] @ rest  # (N, remaining)
    for t in range(1, k):
        acc = np.einsum("nq,nqr->nr", flat[t], acc.reshape(n, dd2, -1))
    return acc.reshape(n)


def gauge_transform(upsilon: ProcessTensorPTM, gauges: Sequence[ArrayLike]) -> ProcessTensorPTM:
    """Process tensor consistent with instruments ``B_t A_t``: ``((x) B_t)^{-T} Y``."""
    inv = np.ones((1, 1))
    for b in gauges:
        inv = np.kron(inv, np.linalg.inv(np.asarray(b, dtype=float)))
    return ProcessTensorPTM(upsilon.k, upsilon.d, inv.T @ upsilon.matrix)


def process_tensor_choi(upsilon: ProcessTensorPTM) -> NDArray[np.complex128]:
    k, d = upsilon.k, upsilon.d
    dd = d * d
    basis = _choi_basis(d).reshape(dd * dd, dd, dd)
    out = upsilon.pair_tensor
    for _ in range(k):
        out = np.tensordot(out, basis, axes=([0], [0]))
    # axes now (a0, b0, a1, b1, ...) -> rows (a0, a1, ...), cols (b0, b1, ...)
    order = [2 * s for s in range(k)] + [2 * s + 1 for s in range(k)]
    return out.transpose(order).reshape(dd**k, dd**k) / d ** (2 * k)


def banned_mask(k: int, d: int) -> NDArray[np.bool_]:
    """Boolean mask over ``upsilon.matrix`` marking causality-banned components."""
    dd = d * d
    idx = np.indices((dd,) * (2 * k))
    rows, cols = idx[:k], idx[k:]
    banned = np.zeros((dd,) * (2 * k), dtype=bool)
    future_trivial = np.ones_like(banned)
    for s in reversed(range(k)):
        banned |= future_trivial & (rows[s] != 0)
        future_trivial &= (rows[s] == 0) & (cols[s] == 0)
    return banned.reshape(dd**k, dd**k)


@dataclass(frozen=True)
class CausalityReport:
    identity_component: float
    identity_residual: float
    max_violation: float
    worst_entry: tuple[int, int] | None
    causal: bool

    def as_dict(self) -> dict:
        return {
            "identity_component": self.identity_component,
            "identity_residual": self.identity_residual,
            "max_violation": self.max_violation,
            "worst_entry": list(self.worst_entry) if self.worst_entry is not None else None,
            "causal": self.causal,
        }


def causality_check(upsilon: ProcessTensorPTM, tol: float = 1e-9) -> CausalityReport:
    mask = banned_mask(upsilon.k, upsilon.d)
    m = upsilon.matrix
    vals = np.where(mask, np.abs(m), 0.0)
    worst = np.unravel_index(int(np.argmax(vals)), m.shape) if mask.any() else None
    viol = float(vals.max()) if mask.any() else 0.0
    ident = float(m[0, 0])
    resid = abs(ident - 1.0)
    return CausalityReport(ident, resid, viol, None if worst is None else (int(worst[0]), int(worst[1])),
                           bool(viol <= tol and resid <= tol))


@dataclass
class ReducedInstrumentSet:
    """Instruments per step plus one process tensor per circuit length.

    ``tensors[tau]`` serves circuits whose last instrument sits at step ``tau``.
    """

    instruments: list[NDArray[np.float64]]
    labels: list[list[str]]
    tensors: dict[int, ProcessTensorPTM]
    basis: list[list[int]] = field(default_factory=list)

    def predict(self, circuits: Sequence[Sequence[int]]) -> NDArray[np.float64]:
        circuits = [tuple(c) for c in circuits]
        out = np.full(len(circuits), np.nan)
        by_len: dict[int, list[int]] = {}
        for n, c in enumerate(circuits):
            by_len.setdefault(len(c), []).append(n)
        for length, rows in by_len.items():
            ups = self.tensors.get(length - 1)
            if ups is None:
                continue
            stacks = [self.instruments[t][[circuits[n][t] for n in rows]] for t in range(length)]
            out[rows] = evaluate_batch(ups, stacks)
        return out


def build_reduced_set(
    lookup: Mapping[tuple[int, ...], float],
    instruments: Sequence[ArrayLike],
    labels: Sequence[Sequence[str]],
    basis: Sequence[Sequence[int]],
    terminal: Sequence[Sequence[int]],
    lengths: Sequence[int] | None = None,
) -> ReducedInstrumentSet:
    """Assemble per-length process tensors from probabilities and instrument bases.

    ``basis[t]`` lists the instruments at step ``t`` whose duals expand the tensor when
    ``t`` is an intermediate step; ``terminal[t]`` lists those used when ``t`` is the
    last step.  ``lookup`` maps full circuits (original indices) to probabilities.
    """
    inst = [np.asarray(a, dtype=float) for a in instruments]
    k = len(inst)
    if lengths is None:
        lengths = [tau + 1 for tau in range(k) if terminal[tau]]
    tensors = {}
    for length in lengths:
        tau = length - 1
        sets = [list(basis[t]) for t in range(tau)] + [list(terminal[tau])]
        duals = [dual_set(inst[t][idx]) for t, idx in enumerate(sets)]
        shape = tuple(len(s) for s in sets)
        tensor = np.empty(shape)
        missing = []
        for pos in itertools.product(*[range(n) for n in shape]):
            circ = tuple(sets[t][i] for t, i in enumerate(pos))
            p = lookup.get(circ)
            if p is None:
                missing.append(circ)
            else:
                tensor[pos] = p
        if missing:
            raise KeyError(f"{len(missing)} circuits needed for the length-{length} process tensor are missing, "
                           f"e.g. {missing[:5]}")
        tensors[tau] = from_probability_tensor(tensor, duals)
    return ReducedInstrumentSet(inst, [list(lab) for lab in labels], tensors, [list(b) for b in basis])


def ptt(
    lookup: Mapping[tuple[int, ...], float],
    knowledge: Sequence[ArrayLike],
    labels: Sequence[Sequence[str]],
    kinds: Sequence[Sequence[str]],
    exclude: Sequence[str] = (),
) -> ReducedInstrumentSet:
    """Process tensor tomography with the experimenter's knowledge as the instruments.

    At each step the excluded labels are dropped and a maximal independent subset of
    the remaining knowledge PTMs spans the tensor.
    """
    inst = [np.asarray(a, dtype=float) for a in knowledge]
    basis, terminal = [], []
    for t, (labs, kds) in enumerate(zip(labels, kinds)):
        gates = [i for i, (lab, kd) in enumerate(zip(labs, kds)) if kd != "measurement" and lab not in exclude]
        meas = [i for i, kd in enumerate(kds) if kd == "measurement"]
        basis.append([gates[i] for i in independent_subset(inst[t][gates])] if gates else [])
        terminal.append([meas[i] for i in independent_subset(inst[t][meas])] if meas else [])
    return build_reduced_set(lookup, inst, labels, basis, terminal)


def choi_to_process_tensor(choi: ArrayLike, k: int, d: int) -> ProcessTensorPTM:
    """Inverse of :func:`process_tensor_choi`: ``Y_IJ = Tr[K_IJ^dag C]``."""
    dd = d * d
    basis = _choi_basis(d).reshape(dd * dd, dd, dd).conj()
    c = np.asarray(choi, dtype=complex)
    # split rows/cols into per-slot (a_t, b_t) and regroup as (a0, b0, a1, b1, ...)
    t = c.reshape((dd,) * (2 * k))
    order = [ax for s in range(k) for ax in (s, k + s)]
    t = t.transpose(order)
    for _ in range(k):
        t = np.tensordot(t, basis, axes=([0, 1], [1, 2]))
    return _from_pairs(np.real(t), k, d)
