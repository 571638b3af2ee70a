"""Constrained maximum-likelihood instrument set tomography (MLE-IST) and GST baselines.

The likelihood is the weighted squared error ``sum_x (p_x - p_hat_x)^2 / sigma_x^2``.
Instruments are parameterized by PTM entries (gates keep their first row fixed at
``(1, 0, ..., 0)`` in NISQ mode), measurements by their superbra, and every SE
unitary by angles ``alpha`` with ``V = PTM(exp(i sum_j alpha_j P_j))``; the initial
SE state is ``V_{-1:0}`` applied to the all-zero state.

Complete positivity, trace non-increase and effect bounds enter as hinge penalties
on eigenvalues, box constraints are handled by the bounded trust-region solver,
and the penalty weight grows tenfold per outer round until the largest violation
falls below tolerance.  A final repair step makes the returned instruments feasible
exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.optimize
from numpy.typing import ArrayLike, NDArray

from .pauli import (
    _choi_basis,
    _mix_to_cp,
    angles_from_unitary,
    choi_to_ptm,
    effect_from_superbra,
    pauli_matrices,
    project_effect,
    ptm_to_choi,
    superket,
)
from .simulate import Circuit, ExperimentRecord, FullInstrumentSet

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """The optimizer produced non-finite values."""


class _TargetReached(Exception):
    def __init__(self, theta: NDArray):
        self.theta = theta


# ---------------------------------------------------------------------------
# data


@dataclass
class MleData:
    """Circuits with observed probabilities and likelihood weights ``1 / sigma^2``."""

    circuits: list[Circuit]
    p: NDArray[np.float64]
    weights: NDArray[np.float64]
    n_shots: list[int | None]

    def __post_init__(self):
        if not self.circuits:
            raise ValueError("no data")

    @classmethod
    def from_records(cls, records: Sequence[ExperimentRecord]) -> "MleData":
        circuits = [r.circuit for r in records]
        p = np.array([r.p for r in records], dtype=float)
        return cls(circuits, p, np.array([1.0 / variance_floor(r) for r in records]), [r.n_shots for r in records])

    @property
    def exact(self) -> bool:
        return all(n is None for n in self.n_shots)


def variance_floor(record: ExperimentRecord) -> float:
    """Sampling variance ``p(1-p)/n`` floored at ``1/n^2``; exact records weigh 1.

    The floor keeps deterministic outcomes (``p`` of 0 or 1) at a finite weight
    equal to what a single flipped shot would imply.
    """
    if record.n_shots is None:
        return 1.0
    n = record.n_shots
    return max(record.p * (1.0 - record.p), 1.0 / n) / n


# ---------------------------------------------------------------------------
# SE unitaries


def _pauli_ptm_parts(dim: int):
    paulis = pauli_matrices(dim)
    return paulis, paulis[1:]


def link_ptm_and_derivatives(alpha: ArrayLike, dim: int) -> tuple[NDArray, NDArray]:
    """PTM of ``exp(i sum alpha_j P_j)`` on a ``dim``-dimensional space and its angle derivatives."""
    alpha = np.asarray(alpha, dtype=float)
    paulis, gens = _pauli_ptm_parts(dim)
    h = np.tensordot(alpha, gens, axes=1)
    lam, w = np.linalg.eigh(h)
    phase = np.exp(1j * lam)
    u = (w * phase) @ w.conj().T
    diff = lam[:, None] - lam[None, :]
    close = np.abs(diff) < 1e-10
    safe = np.where(close, 1.0, diff)
    # divided differences of exp(i x)
    phi = np.where(close, 1j * np.exp(0.5j * (lam[:, None] + lam[None, :])),
                   (phase[:, None] - phase[None, :]) / safe)
    g_eig = np.einsum("ia,jab,bk->jik", w.conj().T, gens, w, optimize=True)
    du = np.einsum("ai,jik,kb->jab", w, g_eig * phi[None], w.conj().T, optimize=True)
    upu = u @ paulis @ u.conj().T
    v = np.real(np.einsum("aij,bji->ab", paulis, upu)) / dim
    # dV_ab = (2/dim) Re Tr[P_a dU P_b U^dag]
    left = np.einsum("jxy,byz,zw->jbxw", du, paulis, u.conj().T, optimize=True)
    dv = 2.0 * np.real(np.einsum("awx,jbxw->jab", paulis, left, optimize=True)) / dim
    return v, dv


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class _Block:
    key: tuple
    kind: str  # "gate", "general" or "measurement"
    offset: int
    size: int


class MleModel:
    """Parameter layout and probability estimator.

    Args:
        labels: per-step instrument labels.
        kinds: per-step kinds (``"gate"``, ``"measurement"`` or ``"general"``).
        d: system dimension.
        d_env: environment dimension; ``1`` removes all SE parameters.
        mode: ``"nisq"`` pins the first PTM row of gates, ``"full"`` fits every entry.
        shared: tie instruments with the same label across steps.
    """

    def __init__(self, labels, kinds, d: int = 2, d_env: int = 2, mode: str = "nisq", shared: bool = False):
        if mode not in ("nisq", "full"):
            raise ValueError(f"unknown mode {mode!r}")
        self.labels = [list(s) for s in labels]
        self.kinds = [list(s) for s in kinds]
        self.k = len(self.labels)
        self.d, self.d_env, self.mode, self.shared = d, d_env, mode, shared
        self.d2 = d * d
        self.de2 = d_env * d_env
        self.dim = d * d_env
        self.big = self.dim**2
        self.environment = d_env > 1
        self.n_alpha = self.big - 1 if self.environment else 0

        blocks: list[_Block] = []
        index: dict[tuple, int] = {}
        self.slot_block: list[list[int]] = []
        offset = 0
        for t, (labs, kds) in enumerate(zip(self.labels, self.kinds)):
            row = []
            for lab, kd in zip(labs, kds):
                kind = "measurement" if kd == "measurement" else ("gate" if mode == "nisq" else "general")
                key = (kind, lab) if shared else (kind, t, lab)
                if key not in index:
                    size = {"gate": self.d2 * (self.d2 - 1), "general": self.d2**2, "measurement": self.d2}[kind]
                    index[key] = len(blocks)
                    blocks.append(_Block(key, kind, offset, size))
                    offset += size
                row.append(index[key])
            self.slot_block.append(row)
        self.blocks = blocks
        self.n_instrument_params = offset
        # alpha blocks: initial link, then link t:t+1 for t < k-1
        self.alpha_offsets = [offset + j * self.n_alpha for j in range(self.k)] if self.environment else []
        self.n_params = offset + self.k * self.n_alpha
        zero = np.zeros((self.dim, self.dim))
        zero[0, 0] = 1.0
        self.zeta = superket(zero)
        self._choi = _choi_basis(d).reshape(self.d2 * self.d2, self.d2, self.d2)
        self._sig = pauli_matrices(d) / np.sqrt(d)

    # -- layout ------------------------------------------------------------

    @property
    def formula_parameter_count(self) -> int:
        """``sum_t m_t d^4 + k (d^2 d'^2 - 1)``."""
        m = sum(len(s) for s in self.labels)
        return m * self.d2**2 + self.k * ((self.d * self.d_env) ** 2 - 1)

    def bounds(self) -> tuple[NDArray, NDArray]:
        lo = np.full(self.n_params, -1.0)
        hi = np.full(self.n_params, 1.0)
        lo[self.n_instrument_params:] = -np.pi
        hi[self.n_instrument_params:] = np.pi
        return lo, hi

    def block_ptm(self, theta: NDArray, b: _Block) -> NDArray:
        v = theta[b.offset:b.offset + b.size]
        out = np.zeros((self.d2, self.d2))
        if b.kind == "gate":
            out[0, 0] = 1.0
            out[1:] = v.reshape(self.d2 - 1, self.d2)
        elif b.kind == "general":
            out[:] = v.reshape(self.d2, self.d2)
        else:
            out[0] = v / np.sqrt(self.d)
        return out

    def _block_grad(self, b: _Block, g: NDArray) -> NDArray:
        # map dp/dPTM (..., d2, d2) onto the block's parameters
        if b.kind == "gate":
            return g[..., 1:, :].reshape(*g.shape[:-2], -1)
        if b.kind == "general":
            return g.reshape(*g.shape[:-2], -1)
        return g[..., 0, :] / np.sqrt(self.d)

    def instruments(self, theta: NDArray) -> list[NDArray]:
        cache = [self.block_ptm(theta, b) for b in self.blocks]
        return [np.stack([cache[i] for i in row]) for row in self.slot_block]

    def alphas(self, theta: NDArray) -> list[NDArray]:
        return [theta[o:o + self.n_alpha] for o in self.alpha_offsets]

    def links(self, theta: NDArray):
        """Initial SE superket, its angle derivatives, link PTMs and their derivatives."""
        if not self.environment:
            zero = np.zeros((self.d, self.d))
            zero[0, 0] = 1.0
            eye = np.eye(self.big)
            return superket(zero), None, [eye] * (self.k - 1), [None] * (self.k - 1)
        vs, dvs = zip(*(link_ptm_and_derivatives(a, self.dim) for a in self.alphas(theta)))
        rho0 = vs[0] @ self.zeta
        drho0 = dvs[0] @ self.zeta
        return rho0, drho0, list(vs[1:]), list(dvs[1:])

    def pack(self, instruments: Sequence[ArrayLike], alphas: Sequence[ArrayLike] | None = None) -> NDArray:
        theta = np.zeros(self.n_params)
        seen = set()
        for t, row in enumerate(self.slot_block):
            for i, bi in enumerate(row):
                if bi in seen:
                    continue
                seen.add(bi)
                b = self.blocks[bi]
                r = np.asarray(instruments[t][i], dtype=float)
                if b.kind == "gate":
                    v = r[1:].ravel()
                elif b.kind == "general":
                    v = r.ravel()
                else:
                    v = r[0] * np.sqrt(self.d)
                theta[b.offset:b.offset + b.size] = v
        if self.environment:
            alphas = [np.zeros(self.n_alpha)] * self.k if alphas is None else alphas
            for o, a in zip(self.alpha_offsets, alphas):
                theta[o:o + self.n_alpha] = a
        return theta

    # -- estimator ---------------------------------------------------------

    def compile(self, circuits: Sequence[Sequence[int]]) -> list[tuple[int, NDArray, NDArray]]:
        groups: dict[int, list[int]] = {}
        for n, c in enumerate(circuits):
            if not 1 <= len(c) <= self.k:
                raise ValueError(f"circuit {tuple(c)} has length outside [1, {self.k}]")
            groups.setdefault(len(c), []).append(n)
        out = []
        for length, rows in sorted(groups.items()):
            x = np.array([circuits[n] for n in rows], dtype=int).reshape(len(rows), length)
            for t in range(length):
                if x[:, t].min() < 0 or x[:, t].max() >= len(self.slot_block[t]):
                    raise IndexError(f"instrument index out of range at step {t}")
            out.append((length, np.array(rows), x))
        return out

    def predict(self, theta: NDArray, compiled, jacobian: bool = False):
        """Probabilities and optionally their Jacobian with respect to ``theta``."""
        inst = self.instruments(theta)
        rho0, drho0, vs, dvs = self.links(theta)
        n_total = sum(len(rows) for _, rows, _ in compiled)
        p_out = np.empty(n_total)
        jac = np.zeros((n_total, self.n_params)) if jacobian else None
        d2, de2, big = self.d2, self.de2, self.big
        for length, rows, x in compiled:
            n = len(rows)
            s = np.broadcast_to(rho0, (n, big))
            before, after = [], []
            for t in range(length):
                a = inst[t][x[:, t]]
                before.append(s)
                s = np.matmul(a, s.reshape(n, d2, de2)).reshape(n, big)
                if t < length - 1:
                    after.append(s)
                    s = s @ vs[t].T
            p_out[rows] = np.sqrt(self.dim) * s[:, 0]
            if not jacobian:
                continue
            g = np.zeros((n, big))
            g[:, 0] = np.sqrt(self.dim)
            for t in reversed(range(length)):
                grad_a = np.matmul(g.reshape(n, d2, de2), before[t].reshape(n, d2, de2).transpose(0, 2, 1))
                blocks = np.array(self.slot_block[t])[x[:, t]]
                for bi in np.unique(blocks):
                    sel = blocks == bi
                    b = self.blocks[bi]
                    cols = b.offset + np.arange(b.size)
                    vals = self._block_grad(b, grad_a[sel])
                    if self.shared:
                        np.add.at(jac, (rows[sel][:, None], cols[None, :]), vals)
                    else:
                        jac[np.ix_(rows[sel], cols)] += vals
                a = inst[t][x[:, t]]
                g = np.matmul(a.transpose(0, 2, 1), g.reshape(n, d2, de2)).reshape(n, big)
                if self.environment:
                    if t > 0:
                        o = self.alpha_offsets[t]
                        jac[rows, o:o + self.n_alpha] = np.einsum("nb,jba,na->nj", g, dvs[t - 1], after[t - 1],
                                                                  optimize=True)
                        g = g @ vs[t - 1]
                    else:
                        o = self.alpha_offsets[0]
                        jac[rows, o:o + self.n_alpha] = g @ drho0.T
                elif t > 0:
                    g = g @ vs[t - 1]
        return (p_out, jac) if jacobian else p_out

    # -- constraints -------------------------------------------------------

    def _penalty_terms(self, theta: NDArray, jacobian: bool):
        """Signed constraint values (negative means violated) and their gradients."""
        vals, grads = [], []
        for b in self.blocks:
            r = self.block_ptm(theta, b)
            if b.kind in ("gate", "general"):
                choi = np.tensordot(r.ravel(), self._choi, axes=1) / self.d2
                w, v = np.linalg.eigh(choi)
                vals.append(w)
                if jacobian:
                    g = np.real(np.einsum("xi,axy,yi->ia", v.conj(), self._choi, v, optimize=True)) / self.d2
                    grads.append((b, self._block_grad(b, g.reshape(-1, self.d2, self.d2))))
            if b.kind in ("general", "measurement"):
                e = np.sqrt(self.d) * r[0]
                w, v = np.linalg.eigh(effect_from_superbra(e))
                # for gates the trace row is pinned, so only general instruments need TNI
                vals.append(1.0 - w)
                gw = np.real(np.einsum("xi,axy,yi->ia", v.conj(), self._sig, v, optimize=True)) * np.sqrt(self.d)
                if jacobian:
                    full = np.zeros((len(w), self.d2, self.d2))
                    full[:, 0, :] = -gw
                    grads.append((b, self._block_grad(b, full)))
                if b.kind == "measurement":
                    vals.append(w)
                    if jacobian:
                        full = np.zeros((len(w), self.d2, self.d2))
                        full[:, 0, :] = gw
                        grads.append((b, self._block_grad(b, full)))
        return vals, grads

    def penalty(self, theta: NDArray, mu: float, jacobian: bool = False):
        vals, grads = self._penalty_terms(theta, jacobian)
        flat = np.concatenate(vals)
        r = np.sqrt(mu) * np.minimum(flat, 0.0)
        if not jacobian:
            return r
        jac = np.zeros((len(flat), self.n_params))
        row = 0
        for (b, g), v in zip(grads, vals):
            active = v < 0
            idx = row + np.arange(len(v))
            jac[np.ix_(idx[active], b.offset + np.arange(b.size))] = np.sqrt(mu) * g[active]
            row += len(v)
        return r, jac

    def violation(self, theta: NDArray) -> float:
        vals, _ = self._penalty_terms(theta, False)
        return float(max(0.0, -np.concatenate(vals).min())) if vals else 0.0

    def repair(self, theta: NDArray) -> NDArray:
        """Smallest mixing (gates) or spectral clipping (effects) that restores feasibility."""
        theta = theta.copy()
        for b in self.blocks:
            r = self.block_ptm(theta, b)
            if b.kind == "measurement":
                e = project_effect(np.sqrt(self.d) * r[0])
                theta[b.offset:b.offset + b.size] = np.clip(e, -1, 1)
                continue
            if b.kind == "general":
                # clip the Choi spectrum, then rescale: both steps keep the map CP
                w, v = np.linalg.eigh(ptm_to_choi(r))
                r = choi_to_ptm((v * np.clip(w, 0.0, None)) @ v.conj().T)
                f = np.linalg.eigvalsh(effect_from_superbra(np.sqrt(self.d) * r[0])).max()
                if f > 1:
                    r = r / f
            else:
                r = _mix_to_cp(r)
            fixed = r[1:].ravel() if b.kind == "gate" else r.ravel()
            theta[b.offset:b.offset + b.size] = fixed
        lo, hi = self.bounds()
        return np.clip(theta, lo, hi)


# ---------------------------------------------------------------------------
# configuration and results


@dataclass
class MleConfig:
    mode: str = "nisq"
    d: int = 2
    d_env: int = 2
    k: int | None = None
    init: str = "knowledge"
    seed: int = 0
    jitter: float = 0.0
    shared: bool = False
    mu0: float = 1e2
    mu_factor: float = 10.0
    max_rounds: int = 4
    max_inner: int = 500
    rtol: float = 1e-12
    violation_tol: float = 1e-8
    atol: float = 1e-18
    warm_links: bool = True
    tr_solver: str = "exact"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, blob: Mapping | None) -> "MleConfig":
        blob = dict(blob or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(blob) - known
        if unknown:
            raise ValueError(f"unknown MLE config keys: {sorted(unknown)}")
        if "dims" in blob:
            blob["d"], blob["d_env"] = blob.pop("dims")
        return cls(**blob)


@dataclass
class MleResult:
    model: MleModel
    theta: NDArray[np.float64]
    likelihood: float
    sep: float
    violation: float
    converged: bool
    trace: list[dict]
    metadata: dict = field(default_factory=dict)

    @property
    def instruments(self) -> list[NDArray]:
        return self.model.instruments(self.theta)

    def predict(self, circuits: Sequence[Sequence[int]]) -> NDArray[np.float64]:
        return self.model.predict(self.theta, self.model.compile(circuits))

    def link_ptms(self) -> list[NDArray]:
        return self.model.links(self.theta)[2]

    def initial_state(self) -> NDArray:
        return self.model.links(self.theta)[0]

    def certify(self, tol: float = 1e-8) -> dict:
        from .pauli import Instrument, certify

        out = {}
        for t, (labs, mats) in enumerate(zip(self.model.labels, self.instruments)):
            for i, (lab, r) in enumerate(zip(labs, mats)):
                kind = self.model.blocks[self.model.slot_block[t][i]].kind
                out[(t, lab)] = certify(Instrument(lab, kind, r), tol)
        return out

    def to_instrument_set(self, template: FullInstrumentSet | None = None) -> FullInstrumentSet:
        from .pauli import Instrument

        inst = [
            [Instrument(lab, self.model.blocks[self.model.slot_block[t][i]].kind, r)
             for i, (lab, r) in enumerate(zip(labs, mats))]
            for t, (labs, mats) in enumerate(zip(self.model.labels, self.instruments))
        ]
        knowledge = template.knowledge if template is not None else inst
        return FullInstrumentSet(self.model.k, self.model.d, self.model.d_env, inst, knowledge, self.link_ptms(),
                                 self.initial_state(), "nisq" if self.model.mode == "nisq" else "general",
                                 {"source": "mle"})

    def to_json(self) -> dict:
        return {
            "parameters": self.theta.tolist(),
            "instruments": [
                {lab: r.tolist() for lab, r in zip(labs, mats)}
                for labs, mats in zip(self.model.labels, self.instruments)
            ],
            "alphas": [a.tolist() for a in self.model.alphas(self.theta)],
            "likelihood": self.likelihood,
            "sep": self.sep,
            "max_violation": self.violation,
            "converged": self.converged,
            "certify": [
                {"t": t, "label": lab, **rep.as_dict()} for (t, lab), rep in sorted(self.certify().items())
            ],
            "kinds": [list(k) for k in self.model.kinds],
            **({"process_tensor": self.model.process_tensor(self.theta).to_json()}
               if hasattr(self.model, "process_tensor") else {}),
            "iterations": len(self.trace),
            # wall-clock time stays out of serialized output so reruns are byte-identical
            "metadata": {k: v for k, v in self.metadata.items() if k != "runtime_s"},
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        cols = ["round", "evaluation", "mu", "cost", "likelihood", "violation"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.trace:
            w.writerow({c: row[c] for c in cols})
        return buf.getvalue()


# ---------------------------------------------------------------------------
# objective


def likelihood(theta: NDArray, model: MleModel, data: MleData, compiled=None) -> float:
    compiled = model.compile(data.circuits) if compiled is None else compiled
    p = model.predict(theta, compiled)
    return float(np.sum(data.weights * (p - data.p) ** 2))


def likelihood_gradient(theta: NDArray, model: MleModel, data: MleData, compiled=None) -> tuple[float, NDArray]:
    compiled = model.compile(data.circuits) if compiled is None else compiled
    p, jac = model.predict(theta, compiled, jacobian=True)
    res = data.weights * (p - data.p)
    return float(np.sum(res * (p - data.p))), 2.0 * jac.T @ res


def _least_squares_round(model, data, theta, mu, cfg, compiled, trace, rnd, active, max_nfev):
    """One penalty round over the ``active`` parameters; returns (theta, status)."""
    lo, hi = model.bounds()
    sw = np.sqrt(data.weights)
    best = [np.inf]
    best_z = [theta[active].copy()]
    counter = [0]
    full = theta.copy()

    def expand(z):
        th = full.copy()
        th[active] = z
        return th

    def fun(z):
        th = expand(z)
        p = model.predict(th, compiled)
        r_pen = model.penalty(th, mu)
        r = np.concatenate([sw * (p - data.p), r_pen])
        if not np.all(np.isfinite(r)):
            raise NumericalFailure("non-finite residuals")
        cost = float(r @ r)
        counter[0] += 1
        if cost < best[0]:
            # descent points are the iterates the trust-region method accepts
            best[0] = cost
            best_z[0] = z.copy()
            lik = float(np.sum(data.weights * (p - data.p) ** 2))
            viol = float(-min(0.0, r_pen.min() / np.sqrt(mu))) if len(r_pen) else 0.0
            trace.append({"round": rnd, "evaluation": counter[0], "mu": mu, "cost": cost, "likelihood": lik,
                          "violation": viol})
            if lik <= cfg.atol and viol <= cfg.violation_tol:
                raise _TargetReached(th)
        return r

    def jac(z):
        th = expand(z)
        _, jd = model.predict(th, compiled, jacobian=True)
        _, jp = model.penalty(th, mu, jacobian=True)
        out = np.vstack([sw[:, None] * jd, jp])[:, active]
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("non-finite Jacobian")
        return out

    def run(z0, solver, budget):
        return scipy.optimize.least_squares(fun, z0, jac=jac, bounds=(lo[active], hi[active]), method="trf",
                                            ftol=1e-15, xtol=1e-15, gtol=1e-15, max_nfev=budget,
                                            x_scale="jac", tr_solver=solver)

    try:
        sol = run(theta[active], cfg.tr_solver, max_nfev)
    except np.linalg.LinAlgError as exc:
        # LAPACK's divide-and-conquer SVD occasionally fails on finite input; resume iteratively
        log.info("dense trust-region step failed (%s); resuming with lsmr", exc)
        z0 = np.clip(best_z[0], lo[active], hi[active])
        sol = run(z0, "lsmr", max(max_nfev - counter[0], 1))
    return expand(sol.x), sol.status


def penalty_scale(data: MleData) -> float:
    """Median inverse-variance weight; 1 for exact data."""
    return float(np.median(data.weights)) if len(data.weights) else 1.0


def _solve(model, data: MleData, theta0: NDArray, cfg: MleConfig, compiled) -> tuple[NDArray, list[dict], bool]:
    lo, hi = model.bounds()
    theta = np.clip(theta0, lo, hi)
    trace: list[dict] = []
    # penalty in units of the typical data weight, so shot-noise weights do not swamp it
    mu = cfg.mu0 * penalty_scale(data)
    converged = False
    prev = None
    everything = np.ones(model.n_params, dtype=bool)
    try:
        if cfg.warm_links and model.environment and model.n_instrument_params < model.n_params:
            # SE angles first, instruments held at their starting point
            links_only = ~everything.copy()
            links_only[model.n_instrument_params:] = True
            theta, _ = _least_squares_round(model, data, theta, mu, cfg, compiled, trace, -1, links_only,
                                            cfg.max_inner)
        for rnd in range(cfg.max_rounds):
            theta, status = _least_squares_round(model, data, theta, mu, cfg, compiled, trace, rnd, everything,
                                                 cfg.max_inner)
            viol = model.violation(theta)
            lik = likelihood(theta, model, data, compiled)
            change = np.inf if prev is None else abs(prev - lik) / max(abs(prev), 1e-300)
            log.debug("round %d mu=%g likelihood=%.3e violation=%.2e status=%d", rnd, mu, lik, viol, status)
            if viol <= cfg.violation_tol and (status > 0 or change < cfg.rtol):
                converged = True
                break
            prev = lik
            if viol > cfg.violation_tol:
                mu *= cfg.mu_factor
    except _TargetReached as hit:
        theta = hit.theta
        converged = True
    return theta, trace, converged


def _finish(model: MleModel, data: MleData, theta: NDArray, trace, converged, cfg, compiled, extra: dict,
            runtime: float) -> MleResult:
    theta = model.repair(theta)
    p = model.predict(theta, compiled)
    meta = {
        "config": cfg.to_dict(),
        "solver": "scipy least_squares (trf, bounded) with eigenvalue hinge penalties",
        "formula_parameter_count": model.formula_parameter_count,
        "free_parameters": model.n_params,
        "n_circuits": len(data.circuits),
        "penalty_scale": penalty_scale(data),
        "runtime_s": runtime,
        **extra,
    }
    return MleResult(model, theta, float(np.sum(data.weights * (p - data.p) ** 2)), float(np.sum((p - data.p) ** 2)),
                     model.violation(theta), converged, trace, meta)


def _knowledge_stack(knowledge) -> list[NDArray]:
    return [np.stack([getattr(i, "ptm", i) for i in step]) for step in knowledge]


def initialize(
    model: MleModel,
    strategy: str = "knowledge",
    seed: int = 0,
    knowledge=None,
    upstream=None,
    jitter: float = 0.0,
) -> NDArray:
    """Starting point: instruments from the chosen source, SE angles at zero plus optional jitter.

    Args:
        strategy: ``"knowledge"``, ``"list_result"`` (a ``ListResult``) or ``"gst_result"``
            (an :class:`MleResult` of a GST fit).
        jitter: standard deviation of seeded Gaussian noise added to every angle; the
            all-zero point is a saddle for the environment angles.
    """
    from .pauli import project_cptp

    if strategy == "knowledge":
        if knowledge is None:
            raise ValueError("knowledge initialization needs the knowledge instruments")
        inst = _knowledge_stack(knowledge)
    elif strategy == "list_result":
        if upstream is None:
            raise ValueError("list_result initialization needs a LIST result")
        inst = [np.array(s, dtype=float) for s in upstream.reduced.instruments]
    elif strategy == "gst_result":
        if upstream is None:
            raise ValueError("gst_result initialization needs a GST result")
        inst = upstream.instruments
    else:
        raise ValueError(f"unknown initialization strategy {strategy!r}")
    inst = [s.copy() for s in inst]
    for t, row in enumerate(model.slot_block):
        for i, bi in enumerate(row):
            kind = model.blocks[bi].kind
            if kind == "gate":
                inst[t][i] = project_cptp(inst[t][i])
            elif kind == "measurement":
                r = np.zeros_like(inst[t][i])
                r[0] = project_effect(np.sqrt(model.d) * inst[t][i][0]) / np.sqrt(model.d)
                inst[t][i] = r
    rng = np.random.default_rng([int(seed), 7])
    alphas = [jitter * rng.standard_normal(model.n_alpha) for _ in range(model.k)] if model.environment else None
    theta = model.pack(inst, alphas)
    return model.repair(theta)


def _split_labels(labels, kinds):
    return [list(s) for s in labels], [list(s) for s in kinds]


def fit(
    data: MleData,
    labels,
    kinds,
    knowledge,
    config: MleConfig | None = None,
    d_env: int | None = None,
    shared: bool | None = None,
    upstream=None,
    theta0: NDArray | None = None,
) -> MleResult:
    cfg = config or MleConfig()
    model = MleModel(labels, kinds, cfg.d, cfg.d_env if d_env is None else d_env, cfg.mode,
                     cfg.shared if shared is None else shared)
    compiled = model.compile(data.circuits)
    start = time.perf_counter()
    if theta0 is None:
        theta0 = initialize(model, cfg.init, cfg.seed, knowledge, upstream, cfg.jitter if model.environment else 0.0)
    theta, trace, converged = _solve(model, data, theta0, cfg, compiled)
    if not converged:
        log.warning("MLE stopped at the iteration cap without meeting the convergence test")
    return _finish(model, data, theta, trace, converged, cfg, compiled, {}, time.perf_counter() - start)


def fit_mle_ist(data: MleData, iset_or_labels, config: MleConfig | None = None, knowledge=None, upstream=None) -> MleResult:
    """MLE-IST with an environment of dimension ``config.d_env``."""
    labels, kinds, knowledge = _resolve(iset_or_labels, knowledge)
    return fit(data, labels, kinds, knowledge, config, upstream=upstream)


def fit_mle_gst(data: MleData, iset_or_labels, config: MleConfig | None = None, shared: bool = False,
                knowledge=None) -> MleResult:
    """Markovian baseline: no environment; ``shared`` ties same-label instruments across steps."""
    labels, kinds, knowledge = _resolve(iset_or_labels, knowledge)
    cfg = config or MleConfig()
    return fit(data, labels, kinds, knowledge, cfg, d_env=1, shared=shared)


def _resolve(iset_or_labels, knowledge):
    if isinstance(iset_or_labels, FullInstrumentSet):
        iset = iset_or_labels
        return iset.labels, [[i.kind for i in s] for s in iset.instruments], iset.knowledge
    labels, kinds = iset_or_labels
    if knowledge is None:
        from .library import knowledge_instrument

        knowledge = [[knowledge_instrument(lab) for lab in s] for s in labels]
    return labels, kinds, knowledge


def truth_parameters(model: MleModel, iset: FullInstrumentSet, se_unitaries: Sequence[ArrayLike]) -> NDArray:
    """Parameter vector reproducing a simulated scenario; ``se_unitaries`` lists the
    initial-state unitary followed by the ``k - 1`` links."""
    inst = [np.stack([i.ptm for i in step]) for step in iset.instruments]
    alphas = [angles_from_unitary(u, (model.d, model.d_env)) for u in se_unitaries] if model.environment else None
    return model.pack(inst, alphas)


# ---------------------------------------------------------------------------
# reduced instrument set: instruments plus a dense process tensor

REDUCED_MAX_STEPS = 3


def reduced_parameter_count(m: Sequence[int], d: int) -> int:
    """``sum_t m_t d^4 + d^{4k} - (d^{2k} - d^2) / (d + 1)``."""
    k = len(m)
    return sum(m) * d**4 + d ** (4 * k) - (d ** (2 * k) - d**2) // (d + 1)


class ReducedModel:
    """Instruments (full PTMs) and the free entries of a causal process tensor.

    Causality is imposed by elimination: banned entries are fixed at zero and the
    identity component at one.  Positivity of the process tensor's Choi form and
    the CPTNI conditions of the instruments are hinge penalties.
    """

    def __init__(self, labels, kinds, d: int = 2):
        from .process_tensor import banned_mask

        k = len(labels)
        if k > REDUCED_MAX_STEPS:
            raise ValueError(f"the reduced model needs d^{{4k}} process-tensor parameters; k={k} exceeds the "
                             f"supported k <= {REDUCED_MAX_STEPS}, beyond which the problem is intractable")
        self.inner = MleModel(labels, kinds, d=d, d_env=1, mode="full")
        self.labels, self.kinds, self.k, self.d = self.inner.labels, self.inner.kinds, k, d
        self.d_env, self.mode, self.environment = 1, "full", False
        self.blocks, self.slot_block = self.inner.blocks, self.inner.slot_block
        self.side = d ** (2 * k)
        free = ~banned_mask(k, d)
        free[0, 0] = False
        self.free = np.flatnonzero(free.ravel())
        self.n_instrument_params = self.inner.n_params
        self.n_params = self.n_instrument_params + len(self.free)

    @property
    def formula_parameter_count(self) -> int:
        return reduced_parameter_count([len(s) for s in self.labels], self.d)

    def bounds(self):
        return np.full(self.n_params, -1.0), np.full(self.n_params, 1.0)

    def instruments(self, theta):
        return self.inner.instruments(theta[: self.n_instrument_params])

    def alphas(self, theta):
        return []

    def process_tensor(self, theta):
        from .process_tensor import ProcessTensorPTM

        m = np.zeros(self.side * self.side)
        m[0] = 1.0
        m[self.free] = theta[self.n_instrument_params:]
        return ProcessTensorPTM(self.k, self.d, m.reshape(self.side, self.side))

    def pack(self, instruments, upsilon) -> NDArray:
        theta = np.zeros(self.n_params)
        theta[: self.n_instrument_params] = self.inner.pack(instruments)
        theta[self.n_instrument_params:] = np.asarray(upsilon.matrix).ravel()[self.free]
        return theta

    def compile(self, circuits):
        for c in circuits:
            if len(c) != self.k:
                raise ValueError(f"reduced fits need circuits over all {self.k} steps, got {tuple(c)}")
        return self.inner.compile(circuits)

    def predict(self, theta, compiled, jacobian: bool = False):
        inst = self.instruments(theta)
        ups = self.process_tensor(theta)
        pairs = ups.pair_tensor
        dd2 = self.d**4
        (_, rows, x), = compiled
        n = len(rows)
        stacks = [inst[t][x[:, t]].reshape(n, dd2) for t in range(self.k)]
        # kron rows of the instrument tuple, in pair order
        kron = stacks[0]
        for s in stacks[1:]:
            kron = np.einsum("na,nb->nab", kron, s).reshape(n, -1)
        p = np.empty(n)
        p[rows] = kron @ pairs.ravel()
        if not jacobian:
            return p
        jac = np.zeros((n, self.n_params))
        for t in range(self.k):
            others = [stacks[s] for s in range(self.k) if s != t]
            tens = np.moveaxis(pairs, t, -1)
            acc = np.broadcast_to(tens, (n, *tens.shape))
            for o in others:
                acc = np.einsum("na,na...->n...", o, acc)
            blocks = np.array(self.slot_block[t])[x[:, t]]
            for bi in np.unique(blocks):
                sel = blocks == bi
                b = self.blocks[bi]
                jac[np.ix_(rows[sel], b.offset + np.arange(b.size))] += acc[sel]
        # pair order -> matrix order for the process-tensor entries
        dd = self.d**2
        order = [2 * s for s in range(self.k)] + [2 * s + 1 for s in range(self.k)]
        kmat = kron.reshape((n,) + (dd,) * (2 * self.k)).transpose([0] + [1 + o for o in order]).reshape(n, -1)
        jac[rows, self.n_instrument_params:] = kmat[:, self.free]
        return p, jac

    def _choi_terms(self, theta, jacobian: bool):
        from .process_tensor import choi_to_process_tensor, process_tensor_choi

        w, v = np.linalg.eigh(process_tensor_choi(self.process_tensor(theta)))
        if not jacobian:
            return w, None
        grads = np.zeros((len(w), len(self.free)))
        for i in np.flatnonzero(w < 0):
            g = choi_to_process_tensor(np.outer(v[:, i], v[:, i].conj()), self.k, self.d).matrix
            grads[i] = g.ravel()[self.free] / self.side
        return w, grads

    def penalty(self, theta, mu: float, jacobian: bool = False):
        ni = self.n_instrument_params
        w, g = self._choi_terms(theta, jacobian)
        r_ups = np.sqrt(mu) * np.minimum(w, 0.0)
        if not jacobian:
            return np.concatenate([self.inner.penalty(theta[:ni], mu), r_ups])
        r_in, j_in = self.inner.penalty(theta[:ni], mu, True)
        jac = np.zeros((len(r_in) + len(w), self.n_params))
        jac[: len(r_in), :ni] = j_in
        jac[len(r_in):, ni:] = np.sqrt(mu) * g
        return np.concatenate([r_in, r_ups]), jac

    def violation(self, theta) -> float:
        w, _ = self._choi_terms(theta, False)
        return max(self.inner.violation(theta[: self.n_instrument_params]), float(max(0.0, -w.min())))

    def repair(self, theta):
        from .process_tensor import process_tensor_choi

        theta = theta.copy()
        ni = self.n_instrument_params
        theta[:ni] = self.inner.repair(theta[:ni])
        lam = float(np.linalg.eigvalsh(process_tensor_choi(self.process_tensor(theta))).min())
        if lam < 0:
            # mix with the causal process whose Choi form is I / d^{2k}
            floor = 1.0 / self.side
            q = -lam / (floor - lam) * (1 + 1e-9)
            theta[ni:] *= 1 - q
        return np.clip(theta, -1.0, 1.0)


def fit_mle_ist_reduced(data: MleData, iset_or_labels, config: MleConfig | None = None, knowledge=None,
                        init_tensor: str = "ptt") -> MleResult:
    """Reduced MLE-IST over general-mode circuits spanning all ``k <= 3`` steps.

    Args:
        init_tensor: ``"ptt"`` starts the process tensor from linear inversion with the
            knowledge duals (projected to feasibility); ``"mixed"`` starts from the
            causal process with maximally mixed Choi form.
    """
    from .process_tensor import ProcessTensorPTM, causality_check, dual_set, from_probability_tensor

    labels, kinds, knowledge = _resolve(iset_or_labels, knowledge)
    cfg = config or MleConfig(mode="full")
    model = ReducedModel(labels, kinds, cfg.d)
    compiled = model.compile(data.circuits)
    start = time.perf_counter()
    inst = [s.copy() for s in _knowledge_stack(knowledge)]
    ups = ProcessTensorPTM(model.k, model.d, np.zeros((model.side, model.side)))
    if init_tensor == "ptt":
        try:
            duals = [dual_set(s) for s in inst]
            shape = tuple(len(s) for s in inst)
            tensor = np.full(shape, np.nan)
            for c, p in zip(data.circuits, data.p):
                tensor[tuple(c)] = p
            if not np.isnan(tensor).any():
                ups = from_probability_tensor(tensor, duals)
        except ValueError:
            log.info("knowledge instruments are dependent; starting from the mixed process")
    elif init_tensor != "mixed":
        raise ValueError(f"unknown process-tensor initialization {init_tensor!r}")
    theta0 = model.repair(np.clip(model.pack(inst, ups), -1, 1))
    theta, trace, converged = _solve(model, data, theta0, cfg, compiled)
    extra = {"reduced": True, "init_tensor": init_tensor}
    res = _finish(model, data, theta, trace, converged, cfg, compiled, extra, time.perf_counter() - start)
    res.metadata["causality"] = asdict(causality_check(model.process_tensor(res.theta)))
    return res
