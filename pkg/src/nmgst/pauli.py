"""Pauli-basis representations of states, effects and channels.

Everything here uses the normalized Pauli basis ``sigma_i = P_i / sqrt(d)`` with
lexicographic tensor ordering (the first qubit is the most significant digit,
index 0 is the identity).  With this convention

* a state is a real superket ``s_i = Tr[sigma_i rho]``,
* an effect is a real superbra ``e_i = Tr[sigma_i E]``, and ``p = e @ s``,
* a channel is a real Pauli transfer matrix ``R_ij = Tr[sigma_i L(sigma_j)]``.

Complex arithmetic (Kraus operators, Choi matrices, eigen-decompositions) lives in
this module only; the estimators work with real PTMs.
"""

from __future__ import annotations

import functools
import itertools
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "PSD_TOL",
    "Instrument",
    "CertificationReport",
    "pauli_matrices",
    "pauli_labels",
    "n_qubits_of",
    "superket",
    "superbra",
    "density_from_superket",
    "effect_from_superbra",
    "ptm_from_kraus",
    "ptm_from_unitary",
    "ptm_to_choi",
    "choi_to_ptm",
    "min_choi_eigenvalue",
    "certify",
    "unitary_from_angles",
    "angles_from_unitary",
    "unitary_ptm_from_angles",
    "tensor",
    "embed_system",
    "depolarizing_ptm",
    "amplitude_damping_kraus",
    "amplitude_damping_ptm",
    "measurement_ptm",
    "project_cptp",
    "project_effect",
    "ptm_to_json",
    "ptm_from_json",
]

PSD_TOL = 1e-8

_SINGLE = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)

KINDS = ("gate", "measurement", "general")


def n_qubits_of(d: int) -> int:
    n = int(round(np.log2(d)))
    if n < 0 or 2**n != d:
        raise ValueError(f"dimension {d} is not a power of two")
    return n


@functools.lru_cache(maxsize=None)
def _paulis(n_qubits: int) -> NDArray[np.complex128]:
    mats = []
    for idx in itertools.product(range(4), repeat=n_qubits):
        m = np.ones((1, 1), dtype=complex)
        for i in idx:
            m = np.kron(m, _SINGLE[i])
        mats.append(m)
    out = np.array(mats)
    out.setflags(write=False)
    return out


def pauli_matrices(d: int) -> NDArray[np.complex128]:
    """Unnormalized Pauli strings ``P_i`` for dimension ``d``, shape ``(d*d, d, d)``."""
    return _paulis(n_qubits_of(d))


def pauli_labels(d: int) -> list[str]:
    return ["".join(s) for s in itertools.product("IXYZ", repeat=n_qubits_of(d))]


def _sigmas(d: int) -> NDArray[np.complex128]:
    return pauli_matrices(d) / np.sqrt(d)


def superket(rho: ArrayLike) -> NDArray[np.float64]:
    rho = np.asarray(rho, dtype=complex)
    d = rho.shape[0]
    return np.real(np.einsum("iab,ba->i", _sigmas(d), rho))


def superbra(effect: ArrayLike) -> NDArray[np.float64]:
    # Same expansion as a superket; kept separate for readability at call sites.
    return superket(effect)


def density_from_superket(s: ArrayLike) -> NDArray[np.complex128]:
    s = np.asarray(s, dtype=float)
    d = int(round(np.sqrt(s.shape[0])))
    return np.einsum("i,iab->ab", s, _sigmas(d))


def effect_from_superbra(e: ArrayLike) -> NDArray[np.complex128]:
    """``E = (1/sqrt(d)) sum_i e_i P_i``."""
    return density_from_superket(e)


def ptm_from_kraus(kraus: Sequence[ArrayLike], dim: int | None = None, tol: float = 1e-10) -> NDArray[np.float64]:
    """PTM of the map ``rho -> sum_k K rho K^dag``.

    Raises:
        ValueError: on inconsistent shapes or when ``sum K^dag K`` exceeds the identity.
    """
    ks = [np.asarray(k, dtype=complex) for k in kraus]
    if not ks:
        raise ValueError("empty Kraus list")
    d = ks[0].shape[0] if dim is None else dim
    for k in ks:
        if k.shape != (d, d):
            raise ValueError(f"Kraus operator of shape {k.shape} does not match dimension {d}")
    n_qubits_of(d)
    total = sum(k.conj().T @ k for k in ks)
    if np.linalg.eigvalsh(total).max() > 1 + tol:
        raise ValueError("Kraus operators are trace increasing")
    sig = _sigmas(d)
    out = np.zeros((d * d, d * d))
    for k in ks:
        # R_ij = Tr[sigma_i K sigma_j K^dag]
        ks_j = np.einsum("ab,jbc,dc->jad", k, sig, k.conj())
        out += np.real(np.einsum("iab,jba->ij", sig, ks_j))
    return out


def ptm_from_unitary(u: ArrayLike) -> NDArray[np.float64]:
    return ptm_from_kraus([u])


def ptm_to_choi(r: ArrayLike) -> NDArray[np.complex128]:
    """Choi state ``(1/d^2) sum_ij R_ij P_j^T (x) P_i``; unit trace for TP maps."""
    r = np.asarray(r, dtype=float)
    d = int(round(np.sqrt(r.shape[0])))
    if r.shape != (d * d, d * d):
        raise ValueError(f"PTM must be square with side d^2, got {r.shape}")
    return _choi_basis(d).T.dot(r.ravel()).reshape(d * d, d * d) / d**2


@functools.lru_cache(maxsize=None)
def _choi_basis(d: int) -> NDArray[np.complex128]:
    # rows: (i, j) flattened; columns: flattened P_j^T (x) P_i
    p = pauli_matrices(d)
    out = np.empty((d**4, d**4), dtype=complex)
    for i in range(d * d):
        for j in range(d * d):
            out[i * d * d + j] = np.kron(p[j].T, p[i]).ravel()
    out.setflags(write=False)
    return out


def choi_to_ptm(choi: ArrayLike) -> NDArray[np.float64]:
    choi = np.asarray(choi, dtype=complex)
    dd = choi.shape[0]
    d = int(round(np.sqrt(dd)))
    # Tr[(P_j^T (x) P_i)^dag C] = R_ij
    coeffs = _choi_basis(d).conj().dot(choi.ravel())
    return np.real(coeffs).reshape(dd, dd)


def min_choi_eigenvalue(r: ArrayLike) -> float:
    return float(np.linalg.eigvalsh(ptm_to_choi(r)).min())


@dataclass(frozen=True)
class Instrument:
    """A labeled PTM with its kind.

    For ``kind == "measurement"`` only the first row is populated and the instrument
    is the trace-decreasing map ``rho -> Tr[E rho] I/d``; its first row is
    ``superbra(E) / sqrt(d)`` so that a terminal trace yields ``Tr[E rho]``.
    """

    label: str
    kind: str
    ptm: NDArray[np.float64]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown instrument kind {self.kind!r}")
        ptm = np.array(self.ptm, dtype=float)
        ptm.setflags(write=False)
        object.__setattr__(self, "ptm", ptm)

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.ptm.shape[0])))

    @property
    def superbra(self) -> NDArray[np.float64]:
        return np.sqrt(self.dim) * self.ptm[0]

    def replace(self, ptm: ArrayLike | None = None, label: str | None = None) -> "Instrument":
        return Instrument(self.label if label is None else label, self.kind, self.ptm if ptm is None else ptm)


def measurement_ptm(effect: ArrayLike) -> NDArray[np.float64]:
    """Row-0-only PTM for the effect ``E`` (given as a ``d x d`` matrix)."""
    e = superbra(effect)
    d = int(round(np.sqrt(e.shape[0])))
    out = np.zeros((d * d, d * d))
    out[0] = e / np.sqrt(d)
    return out


@dataclass(frozen=True)
class CertificationReport:
    cp: bool
    tp: bool
    tni: bool
    min_choi_eig: float
    trace_row_residual: float
    effect_psd: bool = True
    valid: bool = True

    def as_dict(self) -> dict:
        return {
            "cp": self.cp,
            "tp": self.tp,
            "tni": self.tni,
            "min_choi_eig": self.min_choi_eig,
            "trace_row_residual": self.trace_row_residual,
            "effect_psd": self.effect_psd,
            "valid": self.valid,
        }


def certify(instr: Instrument, tol: float = PSD_TOL) -> CertificationReport:
    if tol <= 0:
        raise ValueError("tol must be positive")
    r = instr.ptm
    e0 = np.zeros(r.shape[0])
    e0[0] = 1.0
    min_eig = min_choi_eigenvalue(r)
    residual = float(np.abs(r[0] - e0).max())
    cp = min_eig >= -tol
    tp = residual <= tol
    # trace-non-increasing: the effect Tr[Lambda(.)] has spectrum in [0, 1]
    trace_effect = effect_from_superbra(np.sqrt(instr.dim) * r[0])
    tni = bool(np.linalg.eigvalsh(trace_effect).max() <= 1 + tol and r[0, 0] >= -tol)
    effect_ok = True
    if instr.kind == "measurement":
        ev = np.linalg.eigvalsh(effect_from_superbra(instr.superbra))
        effect_ok = bool(ev.min() >= -tol and ev.max() <= 1 + tol)
        valid = effect_ok
    elif instr.kind == "gate":
        valid = cp and tp
    else:
        valid = cp and tni
    return CertificationReport(bool(cp), bool(tp), bool(tni), min_eig, residual, effect_ok, bool(valid))


def _generators(dims: tuple[int, int]) -> NDArray[np.complex128]:
    d, d_env = dims
    return pauli_matrices(d * d_env)[1:]


def unitary_from_angles(alpha: ArrayLike, dims: tuple[int, int] = (2, 2), check: bool = True) -> NDArray[np.complex128]:
    """``exp(i sum_j alpha_j P_j)`` over the non-identity Pauli strings of the joint space."""
    alpha = np.asarray(alpha, dtype=float)
    d, d_env = dims
    if alpha.shape != ((d * d_env) ** 2 - 1,):
        raise ValueError(f"expected {(d * d_env) ** 2 - 1} angles, got shape {alpha.shape}")
    if check and np.any(np.abs(alpha) > np.pi + 1e-12):
        raise ValueError("angles must lie in [-pi, pi]")
    h = np.tensordot(alpha, _generators(dims), axes=1)
    return scipy.linalg.expm(1j * h)


def angles_from_unitary(u: ArrayLike, dims: tuple[int, int] = (2, 2)) -> NDArray[np.float64]:
    """Angles of a unitary through its principal logarithm, global phase removed."""
    u = np.asarray(u, dtype=complex)
    dd = u.shape[0]
    u = u / np.linalg.det(u) ** (1.0 / dd)
    h = -1j * scipy.linalg.logm(u)
    h = 0.5 * (h + h.conj().T)
    return np.real(np.einsum("jab,ba->j", _generators(dims), h)) / dd


def unitary_ptm_from_angles(alpha: ArrayLike, dims: tuple[int, int] = (2, 2)) -> NDArray[np.float64]:
    return ptm_from_unitary(unitary_from_angles(alpha, dims))


def tensor(a: ArrayLike, b: ArrayLike) -> NDArray[np.float64]:
    return np.kron(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def embed_system(a: ArrayLike, d_env: int) -> NDArray[np.float64]:
    """``A (x) id`` on the environment (the bar operation)."""
    return tensor(a, np.eye(d_env * d_env))


def depolarizing_ptm(lam: float, d: int = 2) -> NDArray[np.float64]:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("depolarizing parameter must lie in [0, 1]")
    diag = np.full(d * d, 1.0 - lam)
    diag[0] = 1.0
    return np.diag(diag)


def amplitude_damping_kraus(gamma: float) -> list[NDArray[np.complex128]]:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("damping parameter must lie in [0, 1]")
    k0 = np.array([[1, 0], [0, np.sqrt(1 - gamma)]], dtype=complex)
    k1 = np.array([[0, np.sqrt(gamma)], [0, 0]], dtype=complex)
    return [k0, k1]


def amplitude_damping_ptm(gamma: float) -> NDArray[np.float64]:
    return ptm_from_kraus(amplitude_damping_kraus(gamma))


def project_cptp(r: ArrayLike, iters: int = 200) -> NDArray[np.float64]:
    """Nearby CPTP PTM.

    Alternating projections between the PSD cone (on the Choi matrix) and the
    trace-preserving affine set, followed by the smallest mixing with the
    completely depolarizing channel that makes the result exactly CP.
    """
    r = np.array(r, dtype=float)
    dd = r.shape[0]
    e0 = np.zeros(dd)
    e0[0] = 1.0
    for _ in range(iters):
        r[0] = e0
        w, v = np.linalg.eigh(ptm_to_choi(r))
        if w.min() >= 0:
            break
        r = choi_to_ptm((v * np.clip(w, 0, None)) @ v.conj().T)
    r[0] = e0
    return _mix_to_cp(r)


def _mix_to_cp(r: NDArray[np.float64]) -> NDArray[np.float64]:
    dd = r.shape[0]
    lam = min_choi_eigenvalue(r)
    if lam >= 0:
        return r
    # Choi of the completely depolarizing channel is I / d^2 (with R00 kept).
    dep = np.zeros_like(r)
    dep[0, 0] = r[0, 0]
    floor = r[0, 0] / dd
    q = -lam / (floor - lam) * (1 + 1e-9)
    return (1 - q) * r + q * dep


def project_effect(e: ArrayLike) -> NDArray[np.float64]:
    """Superbra of the nearest effect with spectrum in ``[0, 1]``."""
    m = effect_from_superbra(e)
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    return superbra((v * np.clip(w, 0.0, 1.0)) @ v.conj().T)


def ptm_to_json(r: ArrayLike) -> dict:
    r = np.asarray(r, dtype=float)
    return {"dim": int(round(np.sqrt(r.shape[0]))), "shape": list(r.shape), "entries": r.ravel().tolist()}


def ptm_from_json(blob: dict) -> NDArray[np.float64]:
    shape = blob.get("shape")
    if shape is None:
        side = blob["dim"] ** 2
        shape = [side, side]
    return np.asarray(blob["entries"], dtype=float).reshape(shape)


def stack(instruments: Iterable[Instrument]) -> NDArray[np.float64]:
    return np.array([i.ptm for i in instruments])
