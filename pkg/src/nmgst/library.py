"""Single-qubit instrument library and the SE unitaries used by the benchmark scenarios."""

from __future__ import annotations

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

from .pauli import Instrument, measurement_ptm, pauli_matrices, ptm_from_unitary

_I = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_SX = scipy.linalg.expm(-1j * np.pi / 4 * _X)


def rz(theta: float) -> NDArray[np.complex128]:
    return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


# name -> (prefix unitary, Rz angle or None); the operator is prefix @ Rz(angle)
_TABLE = {
    "A0": (_I, None),
    "A1": (_I, np.pi / 2),
    "A2": (_I, np.pi / 4),
    "A3": (_I, np.pi / 6),
    "A4": (_X, None),
    "A5": (_X, np.pi / 2),
    "A6": (_X, np.pi / 4),
    "A7": (_X, np.pi / 6),
    "A8": (_SX, None),
    "A9": (_SX, np.pi / 2),
    "A10": (_SX, np.pi / 4),
    "A11": (_SX, np.pi / 6),
    "A12": (_H, None),
    "A13": (_H, np.pi / 2),
    "A14": (_H, np.pi / 4),
}

GATE_NAMES = tuple(_TABLE)
MEASUREMENT = "M"

MENUS = {
    "J_oc": tuple(f"A{i}" for i in range(12)),
    "J_ibm": ("A0", "A1", "A2", "A4", "A5", "A6", "A8", "A9", "A10"),
    "J_ic": tuple(f"A{i}" for i in range(8)),
}

# Rz(pi/6) implemented as Rz(pi/5).
REFERENCE_BIAS = {"A3": np.pi / 5, "A7": np.pi / 5, "A11": np.pi / 5}

# Instruments dropped from the overcomplete menus when PTT needs an independent set.
PTT_EXCLUDE = {"J_oc": ("A2", "A6", "A10"), "J_ic": ("A3", "A7")}


def gate_unitary(name: str, rz_angle: float | None = None) -> NDArray[np.complex128]:
    """Unitary of a named library gate, optionally with its Rz angle overridden."""
    try:
        prefix, angle = _TABLE[name]
    except KeyError:
        raise KeyError(f"unknown instrument {name!r}") from None
    if rz_angle is not None:
        if angle is None:
            raise ValueError(f"{name} has no Rz component to bias")
        angle = rz_angle
    return prefix if angle is None else prefix @ rz(angle)


def knowledge_instrument(name: str) -> Instrument:
    if name == MEASUREMENT:
        return Instrument(MEASUREMENT, "measurement", measurement_ptm(np.diag([1.0, 0.0])))
    return Instrument(name, "gate", ptm_from_unitary(gate_unitary(name)))


def resolve_menu(menu) -> tuple[str, ...]:
    if isinstance(menu, str):
        try:
            return MENUS[menu]
        except KeyError:
            raise KeyError(f"unknown menu {menu!r}; expected one of {sorted(MENUS)}") from None
    names = tuple(menu)
    for n in names:
        if n not in _TABLE:
            raise KeyError(f"unknown instrument {n!r}")
    return names


def available_labels(menu, k: int) -> list[list[str]]:
    """Per-step labels: gates plus ``M`` before the last step, ``M`` alone at the last."""
    gates = list(resolve_menu(menu))
    return [gates + [MEASUREMENT] for _ in range(k - 1)] + [[MEASUREMENT]]


def two_pauli_rotation(pauli: str, theta: float) -> NDArray[np.complex128]:
    """``R_{PQ}(theta) = exp(-i theta P(x)Q / 2)`` on system (x) environment."""
    idx = {"I": 0, "X": 1, "Y": 2, "Z": 3}
    p = pauli_matrices(4)[4 * idx[pauli[0]] + idx[pauli[1]]]
    return scipy.linalg.expm(-0.5j * theta * p)


# Rightmost factor acts first.
SE_UNITARY_FACTORS = {
    0: ("ZZ", "YY", "XX"),
    1: ("ZZ", "XY"),
    2: ("IX", "YY", "XX", "XI"),
}
SE_ANGLE = 0.2


def se_unitary(index: int, theta: float = SE_ANGLE) -> NDArray[np.complex128]:
    try:
        factors = SE_UNITARY_FACTORS[index]
    except KeyError:
        raise ValueError(f"SE unitary index must be 0, 1 or 2, got {index}") from None
    u = np.eye(4, dtype=complex)
    for name in factors:
        u = u @ two_pauli_rotation(name, theta)
    return u


def se_unitary_ptm(index: int) -> NDArray[np.float64]:
    return ptm_from_unitary(se_unitary(index))


def _ic_states() -> list[NDArray[np.complex128]]:
    kets = [np.array([1, 0]), np.array([0, 1]), np.array([1, 1]) / np.sqrt(2), np.array([1, 1j]) / np.sqrt(2)]
    return [np.outer(v, v.conj()).astype(complex) for v in kets]


def measure_prepare_instruments() -> list[Instrument]:
    """Sixteen CP trace-non-increasing maps ``rho -> Tr[E_a rho] tau_b``.

    Effects and prepared states both run over the projectors onto ``|0>, |1>, |+>, |+i>``,
    so the family spans the full space of single-qubit PTMs.
    """
    from .pauli import superbra, superket

    out = []
    states = _ic_states()
    for a, eff in enumerate(states):
        for b, st in enumerate(states):
            out.append(Instrument(f"MP{a}{b}", "general", np.outer(superket(st), superbra(eff))))
    return out
