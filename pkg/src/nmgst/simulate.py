"""Forward simulation of instrument sequences on a system coupled to an environment.

The process starts from an SE superket, applies the chosen instrument on the system
at each step, then the SE unitary of the link to the next step.  The circuit ends
with a trace over system and environment; in NISQ circuits the last instrument is a
measurement, so the trace returns ``Tr[(E (x) I) rho_SE]``.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import library
from .pauli import (
    Instrument,
    amplitude_damping_ptm,
    certify,
    depolarizing_ptm,
    ptm_from_unitary,
    superket,
)

P_SLACK = 1e-9

Circuit = tuple[int, ...]


@dataclass(frozen=True)
class NoiseSpec:
    """Per-step depolarizing and amplitude-damping strengths applied after gates."""

    depolarizing: tuple[float, ...] = ()
    damping: tuple[float, ...] = ()

    def __post_init__(self):
        for v in (*self.depolarizing, *self.damping):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"noise parameter {v} outside [0, 1]")

    @classmethod
    def linear(cls, k: int, slope: float = 0.05) -> "NoiseSpec":
        vals = tuple(min(1.0, slope * (t + 1)) for t in range(k))
        return cls(vals, vals)

    @classmethod
    def none(cls, k: int) -> "NoiseSpec":
        return cls((0.0,) * k, (0.0,) * k)

    def at(self, t: int) -> tuple[float, float]:
        lam = self.depolarizing[t] if t < len(self.depolarizing) else 0.0
        gam = self.damping[t] if t < len(self.damping) else 0.0
        return lam, gam

    def to_dict(self) -> dict:
        return {"depolarizing": list(self.depolarizing), "damping": list(self.damping)}

    @classmethod
    def from_dict(cls, blob: Mapping | None, k: int) -> "NoiseSpec":
        if not blob:
            return cls.none(k)
        if blob.get("schedule") == "linear":
            return cls.linear(k, float(blob.get("slope", 0.05)))
        if blob.get("schedule") == "none":
            return cls.none(k)
        return cls(tuple(blob.get("depolarizing", ())), tuple(blob.get("damping", ())))


def apply_noise(instr: Instrument, spec: NoiseSpec, t: int) -> Instrument:
    """Compose depolarizing and amplitude damping after a gate."""
    if instr.kind != "gate":
        raise ValueError("noise is only applied to gates")
    lam, gam = spec.at(t)
    if lam == 0.0 and gam == 0.0:
        return instr
    ptm = depolarizing_ptm(lam, instr.dim) @ amplitude_damping_ptm(gam) @ instr.ptm
    return instr.replace(ptm=ptm)


@dataclass(frozen=True)
class ExperimentRecord:
    """Outcome statistics of one circuit; ``n_shots is None`` marks an exact probability."""

    circuit: Circuit
    p: float
    n_shots: int | None = None
    n_success: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "circuit", tuple(int(i) for i in self.circuit))
        if self.n_shots is not None:
            if self.n_shots < 1:
                raise ValueError("n_shots must be positive")
            if self.n_success is None or not 0 <= self.n_success <= self.n_shots:
                raise ValueError(f"n_success={self.n_success} outside [0, {self.n_shots}]")

    @classmethod
    def from_counts(cls, circuit: Sequence[int], n_shots: int, n_success: int) -> "ExperimentRecord":
        if not 0 <= n_success <= n_shots:
            raise ValueError(f"n_success={n_success} outside [0, {n_shots}]")
        return cls(tuple(circuit), n_success / n_shots, int(n_shots), int(n_success))

    @property
    def exact(self) -> bool:
        return self.n_shots is None

    @property
    def variance(self) -> float:
        if self.n_shots is None:
            return 0.0
        return self.p * (1.0 - self.p) / self.n_shots


@dataclass
class FullInstrumentSet:
    """Instruments, SE links and initial SE state of a ``k``-step process.

    ``links[t]`` is the SE PTM between steps ``t`` and ``t + 1``.
    """

    k: int
    d: int
    d_env: int
    instruments: list[list[Instrument]]
    knowledge: list[list[Instrument]]
    links: list[NDArray[np.float64]]
    initial: NDArray[np.float64]
    mode: str = "nisq"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.instruments) != self.k or len(self.knowledge) != self.k:
            raise ValueError("need one available set per step")
        if len(self.links) != self.k - 1:
            raise ValueError(f"expected {self.k - 1} SE links, got {len(self.links)}")
        if self.mode not in ("nisq", "general"):
            raise ValueError(f"unknown mode {self.mode!r}")
        big = (self.d * self.d_env) ** 2
        self.initial = np.asarray(self.initial, dtype=float)
        if self.initial.shape != (big,):
            raise ValueError("initial superket has the wrong dimension")

    @property
    def labels(self) -> list[list[str]]:
        return [[i.label for i in step] for step in self.instruments]

    def validate(self, x: Sequence[int]) -> None:
        if not 1 <= len(x) <= self.k:
            raise ValueError(f"circuit length {len(x)} outside [1, {self.k}]")
        for t, i in enumerate(x):
            if not 0 <= i < len(self.instruments[t]):
                raise IndexError(f"instrument index {i} out of range at step {t}")
        if self.mode == "nisq":
            kinds = [self.instruments[t][i].kind for t, i in enumerate(x)]
            if kinds[-1] != "measurement":
                raise ValueError("NISQ circuits must end with a measurement")
            if any(kd != "gate" for kd in kinds[:-1]):
                raise ValueError("NISQ circuits only hold gates before the measurement")
        elif len(x) != self.k:
            raise ValueError("general-mode circuits span all steps")

    def certify(self, tol: float = 1e-8) -> dict:
        return {
            (t, ins.label): certify(ins, tol)
            for t, step in enumerate(self.instruments)
            for ins in step
        }


def _apply_bar(a: NDArray, s: NDArray, d2: int) -> NDArray:
    # (A (x) I) s without forming the Kronecker product
    return (a @ s.reshape(d2, -1)).ravel()


def _trace_row(dim: int) -> NDArray[np.float64]:
    row = np.zeros(dim * dim)
    row[0] = np.sqrt(dim)
    return row


def probability(iset: FullInstrumentSet, x: Sequence[int]) -> float:
    iset.validate(x)
    return float(_probabilities(iset, [tuple(x)])[0])


def probabilities(iset: FullInstrumentSet, circuits: Iterable[Sequence[int]]) -> NDArray[np.float64]:
    circuits = [tuple(c) for c in circuits]
    for c in circuits:
        iset.validate(c)
    return _probabilities(iset, circuits)


def _probabilities(iset: FullInstrumentSet, circuits: list[Circuit]) -> NDArray[np.float64]:
    d2 = iset.d**2
    tr = _trace_row(iset.d * iset.d_env)
    cache: dict[Circuit, NDArray] = {(): iset.initial}

    def state(prefix: Circuit) -> NDArray:
        # SE superket just before step len(prefix)
        if prefix not in cache:
            prev = state(prefix[:-1])
            t = len(prefix) - 1
            a = iset.instruments[t][prefix[-1]].ptm
            cache[prefix] = iset.links[t] @ _apply_bar(a, prev, d2)
        return cache[prefix]

    out = np.empty(len(circuits))
    for n, c in enumerate(circuits):
        s = state(c[:-1])
        last = iset.instruments[len(c) - 1][c[-1]].ptm
        out[n] = tr @ _apply_bar(last, s, d2)
    return out


def enumerate_circuits(labels: Sequence[Sequence[str]] | FullInstrumentSet, kinds=None, mode: str = "nisq") -> list[Circuit]:
    """Every circuit over the available sets, shortest first, lexicographic within a length.

    In NISQ mode a circuit is a run of gates closed by a measurement at any step.
    """
    if isinstance(labels, FullInstrumentSet):
        kinds = [[i.kind for i in step] for step in labels.instruments]
        mode = labels.mode
    if kinds is None:
        kinds = [["measurement" if lab == library.MEASUREMENT else "gate" for lab in step] for step in labels]
    k = len(kinds)
    if mode == "general":
        return [tuple(c) for c in itertools.product(*[range(len(s)) for s in kinds])]
    gates = [[i for i, kd in enumerate(step) if kd == "gate"] for step in kinds]
    meas = [[i for i, kd in enumerate(step) if kd == "measurement"] for step in kinds]
    out = []
    for tau in range(k):
        for prefix in itertools.product(*gates[:tau]):
            for m in meas[tau]:
                out.append((*prefix, m))
    return out


def sample(p: float, n_shots: int, seed: int, index: int = 0, circuit: Sequence[int] = ()) -> ExperimentRecord:
    """Binomial outcome count from the substream ``(seed, index)``."""
    if n_shots < 1:
        raise ValueError("n_shots must be at least 1")
    if p < -P_SLACK or p > 1 + P_SLACK:
        raise ValueError(f"probability {p} is unphysical")
    p = min(1.0, max(0.0, p))
    rng = np.random.default_rng([int(seed), int(index)])
    n = int(rng.binomial(n_shots, p))
    return ExperimentRecord.from_counts(tuple(circuit), n_shots, n)


def exact_records(iset: FullInstrumentSet, circuits: Sequence[Circuit]) -> list[ExperimentRecord]:
    ps = probabilities(iset, circuits)
    return [ExperimentRecord(c, float(p)) for c, p in zip(circuits, ps)]


def sampled_records(iset: FullInstrumentSet, circuits: Sequence[Circuit], n_shots: int, seed: int) -> list[ExperimentRecord]:
    ps = probabilities(iset, circuits)
    return [sample(float(p), n_shots, seed, n, c) for n, (c, p) in enumerate(zip(circuits, ps))]


@dataclass
class ScenarioConfig:
    """Serializable description of a benchmark scenario."""

    label: str
    menu: str | list[str] = "J_ibm"
    bias: Mapping[str, float] | str | None = None
    noise: Mapping | None = None
    d: int = 2
    d_env: int = 2
    slots_per_step: int | None = None

    @property
    def k(self) -> int:
        return len(self.label) - 1

    def bias_map(self) -> dict[str, float]:
        if self.bias is None:
            return {}
        if self.bias == "reference":
            return dict(library.REFERENCE_BIAS)
        return {str(k): float(v) for k, v in dict(self.bias).items()}

    def to_dict(self) -> dict:
        out = {
            "label": self.label,
            "menu": self.menu if isinstance(self.menu, str) else list(self.menu),
            "bias": self.bias if self.bias is None or isinstance(self.bias, str) else dict(self.bias),
            "noise": dict(self.noise) if self.noise else None,
            "dims": [self.d, self.d_env],
            "k": self.k,
        }
        if self.slots_per_step is not None:
            out["slots_per_step"] = self.slots_per_step
        return out

    @classmethod
    def from_dict(cls, blob: Mapping) -> "ScenarioConfig":
        dims = blob.get("dims", [2, 2])
        cfg = cls(
            label=str(blob["label"]),
            menu=blob.get("menu", "J_ibm"),
            bias=blob.get("bias"),
            noise=blob.get("noise"),
            d=int(dims[0]),
            d_env=int(dims[1]),
            slots_per_step=blob.get("slots_per_step"),
        )
        if "k" in blob and int(blob["k"]) != cfg.k:
            raise ValueError(f"label {cfg.label!r} implies k={cfg.k}, config says k={blob['k']}")
        return cfg

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def build(self) -> FullInstrumentSet:
        return build_scenario(self.label, self.menu, self.bias_map(), NoiseSpec.from_dict(self.noise, self.k), self.d_env,
                              metadata={"scenario": self.to_dict(), "scenario_hash": self.digest()})


def build_scenario(
    label: str,
    menu="J_ibm",
    impl_map: Mapping[str, float | ArrayLike] | None = None,
    noise: NoiseSpec | None = None,
    d_env: int = 2,
    metadata: dict | None = None,
) -> FullInstrumentSet:
    """Scenario from a digit label ``u_0 u_1 ... u_k`` selecting SE unitaries.

    ``u_0`` prepares the initial SE state from ``|00>``, ``u_{t+1}`` is the link
    between steps ``t`` and ``t + 1``.  The final digit names the link after the
    last measurement and has no observable effect.  ``impl_map`` overrides the
    implemented gate, either with a new Rz angle or an explicit PTM.
    """
    if len(label) < 2 or any(ch not in "012" for ch in label):
        raise ValueError(f"scenario label {label!r} must be at least two digits from 0, 1, 2")
    if d_env not in (1, 2):
        raise ValueError("built-in scenarios support environment dimension 1 or 2")
    k = len(label) - 1
    noise = noise or NoiseSpec.none(k)
    impl_map = dict(impl_map or {})
    for name in impl_map:
        library.resolve_menu([name])
    step_labels = library.available_labels(menu, k)

    actual, knowledge = [], []
    for t, names in enumerate(step_labels):
        a_step, k_step = [], []
        for name in names:
            kn = library.knowledge_instrument(name)
            if name in impl_map:
                over = impl_map[name]
                if np.ndim(over) == 0:
                    ins = kn.replace(ptm=ptm_from_unitary(library.gate_unitary(name, float(over))))
                else:
                    ins = kn.replace(ptm=np.asarray(over, dtype=float))
            else:
                ins = kn
            if ins.kind == "gate":
                ins = apply_noise(ins, noise, t)
            a_step.append(ins)
            k_step.append(kn)
        actual.append(a_step)
        knowledge.append(k_step)

    if d_env == 1:
        # no environment: identity links and |0> initial state
        links = [np.eye(4) for _ in range(k - 1)]
        initial = superket(np.diag([1.0, 0.0]))
    else:
        zero = np.zeros((4, 4))
        zero[0, 0] = 1.0
        u0 = library.se_unitary(int(label[0]))
        initial = superket(u0 @ zero @ u0.conj().T)
        links = [library.se_unitary_ptm(int(ch)) for ch in label[1:k]]
    return FullInstrumentSet(k, 2, d_env, actual, knowledge, links, initial, "nisq", dict(metadata or {}, label=label))


def build_general_scenario(label: str, d_env: int = 2, instruments: Sequence[Instrument] | None = None) -> FullInstrumentSet:
    """General-mode process: the same instrument family at every step, a final trace.

    Defaults to the informationally complete measure-and-prepare family, so every
    step admits a full dual set.  ``d_env=1`` gives a Markovian process.
    """
    base = build_scenario(label, library.MENUS["J_ic"][:1], None, None, d_env)
    family = list(instruments) if instruments is not None else library.measure_prepare_instruments()
    k = base.k
    return FullInstrumentSet(k, base.d, d_env, [family] * k, [family] * k, base.links, base.initial, "general",
                             dict(base.metadata, mode="general"))
