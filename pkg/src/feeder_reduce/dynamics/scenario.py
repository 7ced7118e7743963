"""Fault scenarios and the sequence-network voltage divider at the source bus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from ..model import FeederError

A_OP = np.exp(2j * np.pi / 3)
PHASES = ("A", "B", "C")
#: Pre-fault source EMF, pu.
SOURCE_V = 1.02


class ScenarioError(FeederError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    """One fault study.

    Impedances are in pu on the 10 MVA system base. ``fault_impedance`` of
    ``None`` means no fault. The source impedances describe the
    sub-transmission system behind the 69 kV bus; the zero- and
    negative-sequence values default to the positive-sequence one.
    """

    name: str = "scenario"
    fault_type: str = "SLG"
    fault_phase: str = "A"
    fault_impedance: Optional[complex] = 0j
    fault_start_ms: float = 100.0
    fault_duration_ms: float = 50.0
    fault_angle_deg: float = 0.0  # point-on-wave metadata; no effect in phasor domain
    source_z: complex = complex(0.02, 0.25)
    source_z0: Optional[complex] = None
    source_z2: Optional[complex] = None
    transformer_z: complex = complex(0.008, 0.08)
    source_v: float = SOURCE_V
    dt_ms: float = 0.5
    t_end_ms: float = 1000.0

    def __post_init__(self):
        for name in ("fault_impedance", "source_z", "source_z0", "source_z2", "transformer_z"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, complex(val))
        if self.fault_type not in ("SLG", "threePhase"):
            raise ScenarioError(f"fault_type must be 'SLG' or 'threePhase', not {self.fault_type!r}")
        if self.fault_phase not in PHASES:
            raise ScenarioError(f"unknown fault phase {self.fault_phase!r}")
        if self.dt_ms <= 0:
            raise ScenarioError("dt must be positive")
        if self.fault_duration_ms < 0 or self.fault_start_ms < 0:
            raise ScenarioError("fault start and duration must be nonnegative")
        if self.fault_start_ms + self.fault_duration_ms >= self.t_end_ms:
            raise ScenarioError("the fault must clear before the end of the run")
        steps = self.t_end_ms / self.dt_ms
        if abs(steps - round(steps)) > 1e-9:
            raise ScenarioError("t_end must be a whole number of time steps")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end_ms / self.dt_ms)) + 1

    @property
    def z1(self) -> complex:
        return self.source_z

    @property
    def z2(self) -> complex:
        return self.source_z if self.source_z2 is None else self.source_z2

    @property
    def z0(self) -> complex:
        return self.source_z if self.source_z0 is None else self.source_z0

    def fault_active(self, t_ms: float) -> bool:
        return self.fault_impedance is not None and (
            self.fault_start_ms <= t_ms < self.fault_start_ms + self.fault_duration_ms
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, val in out.items():
            if isinstance(val, complex):
                out[key] = [val.real, val.imag]
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioSpec":
        kw = dict(d)
        for key in ("fault_impedance", "source_z", "source_z0", "source_z2", "transformer_z"):
            val = kw.get(key)
            if isinstance(val, (list, tuple)):
                kw[key] = complex(val[0], val[1])
        unknown = set(kw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ScenarioError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "ScenarioSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def _rotate(phase: str) -> complex:
    return {"A": 1.0, "B": A_OP**2, "C": A_OP}[phase]


def _sequence_to_phase(v0, v1, v2) -> np.ndarray:
    a = A_OP
    return np.array([v0 + v1 + v2, v0 + a**2 * v1 + a * v2, v0 + a * v1 + a**2 * v2])


def during_fault_head_voltages(scenario: ScenarioSpec) -> np.ndarray:
    """Open-circuit phase voltages (A, B, C) at the feeder head during the fault.

    A single-line-to-ground fault connects the three sequence networks in
    series through ``3 * fault_impedance``. The substation transformer is
    grounded-wye on both sides, so phase voltages pass through unchanged at
    no load.
    """
    e = scenario.source_v
    rot = _rotate(scenario.fault_phase)
    if scenario.fault_impedance is None:
        return e * np.array([1.0, A_OP**2, A_OP])
    zf = scenario.fault_impedance
    if scenario.fault_type == "threePhase":
        total = scenario.z1 + zf
        if total == 0:
            raise ScenarioError("zero total positive-sequence impedance")
        return e * zf / total * np.array([1.0, A_OP**2, A_OP])
    total = scenario.z1 + scenario.z2 + scenario.z0 + 3 * zf
    if total == 0:
        raise ScenarioError("zero total sequence impedance for the SLG fault")
    i_seq = e / total
    v1 = e - scenario.z1 * i_seq
    v2 = -scenario.z2 * i_seq
    v0 = -scenario.z0 * i_seq
    # sequences are referred to the faulted phase; rotate back to A-B-C order
    v_rel = _sequence_to_phase(v0, v1, v2)  # faulted, lagging, leading
    order = {"A": (0, 1, 2), "B": (2, 0, 1), "C": (1, 2, 0)}[scenario.fault_phase]
    return np.array([v_rel[i] for i in order]) * rot


def source_thevenin(scenario: ScenarioSpec, t_ms: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-phase EMF and series impedance seen from the feeder head at ``t_ms``.

    Phases are treated as decoupled, which is exact when the three source
    sequence impedances are equal. During the fault the faulted phase sees
    the source in parallel with the fault path.
    """
    zs = scenario.z1
    if not scenario.fault_active(t_ms):
        emf = scenario.source_v * np.array([1.0, A_OP**2, A_OP])
        return emf, np.full(3, zs + scenario.transformer_z)
    emf = during_fault_head_voltages(scenario)
    z = np.full(3, zs, dtype=complex)
    zf = scenario.fault_impedance
    faulted = range(3) if scenario.fault_type == "threePhase" else [PHASES.index(scenario.fault_phase)]
    for p in faulted:
        z[p] = zs * zf / (zs + zf) if zs + zf != 0 else 0j
    return emf, z + scenario.transformer_z


def positive_sequence(v_abc: np.ndarray) -> complex:
    """Positive-sequence component of a phase-voltage triple."""
    a = A_OP
    return complex((v_abc[0] + a * v_abc[1] + a**2 * v_abc[2]) / 3)


def with_fault_impedance(scenario: ScenarioSpec, zf, name: Optional[str] = None) -> ScenarioSpec:
    return replace(scenario, fault_impedance=zf, name=name or scenario.name)


#: Fault impedances (pu) of the three reference scenarios: a severe fault
#: that trips the contactors, a moderate one that makes them chatter, and a
#: mild one they ride through. Calibrated against the shipped protection
#: defaults and the reference feeders.
REFERENCE_FAULT_IMPEDANCE = {"S1": 0.02, "S2": 0.198, "S3": 0.5}


def reference_scenario(name: str, **overrides) -> ScenarioSpec:
    """One of the phase-A SLG reference scenarios ``S1``, ``S2`` or ``S3``."""
    try:
        zf = REFERENCE_FAULT_IMPEDANCE[name]
    except KeyError:
        raise ScenarioError(f"unknown reference scenario {name!r}; expected S1, S2 or S3") from None
    kw = {"name": name, "fault_type": "SLG", "fault_phase": "A", "fault_impedance": zf}
    kw.update(overrides)
    return ScenarioSpec(**kw)
