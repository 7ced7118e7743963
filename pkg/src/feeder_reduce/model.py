"""Shared domain types, per-unit conversion and the conductor library."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Optional

#: Line-to-line voltage base of the feeder, kV.
BASE_KV = 12.47
#: Three-phase system power base, MVA.
BASE_MVA = 10.0
#: Impedance base, ohms.
BASE_OHM = BASE_KV**2 / BASE_MVA

PHASE_CODES = ("ABC", "A", "B", "C")
BUSBAR = "Busbar"


class FeederError(Exception):
    """Base class for domain errors raised by this package."""


class ConductorLookupError(FeederError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


def to_pu(z_ohm: complex) -> complex:
    """Convert an impedance in ohms to per-unit on the feeder base."""
    return complex(z_ohm) / BASE_OHM


def to_ohms(z_pu: complex) -> complex:
    return complex(z_pu) * BASE_OHM


def kva_to_pu(kw: float, kvar: float) -> complex:
    return complex(kw, kvar) / (1000.0 * BASE_MVA)


def pu_to_kva(s_pu: complex) -> tuple[float, float]:
    s = complex(s_pu) * 1000.0 * BASE_MVA
    return s.real, s.imag


@dataclass(frozen=True)
class ConductorSpec:
    """Positive-sequence conductor data in ohms per mile."""

    name: str
    r1: float
    x1: float

    def __post_init__(self):
        if self.r1 < 0 or self.x1 < 0:
            raise ValueError(f"conductor {self.name!r}: r1 and x1 must be nonnegative")

    @property
    def z1(self) -> complex:
        return complex(self.r1, self.x1)


# Built-in conductor data, ohms/mile.
_TABLE = (
    ("Type A", 1.91, 0.37),
    ("Type B", 0.63, 0.38),
    ("Type C", 0.25, 0.21),
    ("Type D", 0.23, 0.31),
    (BUSBAR, 0.0, 0.0),
)


def builtin_conductor_library() -> list[ConductorSpec]:
    """Return the five shipped conductor classes."""
    return [ConductorSpec(name, r, x) for name, r, x in _TABLE]


class ConductorLibrary(Mapping[str, ConductorSpec]):
    """Name-indexed, read-only collection of :class:`ConductorSpec`."""

    def __init__(self, specs: Iterable[ConductorSpec]):
        self._specs: dict[str, ConductorSpec] = {}
        for spec in specs:
            if spec.name in self._specs:
                raise ValueError(f"duplicate conductor class {spec.name!r}")
            self._specs[spec.name] = spec

    def __getitem__(self, name: str) -> ConductorSpec:
        try:
            return self._specs[name]
        except KeyError:
            raise ConductorLookupError(f"unknown conductor class {name!r}") from None

    def __iter__(self):
        return iter(self._specs)

    def __len__(self) -> int:
        return len(self._specs)

    def __repr__(self) -> str:
        return f"ConductorLibrary({list(self._specs)})"

    @classmethod
    def default(cls) -> "ConductorLibrary":
        return cls(builtin_conductor_library())

    @classmethod
    def from_json(cls, path) -> "ConductorLibrary":
        """Load a library from a JSON array of
        ``{name, r1_ohm_per_mile, x1_ohm_per_mile}`` objects."""
        rows = json.loads(Path(path).read_text())
        if not isinstance(rows, list):
            raise ValueError(f"{path}: conductor library must be a JSON array")
        return cls(
            ConductorSpec(str(r["name"]), float(r["r1_ohm_per_mile"]), float(r["x1_ohm_per_mile"]))
            for r in rows
        )

    def to_json(self, path) -> None:
        rows = [
            {"name": s.name, "r1_ohm_per_mile": s.r1, "x1_ohm_per_mile": s.x1}
            for s in self._specs.values()
        ]
        Path(path).write_text(json.dumps(rows, indent=2) + "\n")


@dataclass(frozen=True)
class SectionRecord:
    """One feeder section.

    ``from_node``/``to_node`` are dense node indices and give the direction of
    power flow. ``load`` is the lateral load served from this section, in
    per-unit on the system base, attached to ``to_node``. ``z_ohm`` overrides
    the conductor lookup; it is only set on synthetic equivalent sections.
    """

    from_node: int
    to_node: int
    conductor: str
    length: float
    phases: str = "ABC"
    load: Optional[complex] = None
    z_ohm: Optional[complex] = field(default=None, compare=False)

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise ValueError(f"section {self.from_node}->{self.to_node}: from and to nodes must differ")
        if self.from_node < 0 or self.to_node < 0:
            raise ValueError("node ids must be non-negative")
        if self.length < 0:
            raise ValueError(f"section {self.from_node}->{self.to_node}: negative length")
        if self.length == 0 and self.conductor != BUSBAR and self.z_ohm is None:
            raise ValueError(
                f"section {self.from_node}->{self.to_node}: zero length only allowed for {BUSBAR}"
            )
        if self.phases not in PHASE_CODES:
            raise ValueError(f"unknown phase code {self.phases!r}")
        if self.load is not None and complex(self.load).real < 0:
            raise ValueError(f"section {self.from_node}->{self.to_node}: load must have nonnegative P")

    @property
    def loaded(self) -> bool:
        return self.load is not None


@lru_cache(maxsize=None)
def default_library() -> ConductorLibrary:
    return ConductorLibrary.default()


def section_impedance(section: SectionRecord, lib: Mapping[str, ConductorSpec] | None = None) -> complex:
    """Series impedance of ``section`` in ohms."""
    if section.z_ohm is not None:
        return complex(section.z_ohm)
    lib = default_library() if lib is None else lib
    try:
        spec = lib[section.conductor]
    except KeyError:
        raise ConductorLookupError(f"unknown conductor class {section.conductor!r}") from None
    return spec.z1 * section.length
