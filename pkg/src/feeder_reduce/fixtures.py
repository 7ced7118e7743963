"""Seeded synthetic feeders built to prescribed statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ingest import FeederDataset, parse_sections, write_sections
from .model import BASE_MVA, BASE_OHM, BUSBAR, FeederError, SectionRecord, default_library, kva_to_pu
from .powerflow import sweep_voltage_drops

#: Bounds on generated section lengths, miles.
MIN_LENGTH, MAX_LENGTH = 0.02, 0.5
DATA_DIR = Path(__file__).parent / "data"


class FixtureError(FeederError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    """What a synthetic feeder must look like.

    ``stretch_drops_pct`` sets, per pocket, the approximate voltage drop in
    percent across the unloaded trunk stretch that leads to it. Parallel
    paths are added until the section count is met, one extra section per
    parallel pair.
    """

    node_count: int
    section_count: int
    loaded_count: int
    target_head_mva: float
    pocket_fractions: tuple[float, ...]
    seed: int = 42
    name: str = "synthetic"
    stretch_drops_pct: Optional[tuple[float, ...]] = None
    power_factor: float = 0.9
    head_v: float = 1.02

    def __post_init__(self):
        object.__setattr__(self, "pocket_fractions", tuple(float(f) for f in self.pocket_fractions))
        if self.stretch_drops_pct is not None:
            object.__setattr__(self, "stretch_drops_pct", tuple(float(x) for x in self.stretch_drops_pct))
        if self.node_count < 2:
            raise FixtureError("a feeder needs at least two nodes")
        if self.section_count < self.node_count - 1:
            raise FixtureError("section_count must be at least node_count - 1 for a connected feeder")
        if not 0 <= self.loaded_count <= self.section_count:
            raise FixtureError("loaded_count must lie in [0, section_count]")
        fr = np.asarray(self.pocket_fractions)
        if fr.size == 0 or (fr <= 0).any() or abs(fr.sum() - 1.0) > 1e-9:
            raise FixtureError("pocket fractions must be positive and sum to 1")
        if self.loaded_count < fr.size:
            raise FixtureError("every pocket needs at least one loaded section")
        if self.stretch_drops_pct is not None and len(self.stretch_drops_pct) != fr.size:
            raise FixtureError("give one stretch drop per pocket")
        if self.target_head_mva <= 0:
            raise FixtureError("target head power must be positive")
        if not 0 < self.power_factor <= 1:
            raise FixtureError("power factor must lie in (0, 1]")

    @property
    def n_parallel(self) -> int:
        return self.section_count - (self.node_count - 1)


#: Stand-in for a proprietary utility feeder with matching statistics.
FEEDER_A_SYNTH = FixtureSpec(
    node_count=478,
    section_count=485,
    loaded_count=90,
    target_head_mva=3.63,
    pocket_fractions=(0.19, 0.35, 0.46),
    seed=42,
    name="feederA-synth",
    stretch_drops_pct=(1.0, 0.6, 2.2),
)


@dataclass
class _Builder:
    rng: np.random.Generator
    sections: list = field(default_factory=list)
    n: int = 1  # node 0 is the head

    def new_node(self) -> int:
        self.n += 1
        return self.n - 1

    def add(self, a, b, conductor, length, phases="ABC", load=None):
        self.sections.append([a, b, conductor, float(length), phases, load])

    def length(self, lo=MIN_LENGTH, hi=MAX_LENGTH) -> float:
        return round(float(self.rng.uniform(lo, hi)), 6)


_LATERAL_CONDUCTOR = {"A": "Type A", "B": "Type B", "C": "Type A", "ABC": "Type C"}
_PHASES = ("A", "B", "C", "ABC")


def _stretch_lengths(rng, total: float) -> list[float]:
    """Split ``total`` miles of trunk into sections within the length bounds."""
    count = max(1, int(np.ceil(total / 0.4)))
    while True:
        raw = rng.uniform(0.6, 1.4, size=count)
        seg = raw / raw.sum() * total
        if seg.min() >= MIN_LENGTH and seg.max() <= MAX_LENGTH:
            return [round(float(x), 6) for x in seg]
        count += 1 if seg.max() > MAX_LENGTH else -1
        if count < 1:
            return [round(max(total, MIN_LENGTH), 6)]


def generate_fixture(spec: FixtureSpec) -> FeederDataset:
    """Build the synthetic feeder described by ``spec``.

    Layout along the trunk, from the head: a busbar section, then for every
    pocket an unloaded stretch followed by a compact zone whose trunk nodes
    feed short loaded laterals. Unloaded filler laterals and parallel pairs
    hang off the stretches. Loads are finally scaled together until the
    sweep at ``spec.head_v`` draws ``spec.target_head_mva``.
    """
    return _generate(spec)[0]


def _generate(spec: FixtureSpec):
    rng = np.random.default_rng(spec.seed)
    b = _Builder(rng)
    fr = np.asarray(spec.pocket_fractions)
    n_pockets = fr.size
    drops = spec.stretch_drops_pct or tuple([3.5 / n_pockets] * n_pockets)

    # loaded sections per pocket, largest remainder
    raw = fr * spec.loaded_count
    per_pocket = np.maximum(np.floor(raw).astype(int), 1)
    while per_pocket.sum() < spec.loaded_count:
        per_pocket[np.argmax(raw - per_pocket)] += 1
    while per_pocket.sum() > spec.loaded_count:
        per_pocket[np.argmax(per_pocket - raw)] -= 1
    zone_sizes = [max(1, int(np.ceil(c / 2))) for c in per_pocket]

    # nodes: head + busbar node + stretches + zones + loads + 3 per parallel pair + filler
    trunk_d = default_library()["Type D"].z1
    s_total = spec.target_head_mva / BASE_MVA
    phi = np.arccos(spec.power_factor)
    stretch_lengths = []
    downstream = 1.0
    for k in range(n_pockets):
        p, q = downstream * s_total * np.cos(phi), downstream * s_total * np.sin(phi)
        per_mile = (trunk_d.real * p + trunk_d.imag * q) / BASE_OHM / spec.head_v**2
        stretch_lengths.append(_stretch_lengths(rng, drops[k] / 100.0 / per_mile))
        downstream -= fr[k]
    used = 2 + sum(len(s) for s in stretch_lengths) + sum(zone_sizes) + spec.loaded_count + 3 * spec.n_parallel
    n_filler = spec.node_count - used
    if n_filler < 0:
        raise FixtureError(
            f"cannot place {n_pockets} pockets, {spec.loaded_count} loads and {spec.n_parallel} "
            f"parallel pairs within {spec.node_count} nodes"
        )

    bus = b.new_node()
    b.add(0, bus, BUSBAR, 0.0)
    tail = bus
    stretch_nodes: list[int] = []
    pocket_nodes: list[list[int]] = []
    pocket_trunk: list[list[int]] = []
    load_sections: list[tuple[int, int]] = []  # (section index, pocket)
    for k in range(n_pockets):
        for ln in stretch_lengths[k]:
            v = b.new_node()
            b.add(tail, v, "Type D", ln)
            stretch_nodes.append(v)
            tail = v
        zone = []
        for _ in range(zone_sizes[k]):
            v = b.new_node()
            b.add(tail, v, "Type D", b.length(MIN_LENGTH, 0.05))
            zone.append(v)
            tail = v
        pocket_trunk.append(zone)
        members = []
        remaining = int(per_pocket[k])
        i = 0
        while remaining > 0:
            t = zone[i % len(zone)]
            chain = min(remaining, int(rng.integers(1, 3)))
            ph = _PHASES[int(rng.integers(len(_PHASES)))]
            up = t
            for _ in range(chain):
                v = b.new_node()
                b.add(up, v, _LATERAL_CONDUCTOR[ph], b.length(MIN_LENGTH, 0.08), ph, 0j)
                load_sections.append((len(b.sections) - 1, k))
                members.append(v)
                up = v
            remaining -= chain
            i += 1
        pocket_nodes.append(members)

    # unloaded parallel pairs, then filler laterals, on stretch nodes
    hosts = stretch_nodes if stretch_nodes else [bus]
    for _ in range(spec.n_parallel):
        s = hosts[int(rng.integers(len(hosts)))]
        ph = _PHASES[int(rng.integers(len(_PHASES)))]
        cond = _LATERAL_CONDUCTOR[ph]
        a, c, m = b.new_node(), b.new_node(), b.new_node()
        b.add(s, a, cond, b.length(), ph)
        b.add(s, c, cond, b.length(), ph)
        b.add(a, m, cond, b.length(), ph)
        b.add(c, m, cond, b.length(), ph)
    open_ends: list[tuple[int, str]] = []
    for _ in range(n_filler):
        if open_ends and rng.random() < 0.6:
            up, ph = open_ends.pop(int(rng.integers(len(open_ends))))
        else:
            up = hosts[int(rng.integers(len(hosts)))]
            ph = _PHASES[int(rng.integers(len(_PHASES)))]
        v = b.new_node()
        b.add(up, v, _LATERAL_CONDUCTOR[ph], b.length(), ph)
        open_ends.append((v, ph))
    if b.n != spec.node_count or len(b.sections) != spec.section_count:
        raise FixtureError(f"generator produced {b.n} nodes and {len(b.sections)} sections")

    # raw load shapes: within-pocket weights, random power factors near spec
    shapes = np.zeros(len(b.sections), dtype=complex)
    for k in range(n_pockets):
        idx = [si for si, kk in load_sections if kk == k]
        w = rng.uniform(0.5, 1.5, size=len(idx))
        w = w / w.sum() * fr[k]
        pf = np.clip(spec.power_factor + rng.uniform(-0.03, 0.03, size=len(idx)), 0.5, 1.0)
        for si, wk, pfk in zip(idx, w, pf):
            shapes[si] = wk * complex(pfk, np.sqrt(1 - pfk**2))

    scale = s_total
    d = None
    for _ in range(50):
        d = _assemble(spec, b.sections, shapes * scale)
        head = abs(sweep_voltage_drops(d, head_v=spec.head_v).head_power_mva)
        if abs(head - spec.target_head_mva) < 1e-7 * spec.target_head_mva:
            break
        scale *= spec.target_head_mva / head
    manifest = {
        "name": spec.name,
        "spec": asdict(spec),
        "pockets": [
            {
                "index": k + 1,
                "fraction": float(fr[k]),
                "load_nodes": [d.external_ids[v] for v in pocket_nodes[k]],
                "trunk_nodes": [d.external_ids[v] for v in pocket_trunk[k]],
            }
            for k in range(n_pockets)
        ],
    }
    return d, manifest


def _assemble(spec: FixtureSpec, rows, loads) -> FeederDataset:
    sections = []
    for (a, b, cond, length, ph, load), s in zip(rows, loads):
        if load is None:
            sl = None
        else:
            # round through the CSV precision so a written fixture reparses identically
            kw, kvar = round(s.real * 1000 * BASE_MVA, 6), round(s.imag * 1000 * BASE_MVA, 6)
            sl = kva_to_pu(kw, kvar)
        sections.append(SectionRecord(a, b, cond, length, ph, sl))
    return FeederDataset(tuple(sections), spec.node_count, 0, spec.name)


def write_fixture(spec: FixtureSpec, directory) -> tuple[Path, Path]:
    """Generate ``spec`` and write ``<name>.csv`` and ``<name>.manifest.json``."""
    d, manifest = _generate(spec)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    csv_path = directory / f"{spec.name}.csv"
    man_path = directory / f"{spec.name}.manifest.json"
    write_sections(d, csv_path)
    man_path.write_text(json.dumps(manifest, indent=2) + "\n")
    return csv_path, man_path


def fixture_manifest(spec: FixtureSpec = FEEDER_A_SYNTH) -> dict:
    return _generate(spec)[1]


def load_feeder_a() -> FeederDataset:
    """The shipped ``feederA-synth`` dataset."""
    return parse_sections(DATA_DIR / "feederA-synth.csv", name="feederA-synth")
