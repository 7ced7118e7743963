"""Load pockets, three-way segmentation and the reduced three-segment model."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ingest import FeederDataset
from .model import BASE_MVA, BASE_OHM, FeederError
from .powerflow import (
    RadialNetwork,
    SweepSolution,
    equivalent_impedance,
    radial_sweep,
    sweep_voltage_drops,
)
from .topology import FeederGraph, trunk_and_branches

N_SEGMENTS = 3


class ReductionError(FeederError):
    pass


@dataclass(frozen=True)
class Composition:
    """Shares of segment load by device class."""

    sphim: float = 0.5
    three_phase_motor: float = 0.2
    resistive: float = 0.3

    def __post_init__(self):
        shares = (self.sphim, self.three_phase_motor, self.resistive)
        if any(s < 0 or s > 1 for s in shares):
            raise ValueError("composition shares must lie in [0, 1]")
        if abs(sum(shares) - 1.0) > 1e-9:
            raise ValueError(f"composition shares must sum to 1, got {sum(shares)!r}")

    def to_dict(self) -> dict:
        return {"sphim": self.sphim, "three_phase_motor": self.three_phase_motor, "resistive": self.resistive}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Composition":
        return cls(float(d["sphim"]), float(d["three_phase_motor"]), float(d["resistive"]))


@dataclass(frozen=True)
class LoadPocket:
    nodes: frozenset
    total_load: complex
    trunk_anchor: int
    distance: float  # cumulative trunk |Z| from the head to the anchor, pu

    def __post_init__(self):
        if self.total_load.real <= 0:
            raise ValueError("a load pocket must carry positive active power")


@dataclass(frozen=True)
class SegmentSpec:
    index: int
    series_impedance: complex  # pu, from the previous segment's load bus
    load_fraction: float
    composition: Composition = field(default_factory=Composition)
    vdrop_pct: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.load_fraction <= 1.0:
            raise ValueError("load fraction must lie in [0, 1]")


@dataclass(frozen=True)
class ReducedFeederModel:
    """Three lumped load buses in series behind the feeder head.

    ``rated_load`` is the total constant-power demand in pu on the system
    base; segment ``k`` draws ``load_fraction * rated_load``.
    """

    name: str
    head_voltage: float
    segments: tuple[SegmentSpec, ...]
    rated_load: complex
    provenance: str = "manual"

    def __post_init__(self):
        if len(self.segments) != N_SEGMENTS:
            raise ValueError(f"a reduced model needs exactly {N_SEGMENTS} segments")
        if [s.index for s in self.segments] != [1, 2, 3]:
            raise ValueError("segments must be indexed 1, 2, 3 in order")
        total = sum(s.load_fraction for s in self.segments)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"load fractions must sum to 1, got {total!r}")
        if self.provenance not in ("manual", "derivedFromDataset"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @property
    def impedances(self) -> np.ndarray:
        return np.array([s.series_impedance for s in self.segments])

    @property
    def fractions(self) -> np.ndarray:
        return np.array([s.load_fraction for s in self.segments])

    def bus_voltages(self, load: Optional[complex] = None, head_v: Optional[float] = None) -> np.ndarray:
        """Constant-power sweep of the chain; returns head then the three bus voltages."""
        load = self.rated_load if load is None else complex(load)
        head_v = self.head_voltage if head_v is None else head_v
        v, _ = _chain_sweep(self.impedances, self.fractions * load, head_v)
        return v

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "head_voltage_pu": self.head_voltage,
            "rated_mw": self.rated_load.real * BASE_MVA,
            "rated_mvar": self.rated_load.imag * BASE_MVA,
            "provenance": self.provenance,
            "segments": [
                {
                    "z_r_pu": s.series_impedance.real,
                    "z_x_pu": s.series_impedance.imag,
                    "load_fraction": s.load_fraction,
                    "composition": s.composition.to_dict(),
                    "vdrop_pct": s.vdrop_pct,
                }
                for s in self.segments
            ],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: Mapping) -> "ReducedFeederModel":
        segs = tuple(
            SegmentSpec(
                k + 1,
                complex(s["z_r_pu"], s["z_x_pu"]),
                float(s["load_fraction"]),
                Composition.from_dict(s.get("composition", Composition().to_dict())),
                float(s.get("vdrop_pct", 0.0)),
            )
            for k, s in enumerate(d["segments"])
        )
        rated = complex(d.get("rated_mw", 0.0), d.get("rated_mvar", 0.0)) / BASE_MVA
        return cls(d["name"], float(d["head_voltage_pu"]), segs, rated, d.get("provenance", "manual"))

    @classmethod
    def from_json(cls, path) -> "ReducedFeederModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _chain_sweep(z, loads, head_v, tol=1e-12):
    net = RadialNetwork.from_arrays(
        np.array([-1, 0, 1, 2]), np.concatenate([[0j], z]), np.concatenate([[0j], loads]), root=0
    )
    v, j, _, _ = radial_sweep(net, complex(head_v), tol=tol, max_iter=500)
    return v, j


def segment_drops_pct(z: Sequence[complex], fractions: Sequence[float], load: complex) -> np.ndarray:
    """Per-segment voltage drop in percent at unity head voltage."""
    v, _ = _chain_sweep(np.asarray(z, dtype=complex), np.asarray(fractions) * load, 1.0)
    mag = np.abs(v)
    return 100.0 * (mag[:-1] - mag[1:])


# --------------------------------------------------------------------------
# pockets and segmentation


def _ensure_trunk(g: Optional[FeederGraph], d: FeederDataset) -> FeederGraph:
    if g is None:
        g = FeederGraph.from_dataset(d)
    if g.trunk is None:
        g = trunk_and_branches(g, d)
    return g


def trunk_distance(g: FeederGraph, sol: SweepSolution) -> np.ndarray:
    """Cumulative |Z| (pu) from the head along the trunk, per trunk position."""
    z = np.abs(sol.network.z[list(g.trunk)])
    z[0] = 0.0
    return np.cumsum(z)


def identify_load_pockets(
    d: FeederDataset,
    g: Optional[FeederGraph],
    sol: SweepSolution,
    min_pocket_frac: float = 0.02,
    window_frac: float = 0.10,
) -> list[LoadPocket]:
    """Cluster loaded nodes by where they attach to the trunk.

    Loaded nodes are scanned in order of trunk distance of their anchor; a
    pocket keeps absorbing nodes while the anchor stays within
    ``window_frac`` of the total trunk impedance from the pocket's first
    anchor. Pockets lighter than ``min_pocket_frac`` of the total load are
    then folded into the nearest pocket, smallest first.
    """
    g = _ensure_trunk(g, d)
    load = sol.network.load
    weight = np.abs(load)
    total = weight.sum()
    if total <= 0:
        raise ReductionError("feeder carries no load; there are no pockets to find")

    pos = g.trunk_position()
    dist = trunk_distance(g, sol)
    window = window_frac * dist[-1]
    loaded = [v for v in range(g.n_nodes) if weight[v] > 0]
    loaded.sort(key=lambda v: (pos[g.anchor[v]], v))

    groups: list[list[int]] = []
    start = None
    for v in loaded:
        x = dist[pos[g.anchor[v]]]
        if start is None or x - start > window:
            groups.append([])
            start = x
        groups[-1].append(v)

    def centre(nodes):
        w = weight[nodes]
        return float(np.dot(w, dist[[pos[g.anchor[v]] for v in nodes]]) / w.sum())

    while len(groups) > 1:
        share = [weight[grp].sum() / total for grp in groups]
        small = [k for k in range(len(groups)) if share[k] < min_pocket_frac]
        if not small:
            break
        k = min(small, key=lambda i: (share[i], i))
        c = centre(groups[k])
        others = [i for i in range(len(groups)) if i != k]
        target = min(others, key=lambda i: (abs(centre(groups[i]) - c), i))
        groups[target] = sorted(groups[target] + groups[k], key=lambda v: (pos[g.anchor[v]], v))
        del groups[k]

    pockets = []
    for grp in groups:
        c = centre(grp)
        a = int(np.argmin(np.abs(dist - c)))  # first minimum: upstream on ties
        pockets.append(LoadPocket(frozenset(grp), complex(load[grp].sum()), g.trunk[a], float(dist[a])))
    pockets.sort(key=lambda p: (p.distance, p.trunk_anchor))
    return pockets


def partition_mismatch(loads: Sequence[float], i: int, j: int) -> float:
    """Squared deviation of the groups ``[:i]``, ``[i:j]``, ``[j:]`` from equal thirds."""
    loads = np.asarray(loads, dtype=float)
    third = loads.sum() / N_SEGMENTS
    groups = (loads[:i].sum(), loads[i:j].sum(), loads[j:].sum())
    return float(sum((s - third) ** 2 for s in groups))


def best_partition(loads: Sequence[float]) -> tuple[int, int]:
    """Split points ``(i, j)`` of the contiguous 3-way partition with least mismatch.

    Every group holds at least one item; ties go to the lexicographically
    smallest pair.
    """
    n = len(loads)
    if n < N_SEGMENTS:
        raise ReductionError(f"need at least {N_SEGMENTS} load groups to form three segments, got {n}")
    best = None
    for i, j in itertools.combinations(range(1, n), 2):
        cost = partition_mismatch(loads, i, j)
        if best is None or cost < best[0] - 1e-15 * max(1.0, abs(best[0])):
            best = (cost, i, j)
    return best[1], best[2]


def segment_feeder(
    pockets: Sequence[LoadPocket], g: FeederGraph, sol: SweepSolution
) -> list[int]:
    """Two trunk nodes that close segments 1 and 2.

    When fewer than three pockets exist the loads are regrouped by their
    individual trunk anchors. A boundary node belongs to the upstream
    segment and sits at the trunk node nearest the distance midpoint of the
    two groups it separates.
    """
    if g.trunk is None:
        raise ReductionError("trunk not computed; run trunk_and_branches first")
    pos = g.trunk_position()
    dist = trunk_distance(g, sol)

    units = [(pos[p.trunk_anchor], abs(p.total_load), pos[p.trunk_anchor]) for p in pockets]
    if len({u[0] for u in units}) < N_SEGMENTS:
        by_anchor: dict[int, float] = {}
        for p in pockets:
            for v in p.nodes:
                a = pos[g.anchor[v]]
                by_anchor[a] = by_anchor.get(a, 0.0) + abs(sol.network.load[v])
        units = [(a, w, a) for a, w in sorted(by_anchor.items())]
    if len(units) < N_SEGMENTS:
        raise ReductionError(
            f"only {len(units)} distinct loaded trunk anchors; supply the two boundary nodes manually"
        )
    units.sort()
    i, j = best_partition([u[1] for u in units])

    boundaries = []
    for cut in (i, j):
        lo, hi = units[cut - 1][2], units[cut][2]
        mid = 0.5 * (dist[lo] + dist[hi])
        cand = np.arange(lo, max(hi, lo + 1))
        b = int(cand[np.argmin(np.abs(dist[cand] - mid))])
        boundaries.append(g.trunk[b])
    return boundaries


def build_reduced_model(
    d: FeederDataset,
    g: Optional[FeederGraph],
    sol: SweepSolution,
    boundaries: Sequence[int],
    composition: Optional[Composition] = None,
    name: Optional[str] = None,
    loaded_term: str = "mean",
) -> ReducedFeederModel:
    """Lump each segment's load onto one bus and reduce the trunk between buses.

    Segment ``k`` collects every load whose trunk anchor lies after boundary
    ``k-1`` and up to boundary ``k``. Its bus is the last trunk node in the
    segment with load attached (directly or through laterals), and its
    series impedance is the path equivalent of the trunk sections from the
    previous bus, a trunk section counting as loaded when load is attached
    at its downstream end.
    """
    g = _ensure_trunk(g, d)
    composition = Composition() if composition is None else composition
    if len(boundaries) != N_SEGMENTS - 1:
        raise ReductionError("exactly two boundary nodes are required")
    pos = g.trunk_position()
    try:
        cuts = [pos[b] for b in boundaries]
    except KeyError as exc:
        raise ReductionError(f"boundary node {exc.args[0]} is not on the trunk") from None
    if not cuts[0] < cuts[1] < len(g.trunk) - 1:
        raise ReductionError("boundaries must be distinct trunk nodes in root-to-leaf order, before the trunk end")

    load = sol.network.load
    weight = np.abs(load)
    attached = np.zeros(len(g.trunk), dtype=complex)
    for v in range(g.n_nodes):
        if weight[v] > 0:
            attached[pos[g.anchor[v]]] += load[v]
    total = np.abs(attached).sum()
    if total <= 0:
        raise ReductionError("feeder carries no load")

    edges = [-1, cuts[0], cuts[1], len(g.trunk) - 1]
    radial = sol.dataset if sol.dataset is not None else d
    segments = []
    fractions = []
    prev_bus = 0
    z_list = []
    for k in range(N_SEGMENTS):
        span = range(edges[k] + 1, edges[k + 1] + 1)
        seg_load = sum(abs(attached[p]) for p in span)
        loaded_pos = [p for p in span if abs(attached[p]) > 0]
        if not loaded_pos:
            raise ReductionError(f"segment {k + 1} carries no load; choose other boundaries")
        bus = loaded_pos[-1]
        path = []
        for p in range(prev_bus + 1, bus + 1):
            sec = radial.sections[sol.network.section_of[g.trunk[p]]]
            has_load = abs(attached[p]) > 0
            path.append(replace(sec, load=complex(attached[p]) if has_load else None))
        z = equivalent_impedance(path, loaded_term=loaded_term) / BASE_OHM if path else 0j
        z_list.append(z)
        fractions.append(seg_load / total)
        prev_bus = bus

    fractions = np.asarray(fractions)
    fractions = fractions / fractions.sum()
    rated = complex(load.sum())
    drops = segment_drops_pct(z_list, fractions, rated)
    for k in range(N_SEGMENTS):
        segments.append(SegmentSpec(k + 1, complex(z_list[k]), float(fractions[k]), composition, float(drops[k])))
    name = name or f"{d.name}-reduced"
    return ReducedFeederModel(name, float(abs(sol.head_voltage)), tuple(segments), rated, "derivedFromDataset")


# --------------------------------------------------------------------------
# reference baseline

FEEDER_O_FRACTIONS = (0.30, 0.35, 0.35)
FEEDER_O_DROPS_PCT = (0.0, 2.5, 1.3)
FEEDER_O_XR = 0.21 / 0.25  # trunk conductor class ratio
FEEDER_O_RATED_MVA = 3.63
FEEDER_O_PF = 0.9


def builtin_feeder_O(
    rated_mva: float = FEEDER_O_RATED_MVA,
    pf: float = FEEDER_O_PF,
    head_voltage: float = 1.02,
    composition: Optional[Composition] = None,
) -> ReducedFeederModel:
    """Reference baseline three-segment feeder.

    Segment 1 sits at the head. The two series impedances share one X/R
    ratio and are sized so that a unity-head sweep at rated load reproduces
    the reference 2.5 % and 1.3 % drops.
    """
    composition = Composition() if composition is None else composition
    s = rated_mva / BASE_MVA * complex(pf, np.sqrt(1 - pf**2))
    unit = complex(1.0, FEEDER_O_XR) / abs(complex(1.0, FEEDER_O_XR))
    fr = np.array(FEEDER_O_FRACTIONS)
    z = np.zeros(N_SEGMENTS, dtype=complex)
    # the two drops interact through the segment-3 current, so alternate
    # one-dimensional solves until neither impedance moves
    for _ in range(100):
        before = z.copy()
        for k in (1, 2):

            def excess(mag, k=k):
                trial = z.copy()
                trial[k] = mag * unit
                return segment_drops_pct(trial, fr, s)[k] - FEEDER_O_DROPS_PCT[k]

            z[k] = brentq(excess, 0.0, 0.3, xtol=1e-15, rtol=4 * np.finfo(float).eps) * unit
        if np.max(np.abs(z - before)) < 1e-15:
            break
    segs = tuple(
        SegmentSpec(k + 1, complex(z[k]), FEEDER_O_FRACTIONS[k], composition, FEEDER_O_DROPS_PCT[k])
        for k in range(N_SEGMENTS)
    )
    return ReducedFeederModel("feeder-O", head_voltage, segs, s, "manual")


# --------------------------------------------------------------------------
# estimator


class FeederReducer(BaseEstimator):
    """Reduce a detailed feeder to the three-segment model.

    Parameters
    ----------
    head_v : float, default=1.02
        Head voltage for the detailed sweep, pu.
    window_frac : float, default=0.10
        Pocket width as a fraction of total trunk impedance.
    min_pocket_frac : float, default=0.02
        Pockets with a smaller share of load are folded into a neighbour.
    composition : Composition, optional
        Device mix applied to every segment.
    loaded_term : {"mean", "sum"}, default="mean"
        How loaded trunk sections enter the path equivalent.
    boundaries : sequence of two node ids, optional
        Skip automatic segmentation and use these trunk nodes.

    Attributes
    ----------
    model_ : ReducedFeederModel
    pockets_ : list of LoadPocket
    boundaries_ : list of int
    solution_ : SweepSolution
    graph_ : FeederGraph
    """

    def __init__(
        self,
        head_v=1.02,
        window_frac=0.10,
        min_pocket_frac=0.02,
        composition=None,
        loaded_term="mean",
        boundaries=None,
    ):
        self.head_v = head_v
        self.window_frac = window_frac
        self.min_pocket_frac = min_pocket_frac
        self.composition = composition
        self.loaded_term = loaded_term
        self.boundaries = boundaries

    def fit(self, X: FeederDataset, y=None):
        if not isinstance(X, FeederDataset):
            raise TypeError(f"FeederReducer.fit expects a FeederDataset, got {type(X).__name__}")
        sol = sweep_voltage_drops(X, head_v=self.head_v)
        g = trunk_and_branches(FeederGraph.from_dataset(X), X)
        pockets = identify_load_pockets(X, g, sol, self.min_pocket_frac, self.window_frac)
        bounds = list(self.boundaries) if self.boundaries is not None else segment_feeder(pockets, g, sol)
        self.model_ = build_reduced_model(
            X, g, sol, bounds, self.composition, loaded_term=self.loaded_term
        )
        self.pockets_ = pockets
        self.boundaries_ = bounds
        self.solution_ = sol
        self.graph_ = g
        return self

    def transform(self, X=None) -> ReducedFeederModel:
        check_is_fitted(self, "model_")
        return self.model_

    def fit_transform(self, X, y=None) -> ReducedFeederModel:
        return self.fit(X).model_


def reduce_feeder(d: FeederDataset, **params) -> ReducedFeederModel:
    """Shorthand for ``FeederReducer(**params).fit_transform(d)``."""
    return FeederReducer(**params).fit_transform(d)
