"""Positive-sequence backward/forward sweep and path equivalencing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from .ingest import FeederDataset
from .model import BASE_MVA, ConductorSpec, FeederError, SectionRecord, section_impedance, to_pu

EQUIVALENT_CONDUCTOR = "parallel-equivalent"


class SweepError(FeederError):
    def __init__(self, message: str, mismatch: Optional[float] = None):
        self.mismatch = mismatch
        super().__init__(message)


class TopologyError(FeederError):
    pass


def equivalent_impedance(
    path: Sequence[SectionRecord],
    lib: Mapping[str, ConductorSpec] | None = None,
    loaded_term: str = "mean",
) -> complex:
    """Equivalent impedance (ohms) of a radial chain of sections.

    No-load sections add in series; sections carrying a lateral load
    contribute the mean of their impedances (``loaded_term="sum"`` adds them
    instead). With no loaded sections the second term is zero.
    """
    if len(path) == 0:
        raise ValueError("equivalent_impedance needs at least one section")
    no_load = 0j
    loaded = []
    for s in path:
        z = section_impedance(s, lib)
        if s.loaded:
            loaded.append(z)
        else:
            no_load += z
    if not loaded:
        return no_load
    if loaded_term == "mean":
        return no_load + sum(loaded) / len(loaded)
    if loaded_term == "sum":
        return no_load + sum(loaded)
    raise ValueError(f"loaded_term must be 'mean' or 'sum', not {loaded_term!r}")


def parallel_equivalent(paths: Sequence[complex]) -> complex:
    """Arithmetic mean of the equivalent impedances of parallel paths."""
    if len(paths) == 0:
        raise ValueError("parallel_equivalent needs at least one path")
    return complex(sum(complex(z) for z in paths) / len(paths))


@dataclass(frozen=True)
class ParallelCollapse:
    split: int
    merge: int
    path_impedances: tuple[complex, ...]
    equivalent: complex


def collapse_parallel_paths(
    d: FeederDataset,
    lib: Mapping[str, ConductorSpec] | None = None,
    loaded_term: str = "mean",
) -> tuple[FeederDataset, list[ParallelCollapse]]:
    """Replace every parallel-path group with a single equivalent section.

    For a node fed by several sections, each path back to the common upstream
    node is reduced with :func:`equivalent_impedance` and the mean of the
    path equivalents becomes one synthetic ``split -> merge`` section. The
    original last sections into the merge node are dropped, so intermediate
    nodes stay attached as radial stubs.
    """
    sections = list(d.sections)
    collapses = []
    while True:
        incoming: dict[int, list[int]] = {}
        for k, s in enumerate(sections):
            incoming.setdefault(s.to_node, []).append(k)
        merges = [m for m, ks in incoming.items() if len(ks) > 1]
        if not merges:
            break
        depth = _hop_depth(d.n_nodes, d.root, sections)
        m = min(merges, key=lambda v: (depth[v], v))
        ks = incoming[m]

        chains = [_ancestor_chain(sections[k].from_node, incoming, sections, d.root, m) for k in ks]
        common = set(chains[0])
        for c in chains[1:]:
            common &= set(c)
        if not common:
            raise TopologyError(f"parallel paths into node {d.external_ids[m]} share no upstream node")
        split = max(common, key=lambda v: (depth[v], -v))

        path_z = []
        for k, chain in zip(ks, chains):
            path = [sections[k]]
            for v in chain:
                if v == split:
                    break
                path.append(sections[incoming[v][0]])
            path_z.append(equivalent_impedance(path[::-1], lib, loaded_term))
        z_eq = parallel_equivalent(path_z)

        loads = [sections[k].load for k in ks if sections[k].load is not None]
        first = sections[ks[0]]
        virtual = SectionRecord(
            split,
            m,
            EQUIVALENT_CONDUCTOR,
            float(np.mean([sections[k].length for k in ks])),
            first.phases,
            complex(sum(loads)) if loads else None,
            z_ohm=z_eq,
        )
        drop = set(ks)
        sections = [s for k, s in enumerate(sections) if k not in drop] + [virtual]
        collapses.append(ParallelCollapse(split, m, tuple(path_z), z_eq))

    if not collapses:
        return d, []
    return replace(d, sections=tuple(sections)), collapses


def _ancestor_chain(start, incoming, sections, root, merge):
    chain = [start]
    seen = {start, merge}
    v = start
    while v != root:
        ks = incoming.get(v, [])
        if len(ks) != 1:
            if not ks:
                raise TopologyError(f"node {v} has no path back to the feeder head")
            raise TopologyError(f"overlapping parallel paths at node {v}")
        v = sections[ks[0]].from_node
        if v in seen:
            raise TopologyError(f"directed loop through node {v}")
        seen.add(v)
        chain.append(v)
    return chain


def _hop_depth(n, root, sections):
    nbrs = [[] for _ in range(n)]
    for s in sections:
        nbrs[s.from_node].append(s.to_node)
        nbrs[s.to_node].append(s.from_node)
    depth = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    depth[root] = 0
    frontier = [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in nbrs[u]:
                if depth[v] > depth[u] + 1:
                    depth[v] = depth[u] + 1
                    nxt.append(v)
        frontier = nxt
    return depth


@dataclass(frozen=True)
class RadialNetwork:
    """Array view of a radial feeder: node ``i`` is fed from ``parent[i]``
    through ``z[i]`` (pu) and draws ``load[i]`` (pu, constant power)."""

    parent: np.ndarray
    z: np.ndarray
    load: np.ndarray
    root: int
    section_of: np.ndarray  # index of the section feeding each node, -1 at root
    levels: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_arrays(cls, parent, z, load, root=0, section_of=None):
        parent = np.asarray(parent, dtype=int)
        n = parent.size
        depth = np.full(n, -1)
        depth[root] = 0
        children = [[] for _ in range(n)]
        for i, p in enumerate(parent):
            if i != root:
                if p < 0:
                    raise TopologyError(f"node {i} has no parent")
                children[p].append(i)
        frontier = [root]
        levels = []
        while frontier:
            nxt = [c for u in frontier for c in children[u]]
            for c in nxt:
                depth[c] = depth[parent[c]] + 1
            if nxt:
                levels.append(np.array(nxt, dtype=int))
            frontier = nxt
        if (depth < 0).any():
            raise TopologyError(f"nodes not connected to the head: {np.flatnonzero(depth < 0).tolist()}")
        if section_of is None:
            section_of = np.arange(n) - 1
        return cls(
            parent,
            np.asarray(z, dtype=complex),
            np.asarray(load, dtype=complex),
            root,
            np.asarray(section_of, dtype=int),
            tuple(levels),
        )

    @classmethod
    def from_dataset(cls, d: FeederDataset, lib=None) -> "RadialNetwork":
        n = d.n_nodes
        parent = np.full(n, -1)
        z = np.zeros(n, dtype=complex)
        section_of = np.full(n, -1)
        for k, s in enumerate(d.sections):
            if parent[s.to_node] >= 0:
                raise TopologyError(
                    f"node {d.external_ids[s.to_node]} has more than one feeding section; collapse parallel paths first"
                )
            parent[s.to_node] = s.from_node
            z[s.to_node] = to_pu(section_impedance(s, lib))
            section_of[s.to_node] = k
        if parent[d.root] >= 0:
            raise TopologyError("the feeder head is fed by a section")
        return cls.from_arrays(parent, z, d.node_loads(), d.root, section_of)

    @property
    def n_nodes(self) -> int:
        return self.parent.size


def radial_sweep(net: RadialNetwork, head_v: complex, tol: float = 1e-8, max_iter: int = 100):
    """Backward/forward sweep with constant-power loads.

    Returns ``(V, J, iterations, mismatch)`` where ``J[i]`` is the current in
    the section feeding node ``i``.
    """
    if (net.z.real < 0).any():
        bad = int(np.flatnonzero(net.z.real < 0)[0])
        raise SweepError(f"section feeding node {bad} has negative resistance")
    v = np.full(net.n_nodes, complex(head_v))
    mismatch = np.inf
    for it in range(1, max_iter + 1):
        j = np.conj(net.load / v)
        for lvl in reversed(net.levels):
            np.add.at(j, net.parent[lvl], j[lvl])
        v_new = v.copy()
        v_new[net.root] = head_v
        for lvl in net.levels:
            v_new[lvl] = v_new[net.parent[lvl]] - net.z[lvl] * j[lvl]
        mismatch = float(np.max(np.abs(v_new - v)))
        v = v_new
        if not np.isfinite(mismatch):
            break
        if mismatch < tol:
            j = np.conj(net.load / v)
            for lvl in reversed(net.levels):
                np.add.at(j, net.parent[lvl], j[lvl])
            return v, j, it, mismatch
    raise SweepError(f"sweep did not converge in {max_iter} iterations (last mismatch {mismatch:.3e} pu)", mismatch)


@dataclass(frozen=True)
class SweepSolution:
    node_voltage: np.ndarray
    branch_current: np.ndarray  # per node: current in its feeding section, pu
    head_power: complex  # pu on the system base
    iterations: int
    converged: bool
    mismatch: float
    head_voltage: complex
    network: RadialNetwork = field(repr=False)
    dataset: Optional[FeederDataset] = field(default=None, repr=False)

    @property
    def head_power_mva(self) -> complex:
        return self.head_power * BASE_MVA

    @property
    def losses(self) -> complex:
        mask = np.arange(self.network.n_nodes) != self.network.root
        return complex(np.sum(np.abs(self.branch_current[mask]) ** 2 * self.network.z[mask]))

    @property
    def min_voltage(self) -> float:
        return float(np.min(np.abs(self.node_voltage)))

    def section_currents(self) -> dict[int, complex]:
        """Section index (in ``dataset.sections``) -> current, pu."""
        out = {}
        for node, k in enumerate(self.network.section_of):
            if k >= 0:
                out[int(k)] = complex(self.branch_current[node])
        return out

    def to_dict(self) -> dict:
        d = self.dataset
        ids = d.external_ids if d is not None else tuple(str(i) for i in range(self.network.n_nodes))
        nodes = [
            {
                "id": ids[i],
                "v_pu": float(abs(v)),
                "angle_deg": float(np.degrees(np.angle(v))),
            }
            for i, v in enumerate(self.node_voltage)
        ]
        sections = []
        if d is not None:
            for k, i in sorted(self.section_currents().items()):
                s = d.sections[k]
                sections.append({
                    "from": ids[s.from_node],
                    "to": ids[s.to_node],
                    "i_pu": abs(i),
                    "angle_deg": float(np.degrees(np.angle(i))),
                })
        return {
            "head_voltage_pu": abs(self.head_voltage),
            "head_power_mw": self.head_power_mva.real,
            "head_power_mvar": self.head_power_mva.imag,
            "head_power_mva": abs(self.head_power_mva),
            "min_voltage_pu": self.min_voltage,
            "iterations": self.iterations,
            "converged": self.converged,
            "nodes": nodes,
            "sections": sections,
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def sweep_voltage_drops(
    d: FeederDataset,
    g=None,
    head_v: float = 1.02,
    tol: float = 1e-8,
    max_iter: int = 100,
    lib: Mapping[str, ConductorSpec] | None = None,
) -> SweepSolution:
    """Solve the detailed feeder with the head held at ``head_v``.

    Parallel paths are collapsed first when present. ``g`` is accepted for
    symmetry with the other pipeline stages and is not needed by the solve.
    """
    if head_v <= 0:
        raise ValueError("head voltage must be positive")
    radial, _ = collapse_parallel_paths(d, lib)
    net = RadialNetwork.from_dataset(radial, lib)
    v, j, iters, mismatch = radial_sweep(net, complex(head_v), tol, max_iter)
    head_power = complex(head_v) * np.conj(j[net.root])
    return SweepSolution(v, j, complex(head_power), iters, True, mismatch, complex(head_v), net, radial)


def head_reactive_compensation(
    sol: SweepSolution,
    target_v: Optional[float] = None,
    target_pf: float = 1.0,
    source_z: complex = 0j,
    source_v: Optional[float] = None,
) -> complex:
    """Shunt reactive injection at the feeder head, pu (returned as ``jQ``).

    Behind an ideal source (``source_z == 0``) the head voltage is fixed, so
    the bank simply offsets the head reactive demand down to ``target_pf``.
    With a source impedance the injection is the one that holds
    ``|V_head| = target_v`` for a source EMF of ``source_v``.
    """
    p, q = sol.head_power.real, sol.head_power.imag
    if source_z == 0:
        q_keep = p * np.tan(np.arccos(np.clip(target_pf, 0.0, 1.0)))
        return complex(0.0, q - q_keep)
    target_v = abs(sol.head_voltage) if target_v is None else target_v
    source_v = target_v if source_v is None else source_v
    return complex(0.0, compensation_for_source(complex(p, q), target_v, source_v, source_z))


def compensation_for_source(s_load: complex, target_v: float, source_v: float, source_z: complex) -> float:
    """Capacitive Mvar (pu) that keeps ``|V|=target_v`` when ``s_load`` is fed
    from ``source_v`` behind ``source_z``."""

    def head_mag(qc):
        s = s_load - 1j * qc
        v = complex(target_v)
        for _ in range(200):
            v_new = source_v - source_z * np.conj(s / v)
            if abs(v_new - v) < 1e-14:
                break
            v = v_new
        return abs(v) - target_v

    lo, hi = -5.0, 5.0
    return float(brentq(head_mag, lo, hi, xtol=1e-14))
