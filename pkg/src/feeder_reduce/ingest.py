"""Section-file parsing, node re-indexing, adjacency and topology checks."""

from __future__ import annotations

import csv
import json
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .model import (
    BUSBAR,
    ConductorSpec,
    FeederError,
    SectionRecord,
    default_library,
    kva_to_pu,
    pu_to_kva,
)

CSV_COLUMNS = ("from_id", "to_id", "conductor", "length_miles", "phases", "load_kw", "load_kvar")

_PHASE_ALIASES = {
    "ABC": "ABC",
    "3": "ABC",
    "3P": "ABC",
    "THREEPHASE": "ABC",
    "A": "A",
    "B": "B",
    "C": "C",
}


class ParseError(FeederError):
    """Malformed section file. ``row`` is the 1-based data row (header is row 0)."""

    def __init__(self, message: str, row: Optional[int] = None, path=None):
        self.row = row
        self.path = path
        where = f"{path}: " if path is not None else ""
        where += f"row {row}: " if row is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class FeederDataset:
    """Detailed feeder: sections over dense node ids ``0..n_nodes-1``."""

    sections: tuple[SectionRecord, ...]
    n_nodes: int
    root: int
    name: str = "feeder"
    external_ids: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sections", tuple(self.sections))
        if not self.external_ids:
            object.__setattr__(self, "external_ids", tuple(str(i) for i in range(self.n_nodes)))
        if len(self.external_ids) != self.n_nodes:
            raise ValueError("external_ids must have one entry per node")
        for s in self.sections:
            if s.from_node >= self.n_nodes or s.to_node >= self.n_nodes:
                raise ValueError(f"section {s.from_node}->{s.to_node} references a node >= {self.n_nodes}")
        if not 0 <= self.root < max(self.n_nodes, 1):
            raise ValueError(f"root {self.root} out of range")
        if self.sections and not any(s.from_node == self.root for s in self.sections):
            raise ValueError(f"root {self.root} is not the from-node of any section")

    @property
    def n_sections(self) -> int:
        return len(self.sections)

    @property
    def n_loaded_sections(self) -> int:
        return sum(1 for s in self.sections if s.loaded)

    def node_loads(self) -> np.ndarray:
        """Per-node complex load (pu), summing sections that end at each node."""
        loads = np.zeros(self.n_nodes, dtype=complex)
        for s in self.sections:
            if s.load is not None:
                loads[s.to_node] += s.load
        return loads

    @property
    def total_load(self) -> complex:
        return complex(sum(s.load for s in self.sections if s.load is not None))

    def stats(self) -> dict:
        return {
            "name": self.name,
            "nodes": self.n_nodes,
            "sections": self.n_sections,
            "loaded_sections": self.n_loaded_sections,
            "root": self.external_ids[self.root] if self.n_nodes else None,
        }


def _sort_key_for(ids: Sequence[str]):
    if all(_is_int(i) for i in ids):
        return lambda i: (int(i), i)
    return lambda i: i


def _is_int(text: str) -> bool:
    try:
        int(text)
    except ValueError:
        return False
    return True


def parse_sections(
    path,
    lib: Mapping[str, ConductorSpec] | None = None,
    root: Optional[str] = None,
    name: Optional[str] = None,
) -> FeederDataset:
    """Parse a section CSV into a :class:`FeederDataset`.

    External node ids are arbitrary strings. They are re-indexed densely in
    sorted order (numeric when every id is an integer), so the result does not
    depend on the row order of the file. The root is ``root`` if given,
    otherwise the only node that never appears as a to-node.
    """
    path = Path(path)
    lib = default_library() if lib is None else lib
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise ParseError(f"cannot read section file: {exc.strerror}", path=path) from exc

    raw = []
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError("missing header row", path=path)
        header = [h.strip() for h in reader.fieldnames]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ParseError(f"missing column(s): {', '.join(missing)}", row=0, path=path)
        reader.fieldnames = header
        seen = set()
        for rowno, row in enumerate(reader, start=1):
            raw.append(_parse_row(row, rowno, lib, seen, path))

    ids = sorted({r[0] for r in raw} | {r[1] for r in raw}, key=_sort_key_for(
        [r[0] for r in raw] + [r[1] for r in raw]))
    index = {ext: i for i, ext in enumerate(ids)}

    sections = []
    for rowno, (f, t, cond, length, phases, load) in enumerate(raw, start=1):
        try:
            sections.append(SectionRecord(index[f], index[t], cond, length, phases, load))
        except ValueError as exc:
            raise ParseError(str(exc), row=rowno, path=path) from exc

    if root is not None:
        if str(root) not in index:
            raise ParseError(f"root node {root!r} does not appear in the file", path=path)
        root_idx = index[str(root)]
    else:
        to_nodes = {s.to_node for s in sections}
        candidates = sorted({s.from_node for s in sections} - to_nodes)
        if len(candidates) != 1:
            found = ", ".join(ids[c] for c in candidates) or "none"
            raise ParseError(f"cannot infer feeder head (candidates: {found}); pass an explicit root", path=path)
        root_idx = candidates[0]

    try:
        return FeederDataset(tuple(sections), len(ids), root_idx, name or path.stem, tuple(ids))
    except ValueError as exc:
        raise ParseError(str(exc), path=path) from exc


def _parse_row(row: dict, rowno: int, lib, seen: set, path):
    def cell(key):
        value = row.get(key)
        return "" if value is None else value.strip()

    f, t, cond = cell("from_id"), cell("to_id"), cell("conductor")
    if not f or not t:
        raise ParseError("empty from_id/to_id", row=rowno, path=path)
    if f == t:
        raise ParseError(f"section from {f!r} to itself", row=rowno, path=path)
    if cond not in lib:
        raise ParseError(f"unknown conductor class {cond!r}", row=rowno, path=path)
    try:
        length = float(cell("length_miles"))
    except ValueError:
        raise ParseError(f"non-numeric length {cell('length_miles')!r}", row=rowno, path=path) from None
    if not np.isfinite(length) or length < 0:
        raise ParseError(f"invalid length {length}", row=rowno, path=path)
    if length == 0 and cond != BUSBAR:
        raise ParseError(f"zero length only allowed for {BUSBAR}", row=rowno, path=path)
    phases = _PHASE_ALIASES.get(cell("phases").upper().replace("-", "").replace("_", ""))
    if phases is None:
        raise ParseError(f"unknown phase code {cell('phases')!r}", row=rowno, path=path)

    kw, kvar = cell("load_kw"), cell("load_kvar")
    load = None
    if kw or kvar:
        try:
            load = kva_to_pu(float(kw or 0.0), float(kvar or 0.0))
        except ValueError:
            raise ParseError(f"non-numeric load {kw!r}/{kvar!r}", row=rowno, path=path) from None
        if load.real < 0:
            raise ParseError("negative real load", row=rowno, path=path)

    key = (f, t, cond)
    if key in seen:
        raise ParseError(f"duplicate section {f}->{t} ({cond})", row=rowno, path=path)
    seen.add(key)
    return f, t, cond, length, phases, load


def write_sections(d: FeederDataset, path) -> None:
    """Write ``d`` as a section CSV using its external node ids."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in d.sections:
            if s.load is None:
                kw = kvar = ""
            else:
                p, q = pu_to_kva(s.load)
                kw, kvar = f"{p:.6f}", f"{q:.6f}"
            w.writerow([
                d.external_ids[s.from_node],
                d.external_ids[s.to_node],
                s.conductor,
                f"{s.length:.6f}",
                s.phases,
                kw,
                kvar,
            ])


def build_adjacency(d: FeederDataset) -> sp.csr_matrix:
    """Binary symmetric N x N matrix with a one wherever a section joins two nodes.

    Parallel sections between the same pair collapse to a single entry.
    """
    n = d.n_nodes
    if not d.sections:
        return sp.csr_matrix((n, n), dtype=np.int8)
    a = np.array([s.from_node for s in d.sections])
    b = np.array([s.to_node for s in d.sections])
    rows = np.concatenate([a, b])
    cols = np.concatenate([b, a])
    m = sp.coo_matrix((np.ones(rows.size, dtype=np.int8), (rows, cols)), shape=(n, n)).tocsr()
    m.data[:] = 1  # duplicates were summed
    return m


def undirected_pairs(adjacency: sp.spmatrix) -> int:
    return int(sp.triu(adjacency, k=1).nnz)


@dataclass
class ValidationReport:
    unreachable: list[int] = field(default_factory=list)
    cycles: list[list[int]] = field(default_factory=list)
    parallel_merges: list[int] = field(default_factory=list)
    orphan_loads: list[int] = field(default_factory=list)

    @property
    def accepted(self) -> bool:
        return not self.unreachable

    def to_dict(self, d: Optional[FeederDataset] = None) -> dict:
        out = asdict(self)
        if d is not None:
            ext = d.external_ids
            out = {
                "unreachable": [ext[i] for i in self.unreachable],
                "cycles": [[ext[i] for i in c] for c in self.cycles],
                "parallel_merges": [ext[i] for i in self.parallel_merges],
                "orphan_loads": [ext[i] for i in self.orphan_loads],
            }
        out["accepted"] = self.accepted
        return out

    def to_json(self, d: Optional[FeederDataset] = None) -> str:
        return json.dumps(self.to_dict(d), indent=2)


def validate_topology(d: FeederDataset) -> ValidationReport:
    """Reachability, cycle and load-attachment checks.

    Parallel paths are reported (each node with more than one incoming
    section, plus the undirected cycle through it) but do not reject the
    dataset; only nodes unreachable from the root do.
    """
    n = d.n_nodes
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for s in d.sections:
        nbrs[s.from_node].append(s.to_node)
        nbrs[s.to_node].append(s.from_node)

    seen = np.zeros(n, dtype=bool)
    if n:
        seen[d.root] = True
        queue = deque([d.root])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if not seen[v]:
                    seen[v] = True
                    queue.append(v)

    report = ValidationReport()
    report.unreachable = [int(i) for i in np.flatnonzero(~seen)]
    report.cycles = _undirected_cycles(d, nbrs)

    indeg = np.zeros(n, dtype=int)
    for s in d.sections:
        indeg[s.to_node] += 1
    report.parallel_merges = [int(i) for i in np.flatnonzero(indeg > 1)]

    loaded = {s.to_node for s in d.sections if s.loaded}
    report.orphan_loads = sorted(i for i in loaded if not seen[i])
    return report


def _undirected_cycles(d: FeederDataset, nbrs) -> list[list[int]]:
    """One fundamental cycle per non-tree edge of a DFS forest (lowest index first)."""
    n = d.n_nodes
    parent = np.full(n, -1)
    depth = np.full(n, -1)
    cycles = []
    pairs_seen = set()
    order = [d.root] + [i for i in range(n) if i != d.root] if n else []
    for start in order:
        if depth[start] >= 0:
            continue
        depth[start] = 0
        stack = [(start, iter(sorted(set(nbrs[start]))))]
        while stack:
            u, it = stack[-1]
            advanced = False
            for v in it:
                if v == parent[u]:
                    continue
                key = (min(u, v), max(u, v))
                if depth[v] < 0:
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    pairs_seen.add(key)
                    stack.append((v, iter(sorted(set(nbrs[v])))))
                    advanced = True
                    break
                if key not in pairs_seen and depth[v] < depth[u]:
                    pairs_seen.add(key)
                    cyc = [u]
                    w = u
                    while w != v:
                        w = int(parent[w])
                        cyc.append(w)
                    cycles.append(cyc[::-1])
            if not advanced:
                stack.pop()
    return cycles
