"""Graph analytics over a feeder: trunk, lateral classes, layout and drawings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .ingest import FeederDataset, build_adjacency
from .model import FeederError
from .powerflow import collapse_parallel_paths

NODE_CLASSES = ("noLateral", "lateralA", "lateralB", "lateralC", "lateralThreePhase")
PALETTE = {
    "noLateral": "cyan",
    "lateralA": "red",
    "lateralB": "green",
    "lateralC": "yellow",
    "lateralThreePhase": "blue",
}
_CLASS_OF_PHASE = {"A": "lateralA", "B": "lateralB", "C": "lateralC", "ABC": "lateralThreePhase"}


class LayoutError(FeederError):
    pass


@dataclass(frozen=True)
class FeederGraph:
    """Rooted feeder graph.

    ``parent`` describes the radial tree obtained after collapsing parallel
    paths; ``node_class``, ``trunk``, ``branches`` and ``anchor`` are filled in
    by :func:`classify_laterals` and :func:`trunk_and_branches`.
    """

    adjacency: sp.csr_matrix
    root: int
    parent: np.ndarray = field(repr=False)
    node_class: Optional[tuple[str, ...]] = None
    trunk: Optional[tuple[int, ...]] = None
    branches: Optional[dict[int, tuple[int, ...]]] = field(default=None, repr=False)
    anchor: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_dataset(cls, d: FeederDataset, lib=None) -> "FeederGraph":
        radial, _ = collapse_parallel_paths(d, lib)
        parent = np.full(d.n_nodes, -1)
        for s in radial.sections:
            parent[s.to_node] = s.from_node
        return cls(build_adjacency(d), d.root, parent)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for v, p in enumerate(self.parent):
            if p >= 0:
                kids[p].append(v)
        return kids

    def depth_order(self) -> list[int]:
        """Nodes in breadth-first order from the root over the radial tree."""
        kids = self.children()
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(kids[order[i]])
            i += 1
        return order

    def trunk_position(self) -> dict[int, int]:
        if self.trunk is None:
            raise ValueError("trunk not computed; call trunk_and_branches first")
        return {v: i for i, v in enumerate(self.trunk)}


def _node_weights(d: FeederDataset) -> np.ndarray:
    return np.abs(d.node_loads())


def trunk_and_branches(g: FeederGraph, d: FeederDataset) -> FeederGraph:
    """Pick the trunk and record the branches hanging off it.

    The trunk is the root-to-leaf path that maximises the sum, over its
    nodes, of the load downstream of each node. Ties go to the lower node
    index at the first point of divergence.
    """
    kids = g.children()
    order = g.depth_order()
    if len(order) != g.n_nodes:
        raise FeederError("feeder is not connected; trunk undefined")
    w = _node_weights(d)
    sub = w.copy()
    for v in reversed(order):
        if g.parent[v] >= 0:
            sub[g.parent[v]] += sub[v]
    score = sub.copy()
    best_child = np.full(g.n_nodes, -1)
    for v in reversed(order):
        if kids[v]:
            c = max(sorted(kids[v]), key=lambda c: score[c])  # first max = lowest index
            best_child[v] = c
            score[v] = sub[v] + score[c]

    trunk = [g.root]
    while best_child[trunk[-1]] >= 0:
        trunk.append(int(best_child[trunk[-1]]))
    on_trunk = set(trunk)

    anchor = np.full(g.n_nodes, -1)
    branches = {}
    for t in trunk:
        anchor[t] = t
        roots = tuple(sorted(c for c in kids[t] if c not in on_trunk))
        if roots:
            branches[t] = roots
    for v in order:
        if anchor[v] < 0:
            anchor[v] = anchor[g.parent[v]]
    return replace(g, trunk=tuple(trunk), branches=branches, anchor=anchor)


def classify_laterals(g: FeederGraph, d: FeederDataset) -> FeederGraph:
    """Label every node by the phasing of the laterals leaving it.

    Laterals are the outgoing sections other than the trunk continuation.
    One phase-X lateral gives ``lateralX``; a three-phase lateral or laterals
    on different phases give ``lateralThreePhase``.
    """
    if g.trunk is None:
        g = trunk_and_branches(g, d)
    nxt = {a: b for a, b in zip(g.trunk, g.trunk[1:])}
    phases: list[set[str]] = [set() for _ in range(g.n_nodes)]
    for s in d.sections:
        if nxt.get(s.from_node) == s.to_node:
            continue
        phases[s.from_node].add(s.phases)
    labels = []
    for ph in phases:
        if not ph:
            labels.append("noLateral")
        elif len(ph) == 1:
            labels.append(_CLASS_OF_PHASE[next(iter(ph))])
        else:
            labels.append("lateralThreePhase")
    return replace(g, node_class=tuple(labels))


# --------------------------------------------------------------------------
# Kamada-Kawai


@dataclass(frozen=True)
class Layout:
    coords: np.ndarray
    stress: float
    stress_history: np.ndarray = field(repr=False)
    iterations: int = 0
    converged: bool = True


def _as_adjacency(g) -> sp.csr_matrix:
    if isinstance(g, FeederGraph):
        return g.adjacency
    if sp.issparse(g):
        return sp.csr_matrix(g)
    return sp.csr_matrix(np.asarray(g))


def layout_stress(coords: np.ndarray, dist: np.ndarray, edge_len: float, k: float = 1.0) -> float:
    """Sum over node pairs of ``k/d^2 * (|p_i - p_j| - edge_len*d)^2``."""
    n = coords.shape[0]
    if n < 2:
        return 0.0
    iu = np.triu_indices(n, 1)
    diff = coords[:, None, :] - coords[None, :, :]
    e = np.sqrt((diff**2).sum(-1))[iu]
    dd = dist[iu]
    return float(np.sum(k / dd**2 * (e - edge_len * dd) ** 2))


def kamada_kawai_layout(
    g,
    max_iter: int = 20000,
    tol: float = 1e-6,
    k: float = 1.0,
    init="spectral",
    canonical: bool = True,
) -> Layout:
    """Stress-minimising layout via per-node Newton moves.

    Each iteration moves the node with the largest gradient by one Newton
    step (falling back to a scaled gradient step when the local Hessian is
    not positive definite) and halves the step until the stress does not
    increase. The ideal edge length is ``1/diameter`` so the drawing spans
    roughly a unit square.

    Parameters
    ----------
    g : FeederGraph, sparse matrix or array_like
        Connected undirected graph.
    max_iter : int
        Cap on single-node moves.
    tol : float
        Stop once the largest per-node gradient norm is below this.
    k : float
        Spring strength constant.
    init : {"spectral", "circle"} or ndarray of shape (n, 2)
        ``"spectral"`` starts from classical scaling of the hop distances.
        ``"circle"`` places nodes on a circle of radius 0.5 in index order.
    canonical : bool, default=True
        Run the descent on a canonical relabeling of the graph (see
        :func:`canonical_order`) so that "index order" and tie-breaking do
        not depend on how the caller numbered the nodes.
    """
    a = _as_adjacency(g)
    n = a.shape[0]
    if n == 0:
        return Layout(np.zeros((0, 2)), 0.0, np.zeros(1))
    if n == 1:
        return Layout(np.zeros((1, 2)), 0.0, np.zeros(1))
    ncomp, _ = connected_components(a, directed=False)
    if ncomp > 1:
        raise LayoutError(f"graph has {ncomp} components; layout is undefined across components")

    order = canonical_order(a) if canonical else np.arange(n)
    a = a[order][:, order]
    if not isinstance(init, str):
        init = np.asarray(init, dtype=float)[order]

    dist = shortest_path(a, method="D", directed=False, unweighted=True)
    edge_len = 1.0 / dist.max()
    with np.errstate(divide="ignore"):
        kij = np.where(dist > 0, k / dist**2, 0.0)
    lij = edge_len * dist

    lay = _newton_descent(_initial_positions(init, dist), dist, kij, lij, edge_len, k, max_iter, tol)
    coords = np.empty_like(lay.coords)
    coords[order] = lay.coords
    return replace(lay, coords=coords)


def canonical_order(adjacency) -> np.ndarray:
    """Node order that depends only on the graph's structure.

    Colour refinement splits nodes by degree and then by the multiset of
    neighbour colours until stable; while a colour class still holds more
    than one node, its first member is singled out and refinement resumes.
    When every such class is an automorphism orbit (typical for sparse
    graphs) isomorphic inputs map to identical relabeled graphs. Returns
    ``order`` with ``order[i]`` the original id of canonical node ``i``.
    """
    a = sp.csr_matrix(adjacency)
    n = a.shape[0]
    nbrs = [a.indices[a.indptr[i] : a.indptr[i + 1]] for i in range(n)]
    colour = _rank([(len(x),) for x in nbrs])
    while True:
        colour = _refine(colour, nbrs)
        counts = np.bincount(colour)
        if counts.max() == 1:
            break
        # smallest non-singleton class, lowest colour on ties
        c = min((int(counts[c]), c) for c in range(counts.size) if counts[c] > 1)[1]
        pick = int(np.flatnonzero(colour == c)[0])
        colour = _rank([(2 * int(col) + (1 if (col == c and i != pick) else 0),) for i, col in enumerate(colour)])
    order = np.empty(n, dtype=int)
    order[colour] = np.arange(n)
    return order


def _rank(signatures) -> np.ndarray:
    keys = sorted(set(signatures))
    index = {s: i for i, s in enumerate(keys)}
    return np.array([index[s] for s in signatures], dtype=int)


def _refine(colour: np.ndarray, nbrs) -> np.ndarray:
    n_colours = len(set(colour.tolist()))
    while True:
        sig = [(int(colour[i]), tuple(sorted(colour[nbrs[i]].tolist()))) for i in range(colour.size)]
        new = _rank(sig)
        m = int(new.max()) + 1
        if m == n_colours:
            return new
        colour, n_colours = new, m


def _newton_descent(pos, dist, kij, lij, edge_len, k, max_iter, tol) -> Layout:
    n = pos.shape[0]
    pos = pos.copy()

    def pair_terms(m, p_m):
        diff = p_m[None, :] - pos
        r = np.sqrt((diff**2).sum(1))
        r[m] = 1.0
        r = np.maximum(r, 1e-12)
        return diff, r

    def node_energy(m, p_m):
        diff, r = pair_terms(m, p_m)
        e = kij[m] * (r - lij[m]) ** 2
        e[m] = 0.0
        return e.sum()

    grad = _full_gradient(pos, kij, lij)

    stress = layout_stress(pos, dist, edge_len, k)
    history = [stress]
    converged = False
    stalled = 0
    it = 0
    while it < max_iter:
        gnorm = np.sqrt((grad**2).sum(1))
        m = int(np.argmax(gnorm))
        if gnorm[m] < tol:
            converged = True
            break
        diff, r = pair_terms(m, pos[m])
        km, lm = kij[m], lij[m]
        r3 = r**3
        hxx = np.sum(km * (1 - lm * diff[:, 1] ** 2 / r3))
        hyy = np.sum(km * (1 - lm * diff[:, 0] ** 2 / r3))
        hxy = np.sum(km * lm * diff[:, 0] * diff[:, 1] / r3)
        det = hxx * hyy - hxy**2
        gm = grad[m]
        if hxx > 0 and det > 1e-14 * max(hxx * hyy, 1e-300):
            step = -np.array([hyy * gm[0] - hxy * gm[1], -hxy * gm[0] + hxx * gm[1]]) / det
        else:
            step = -gm / max(km.sum(), 1e-12)

        e_old = node_energy(m, pos[m])
        accepted = False
        for _ in range(60):
            cand = pos[m] + step
            e_new = node_energy(m, cand)
            if e_new <= e_old:
                accepted = True
                break
            step = step / 2
        if not accepted or e_new == e_old:
            # no representable descent left for the steepest node
            stalled += 1
            if stalled > 2 * n:
                # stationary to working precision counts as converged
                converged = bool(np.sqrt((grad**2).sum(1)).max() < max(tol, 1e-7))
                break
            grad = _full_gradient(pos, kij, lij)
            if not accepted:
                continue
        else:
            stalled = 0

        old = pos[m].copy()
        pos[m] = cand
        # incremental gradient update for the other nodes
        d_old = old[None, :] - pos
        d_new = cand[None, :] - pos
        r_old = np.maximum(np.sqrt((d_old**2).sum(1)), 1e-12)
        r_new = np.maximum(np.sqrt((d_new**2).sum(1)), 1e-12)
        c_old = km * (1 - lm / r_old)
        c_new = km * (1 - lm / r_new)
        c_old[m] = c_new[m] = 0.0
        grad += (c_old[:, None] * d_old) - (c_new[:, None] * d_new)
        grad[m] = (c_new[:, None] * d_new).sum(0)

        stress += e_new - e_old
        history.append(stress)
        it += 1

    stress = layout_stress(pos, dist, edge_len, k)
    return Layout(pos, stress, np.asarray(history), it, converged)


def _initial_positions(init, dist: np.ndarray) -> np.ndarray:
    n = dist.shape[0]
    if isinstance(init, str) and init == "circle":
        theta = 2 * np.pi * np.arange(n) / n
        return 0.5 * np.column_stack([np.cos(theta), np.sin(theta)])
    if isinstance(init, str) and init == "spectral":
        # Classical scaling of the hop-distance matrix commutes with
        # relabeling, so every labeling starts from the same shape.
        j = np.eye(n) - 1.0 / n
        b = -0.5 * j @ (dist**2) @ j
        w, v = np.linalg.eigh(b)
        pos = v[:, -2:][:, ::-1] * np.sqrt(np.maximum(w[-2:][::-1], 0.0)) / dist.max()
        return _separate_coincident(pos, 0.1 / dist.max())
    pos = np.array(init, dtype=float)
    if pos.shape != (n, 2) or not np.all(np.isfinite(pos)):
        raise ValueError(f"init must be 'circle', 'spectral' or a finite ({n}, 2) array")
    return pos


def _separate_coincident(pos: np.ndarray, radius: float) -> np.ndarray:
    """Spread nodes that share a starting point onto a small circle.

    Twin leaves land on the same point under classical scaling, and the
    direction in which coincident nodes separate would otherwise be set by
    rounding noise. The circle is oriented away from the drawing's centroid
    so that only the order of the twins on it depends on their labels, and
    twins are interchangeable.
    """
    pos = pos.copy()
    scale = max(np.ptp(pos), 1.0)
    key = np.round(pos / (1e-9 * scale)).astype(np.int64)
    groups: dict[tuple, list[int]] = {}
    for i, kk in enumerate(map(tuple, key)):
        groups.setdefault(kk, []).append(i)
    centroid = pos.mean(0)
    for members in groups.values():
        if len(members) < 2:
            continue
        c = pos[members].mean(0)
        off = c - centroid
        phi = np.arctan2(off[1], off[0]) if np.hypot(*off) > 1e-9 * scale else 0.0
        ang = phi + 2 * np.pi * np.arange(len(members)) / len(members)
        pos[members] = c + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return pos


def _full_gradient(pos, kij, lij):
    """Half-scaled stress gradient for every node."""
    diff = pos[:, None, :] - pos[None, :, :]
    r = np.sqrt((diff**2).sum(-1))
    np.fill_diagonal(r, 1.0)
    coef = kij * (1.0 - lij / np.maximum(r, 1e-12))
    np.fill_diagonal(coef, 0.0)
    return (coef[:, :, None] * diff).sum(1)


class KamadaKawaiLayout(BaseEstimator):
    """Estimator wrapper around :func:`kamada_kawai_layout`.

    Parameters
    ----------
    max_iter : int, default=20000
        Maximum number of single-node Newton moves.
    tol : float, default=1e-6
        Stop once the largest per-node gradient norm falls below this.

    Attributes
    ----------
    embedding_ : ndarray of shape (n_nodes, 2)
    stress_ : float
    stress_history_ : ndarray
    n_iter_ : int
    """

    def __init__(self, max_iter: int = 20000, tol: float = 1e-6):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y=None):
        if self.max_iter < 0 or self.tol <= 0:
            raise ValueError("max_iter must be >= 0 and tol > 0")
        layout = kamada_kawai_layout(X, self.max_iter, self.tol)
        self.embedding_ = layout.coords
        self.stress_ = layout.stress
        self.stress_history_ = layout.stress_history
        self.n_iter_ = layout.iterations
        self.converged_ = layout.converged
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).embedding_

    def layout(self) -> Layout:
        check_is_fitted(self, "embedding_")
        return Layout(self.embedding_, self.stress_, self.stress_history_, self.n_iter_, self.converged_)


# --------------------------------------------------------------------------
# drawing export


def _edges(adjacency) -> list[tuple[int, int]]:
    upper = sp.triu(adjacency, k=1).tocoo()
    return sorted(zip(upper.row.tolist(), upper.col.tolist()))


def export_visualization(
    g: FeederGraph,
    layout: Layout,
    fmt: str,
    path,
    boundaries: Sequence[int] = (),
    labels: Optional[Sequence[str]] = None,
) -> Path:
    """Write the feeder drawing as ``dot``, ``json`` or ``svg``.

    Node fill follows the five lateral classes, the head is drawn as a
    rectangle, and each boundary node gets a divider line across the trunk.
    """
    if g.node_class is None:
        raise ValueError("classify_laterals must run before export")
    n = g.n_nodes
    labels = list(labels) if labels is not None else [str(i) for i in range(n)]
    writers = {"dot": _to_dot, "json": _to_json, "svg": _to_svg}
    if fmt not in writers:
        raise ValueError(f"unknown format {fmt!r}; expected one of {sorted(writers)}")
    text = writers[fmt](g, layout, list(boundaries), labels)
    path = Path(path)
    path.write_text(text)
    return path


def _to_dot(g, layout, boundaries, labels) -> str:
    lines = ["graph feeder {", "  node [style=filled, shape=circle, width=0.12, label=\"\"];"]
    for i in range(g.n_nodes):
        x, y = layout.coords[i]
        attrs = [f'pos="{x:.6f},{y:.6f}!"', f"fillcolor={PALETTE[g.node_class[i]]}"]
        if i == g.root:
            attrs.append("shape=rectangle")
        if i in boundaries:
            attrs.append("penwidth=3")
            attrs.append('comment="segment boundary"')
        lines.append(f'  "{labels[i]}" [{", ".join(attrs)}];')
    for a, b in _edges(g.adjacency):
        lines.append(f'  "{labels[a]}" -- "{labels[b]}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _divider_segments(g, coords, boundaries, half_len):
    segs = []
    pos = {v: i for i, v in enumerate(g.trunk or ())}
    for b in boundaries:
        if b in pos and len(g.trunk) > 1:
            i = pos[b]
            a = g.trunk[max(i - 1, 0)]
            c = g.trunk[min(i + 1, len(g.trunk) - 1)]
            t = coords[c] - coords[a]
        else:
            t = np.array([1.0, 0.0])
        norm = np.hypot(*t)
        t = t / norm if norm > 0 else np.array([1.0, 0.0])
        normal = np.array([-t[1], t[0]])
        segs.append((coords[b] - half_len * normal, coords[b] + half_len * normal))
    return segs


def _to_json(g, layout, boundaries, labels) -> str:
    coords = layout.coords
    data = {
        "root": labels[g.root],
        "nodes": [
            {"id": labels[i], "x": float(coords[i, 0]), "y": float(coords[i, 1]), "class": g.node_class[i]}
            for i in range(g.n_nodes)
        ],
        "edges": [[labels[a], labels[b]] for a, b in _edges(g.adjacency)],
        "dividers": [
            {"at": labels[b], "from": p.tolist(), "to": q.tolist()}
            for b, (p, q) in zip(boundaries, _divider_segments(g, coords, boundaries, 0.05))
        ],
        "stress": layout.stress,
    }
    return json.dumps(data, indent=2) + "\n"


def _to_svg(g, layout, boundaries, labels, size: float = 800.0, margin: float = 20.0) -> str:
    coords = layout.coords
    lo = coords.min(0) if len(coords) else np.zeros(2)
    span = float(np.ptp(coords, axis=0).max()) if len(coords) > 1 else 1.0
    span = span or 1.0
    scale = (size - 2 * margin) / span

    def xy(p):
        # SVG y grows downwards
        return margin + (p[0] - lo[0]) * scale, size - margin - (p[1] - lo[1]) * scale

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:g}" height="{size:g}" '
        f'viewBox="0 0 {size:g} {size:g}">',
        '<rect width="100%" height="100%" fill="white"/>',
        '<g stroke="#888" stroke-width="1">',
    ]
    for a, b in _edges(g.adjacency):
        (x1, y1), (x2, y2) = xy(coords[a]), xy(coords[b])
        out.append(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}"/>')
    out.append("</g>")
    out.append('<g stroke="black" stroke-width="0.5">')
    for i in range(g.n_nodes):
        x, y = xy(coords[i])
        color = PALETTE[g.node_class[i]]
        title = f"<title>{escape(labels[i])}</title>"
        if i == g.root:
            out.append(
                f'<rect class="node root" x="{x - 6:.2f}" y="{y - 6:.2f}" width="12" height="12" '
                f'fill="{color}">{title}</rect>'
            )
        else:
            out.append(f'<circle class="node" cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}">{title}</circle>')
    out.append("</g>")
    for p, q in _divider_segments(g, coords, boundaries, 0.04 * span):
        (x1, y1), (x2, y2) = xy(p), xy(q)
        out.append(
            f'<line class="divider" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
            'stroke="black" stroke-width="3"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
