"""Morse-Smale decomposition of a field over a discretized domain.

Nodes of a :class:`DomainMesh` are labelled by the pair (mode, minimum)
reached by steepest ascent and steepest descent walks along mesh edges. Walk
sinks are refined with continuous flows and merged, so nearby grid sinks of
one critical point collapse to a single id. Descents that step into the
low-density region end at the reserved ``DIVERGED`` pseudo-minimum.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from . import __version__
from .flow import (
    CriticalPoint,
    CriticalSet,
    FlowConfig,
    FlowStatus,
    _cluster,
    ascend_many,
    descend_many,
    support_of,
)

__all__ = [
    "DIVERGED",
    "DomainMesh",
    "ComplexDecomposition",
    "CellStats",
    "EmptyDecompositionError",
    "lattice_mesh",
    "knn_mesh",
    "build_mesh",
    "decompose",
    "cell_stats",
    "boundary_nodes",
    "hausdorff",
    "default_resolution",
]

DIVERGED = -1
MAX_LATTICE_DIM = 4


class EmptyDecompositionError(RuntimeError):
    pass


@dataclass(eq=False)
class DomainMesh:
    """Discretized domain.

    ``edges`` are the adjacencies used for boundaries and shared-boundary
    sizes (axis neighbours on a lattice, kNN pairs otherwise);
    ``walk_edges`` are the neighbourhoods searched by steepest walks.
    """

    kind: str
    nodes: np.ndarray
    edges: np.ndarray
    walk_edges: np.ndarray
    node_spacing: float
    box: np.ndarray
    shape: tuple | None = None
    spacing: np.ndarray | None = None
    k: int | None = None
    edge_axis: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def size(self) -> int:
        return self.nodes.shape[0]

    def node_volume(self) -> float:
        if self.kind == "lattice":
            return float(np.prod(self.spacing))
        return float(np.prod(self.box[1] - self.box[0])) / self.size

    def neighbors(self, i: int) -> np.ndarray:
        e = self.edges
        return np.sort(np.concatenate([e[e[:, 0] == i, 1], e[e[:, 1] == i, 0]]))


def default_resolution(d: int) -> int:
    return {1: 64, 2: 64, 3: 32, 4: 16}.get(d, 16)


def lattice_mesh(box, resolution) -> DomainMesh:
    """Full grid over ``box`` (shape ``(2, d)``) with ``resolution`` points per axis."""
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box.reshape(2, 1)
    d = box.shape[1]
    if d > MAX_LATTICE_DIM:
        raise ValueError(
            f"lattice meshes are limited to d <= {MAX_LATTICE_DIM} (got d={d}); use the knn backend"
        )
    res = np.broadcast_to(np.asarray(resolution, dtype=int), (d,)).copy()
    if np.any(res < 2):
        raise ValueError("lattice resolution must be at least 2 per axis")
    if np.any(box[1] <= box[0]):
        raise ValueError("box upper corner must exceed the lower corner")
    axes = [np.linspace(box[0, j], box[1, j], res[j]) for j in range(d)]
    grids = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    spacing = (box[1] - box[0]) / (res - 1)
    shape = tuple(int(r) for r in res)
    index = np.arange(nodes.shape[0]).reshape(shape)

    def pairs(offset):
        src = [slice(max(0, -o), r - max(0, o)) for o, r in zip(offset, shape)]
        dst = [slice(max(0, o), r - max(0, -o)) for o, r in zip(offset, shape)]
        return np.stack([index[tuple(src)].ravel(), index[tuple(dst)].ravel()], axis=1)

    axis_edges, axis_ids = [], []
    for j in range(d):
        off = [0] * d
        off[j] = 1
        p = pairs(off)
        axis_edges.append(p)
        axis_ids.append(np.full(len(p), j))
    walk = []
    for off in itertools.product((-1, 0, 1), repeat=d):
        # one representative per undirected neighbour pair
        nz = [o for o in off if o != 0]
        if not nz or nz[0] < 0:
            continue
        walk.append(pairs(off))
    return DomainMesh(
        kind="lattice",
        nodes=nodes,
        edges=np.concatenate(axis_edges),
        walk_edges=np.concatenate(walk),
        node_spacing=float(spacing.max()),
        box=box,
        shape=shape,
        spacing=spacing,
        edge_axis=np.concatenate(axis_ids),
    )


def knn_mesh(points, k: int | None = None, n_fill: int = 0, seed: int = 0, box=None) -> DomainMesh:
    """Symmetrized k-nearest-neighbour graph over ``points`` plus optional uniform fill-ins."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = pts.shape[1]
    k = max(d + 2, 8) if k is None else int(k)
    if k < d + 1:
        raise ValueError(f"k must be at least d + 1 = {d + 1}")
    if box is None:
        box = np.vstack([pts.min(0), pts.max(0)])
    box = np.asarray(box, dtype=float)
    if n_fill:
        from ._rng import rng_for

        rng = rng_for(seed, 0x6B6E6E)
        pts = np.vstack([pts, rng.uniform(box[0], box[1], size=(n_fill, d))])
    if len(pts) < k + 1:
        raise ValueError(f"knn mesh needs at least k + 1 = {k + 1} nodes, got {len(pts)}")
    dist, idx = cKDTree(pts).query(pts, k + 1)
    src = np.repeat(np.arange(len(pts)), k)
    dst = idx[:, 1:].ravel()
    e = np.sort(np.stack([src, dst], axis=1), axis=1)
    e = np.unique(e[e[:, 0] != e[:, 1]], axis=0)
    return DomainMesh(
        kind="knn_graph",
        nodes=pts,
        edges=e,
        walk_edges=e,
        node_spacing=float(np.median(dist[:, 1:])),
        box=box,
        k=k,
    )


def build_mesh(points=None, kind: str = "lattice", resolution=None, k=None, box=None,
               pad=None, n_fill: int = 0, seed: int = 0) -> DomainMesh:
    """Dispatch to :func:`lattice_mesh` or :func:`knn_mesh`.

    For a lattice either ``box`` or ``points`` (with per-coordinate ``pad``)
    defines the extent.
    """
    if kind == "lattice":
        if box is None:
            pts = np.atleast_2d(np.asarray(points, dtype=float))
            pad = 0.0 if pad is None else pad
            pad = np.broadcast_to(np.asarray(pad, dtype=float), (pts.shape[1],))
            box = np.vstack([pts.min(0) - pad, pts.max(0) + pad])
        box = np.asarray(box, dtype=float)
        d = box.shape[1] if box.ndim == 2 else 1
        return lattice_mesh(box, default_resolution(d) if resolution is None else resolution)
    if kind in ("knn", "knn_graph"):
        return knn_mesh(points, k=k, n_fill=n_fill, seed=seed, box=box)
    raise ValueError(f"unknown mesh kind {kind!r}")


@dataclass(eq=False)
class ComplexDecomposition:
    mesh: DomainMesh
    values: np.ndarray
    support: np.ndarray
    active: np.ndarray
    mode_label: np.ndarray
    min_label: np.ndarray
    cells: list[tuple[int, int]]
    cell_label: np.ndarray
    critical: CriticalSet
    floor: float
    config: FlowConfig

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def has_diverged(self) -> bool:
        return any(mn == DIVERGED for _, mn in self.cells)

    def cell_members(self, cell_id: int) -> np.ndarray:
        return np.flatnonzero(self.cell_label == cell_id)

    def cell_of_mode(self) -> np.ndarray:
        return np.array([m for m, _ in self.cells], dtype=int)

    def locate(self, x, active_only: bool = True) -> np.ndarray:
        """Cell id of the nearest (active) mesh node for each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        tree = self.__dict__.get("_tree")
        if tree is None:
            pool = np.flatnonzero(self.active) if active_only else np.arange(self.mesh.size)
            tree = (cKDTree(self.mesh.nodes[pool]), pool)
            self.__dict__["_tree"] = tree
        kd, pool = tree
        _, j = kd.query(x)
        return self.cell_label[pool[j]]

    def to_dict(self) -> dict:
        stats = cell_stats(self)
        return {
            "schema": "msc-v1",
            "version": __version__,
            "mesh": {
                "kind": self.mesh.kind,
                "box": self.mesh.box.tolist(),
                "shape": list(self.mesh.shape) if self.mesh.shape else None,
                "k": self.mesh.k,
                "node_spacing": self.mesh.node_spacing,
            },
            "floor": self.floor,
            "flow": self.config.to_dict(),
            "nodes": self.mesh.nodes.tolist(),
            "values": self.values.tolist(),
            "labels": [
                [int(a), int(b), int(c)]
                for a, b, c in zip(self.mode_label, self.min_label, self.cell_label)
            ],
            "cells": [
                {"cell_id": i, "mode_id": m, "min_id": mn} for i, (m, mn) in enumerate(self.cells)
            ],
            "modes": [{"location": c.location.tolist(), "value": c.value} for c in self.critical.modes],
            "minima": [{"location": c.location.tolist(), "value": c.value} for c in self.critical.minima],
            "stats": stats.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _steepest(values, nodes, edges, allowed, sign):
    """Steepest neighbour per node along ``edges``.

    ``allowed`` masks candidate targets. Returns the target per node, or -1
    when no allowed neighbour improves the value. Ties go to the lowest index.
    """
    m = len(values)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    keep = allowed[dst]
    src, dst = src[keep], dst[keep]
    length = np.linalg.norm(nodes[dst] - nodes[src], axis=1)
    slope = sign * (values[dst] - values[src]) / length
    up = slope > 0
    src, dst, slope = src[up], dst[up], slope[up]
    order = np.lexsort((dst, -slope, src))
    src, dst = src[order], dst[order]
    first = np.ones(len(src), dtype=bool)
    first[1:] = src[1:] != src[:-1]
    target = np.full(m, -1, dtype=np.int64)
    target[src[first]] = dst[first]
    return target


def _follow(parent):
    """Pointer-jump until every entry points at a fixed point."""
    p = parent.copy()
    while True:
        q = p[p]
        if np.array_equal(q, p):
            return p
        p = q


def _refine(field_, mesh, sinks, cfg, box, floor, ascending):
    """Continuous flows from walk sinks; ``ok`` marks those ending on the support."""
    start = mesh.nodes[sinks]
    if ascending:
        dest, status, _ = ascend_many(field_, start, cfg, box)
    else:
        dest, status, _ = descend_many(field_, start, cfg, box, floor)
    ok = status == FlowStatus.CONVERGED
    if np.any(ok) and floor is not None:
        sup = support_of(field_, dest[ok])
        idx = np.flatnonzero(ok)
        ok[idx[sup < floor]] = False
    return dest, ok


def _merge_sinks(field_, mesh, sinks, values, cfg, box, floor, ascending, refined=None):
    """Refine walk sinks with continuous flows and merge them.

    Returns critical points and, per sink, the index of its critical point.
    """
    start = mesh.nodes[sinks]
    dest, ok = refined if refined is not None else _refine(field_, mesh, sinks, cfg, box, floor, ascending)
    loc = np.where(ok[:, None], dest, start)
    val = values[sinks].astype(float)
    if np.any(ok):
        val[ok] = np.atleast_1d(field_.value(loc[ok]))
    reps, labels = _cluster(loc, val, cfg.merge_radius, ascending)
    # order critical points by value (descending for modes)
    order = sorted(range(len(reps)), key=lambda i: ((-reps[i].value if ascending else reps[i].value),)
                   + tuple(reps[i].location))
    rank = np.empty(len(reps), dtype=int)
    rank[order] = np.arange(len(reps))
    return [reps[i] for i in order], rank[labels]


def _join_plateaus(values, edges, root, active):
    """Collapse walk sinks joined by mesh edges of equal value into one sink."""
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    m = len(values)
    is_sink = np.zeros(m, dtype=bool)
    r = root[:m][active]
    is_sink[r[r < m]] = True
    a, b = edges[:, 0], edges[:, 1]
    tol = 1e-12 * float(np.max(np.abs(values[active]))) if active.any() else 0.0
    flat = is_sink[a] & is_sink[b] & (np.abs(values[a] - values[b]) <= tol)
    if not flat.any():
        return root
    g = coo_matrix((np.ones(int(flat.sum())), (a[flat], b[flat])), shape=(m, m))
    _, comp = connected_components(g, directed=False)
    # representative: lowest index in the component
    rep = np.full(comp.max() + 1, m, dtype=np.int64)
    np.minimum.at(rep, comp, np.arange(m))
    out = root.copy()
    ok = out < m
    out[ok] = rep[comp[out[ok]]]
    return out


def _absorb_escaping(values, mesh, active, root, sinks, escaping):
    """Map escaping ascent sinks onto a higher sink across a shallow saddle.

    A sink whose continuous ascent leaves the support is a maximum of the
    field restricted to the active region. The staircase edge of that region
    splits one such maximum into several walk sinks separated by saddles no
    deeper than a single mesh step, so a sink is absorbed when some higher
    node is reachable without dropping more than the largest value change
    along one active mesh edge.
    """
    import heapq

    e = mesh.walk_edges
    both = active[e[:, 0]] & active[e[:, 1]]
    e = e[both]
    ax = mesh.edges[active[mesh.edges[:, 0]] & active[mesh.edges[:, 1]]]
    if not len(e) or not len(ax):
        return root
    thr = float(np.max(np.abs(values[ax[:, 0]] - values[ax[:, 1]])))
    m = len(values)
    order = np.argsort(np.concatenate([e[:, 0], e[:, 1]]), kind="stable")
    nbr = np.concatenate([e[:, 1], e[:, 0]])[order]
    start = np.searchsorted(np.concatenate([e[:, 0], e[:, 1]])[order], np.arange(m + 1))
    target = {}
    for s in sinks[escaping]:
        top = values[s]
        seen = {int(s)}
        heap = [(-top, int(s))]
        while heap:
            negv, u = heapq.heappop(heap)
            if -negv > top or (-negv == top and u < s):
                target[int(s)] = int(root[u])
                break
            for w in nbr[start[u]:start[u + 1]]:
                w = int(w)
                if w not in seen and values[w] >= top - thr:
                    seen.add(w)
                    heapq.heappush(heap, (-values[w], w))
    if not target:
        return root
    # targets are strictly higher, so chains terminate
    jump = np.arange(m)
    for s, t in target.items():
        jump[s] = t
    return _follow(jump)[root]


def decompose(field_, mesh: DomainMesh, cfg: FlowConfig | None = None, floor_frac: float = 0.05,
              values=None) -> ComplexDecomposition:
    """Label mesh nodes by their (mode, minimum) pair.

    Nodes whose support is below ``floor_frac * max(support)`` are inactive.
    Ascent walks stay on active nodes, so a mode may sit on the edge of the
    active region. A descent walk whose steepest step lands on an inactive
    node is assigned the ``DIVERGED`` pseudo-minimum.
    """
    if cfg is None:
        h = getattr(field_, "bandwidth", None) or 4.0 * mesh.node_spacing
        cfg = FlowConfig.for_bandwidth(h)
    nodes = mesh.nodes
    f = np.asarray(field_.value(nodes), dtype=float) if values is None else np.asarray(values, float)
    sup = support_of(field_, nodes) if values is None else f
    if floor_frac > 0:
        floor = floor_frac * float(np.max(sup))
        active = (sup >= floor) & (sup > 0)
        flow_floor = floor
    else:
        # no floor: every node with a finite value takes part
        floor = 0.0
        active = np.isfinite(f)
        flow_floor = None
    if not active.any():
        raise EmptyDecompositionError("no mesh node is above the low-density floor")
    m = mesh.size
    every = np.ones(m, dtype=bool)

    up = _steepest(f, nodes, mesh.walk_edges, active, +1)
    parent_up = np.where(up >= 0, up, np.arange(m))
    root_up = _follow(parent_up)

    down = _steepest(f, nodes, mesh.walk_edges, every, -1)
    # virtual node m is the DIVERGED sink
    parent_dn = np.append(np.where(down >= 0, down, np.arange(m)), m)
    parent_dn[np.flatnonzero(~active)] = m
    root_all = _follow(parent_dn)
    root_up = _join_plateaus(f, mesh.walk_edges, root_up, active)
    root_all = _join_plateaus(f, mesh.walk_edges, root_all, active)
    root_dn = root_all[:m]

    box = mesh.box
    mode_sinks = np.unique(root_up[active])
    dest, ok = _refine(field_, mesh, mode_sinks, cfg, box, flow_floor, True)
    if not ok.all():
        root_up = _absorb_escaping(f, mesh, active, root_up, mode_sinks, ~ok)
        kept = np.isin(mode_sinks, root_up[active])
        mode_sinks, dest, ok = mode_sinks[kept], dest[kept], ok[kept]
    modes, mode_of_sink = _merge_sinks(field_, mesh, mode_sinks, f, cfg, box, floor, True, (dest, ok))
    min_sinks = np.unique(root_dn[active])
    min_sinks = min_sinks[min_sinks < m]
    if len(min_sinks):
        minima, min_of_sink = _merge_sinks(field_, mesh, min_sinks, f, cfg, box, flow_floor, False)
    else:
        minima, min_of_sink = [], np.zeros(0, dtype=int)

    lut_up = np.full(m, -2, dtype=int)
    lut_up[mode_sinks] = mode_of_sink
    lut_dn = np.full(m + 1, DIVERGED, dtype=int)
    lut_dn[min_sinks] = min_of_sink

    mode_label = np.full(m, -2, dtype=int)
    min_label = np.full(m, -2, dtype=int)
    mode_label[active] = lut_up[root_up[active]]
    min_label[active] = lut_dn[root_dn[active]]

    pairs = np.stack([mode_label[active], min_label[active]], axis=1)
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
    cells = [(int(a), int(b)) for a, b in uniq]
    cell_label = np.full(m, -1, dtype=int)
    cell_label[active] = inv.reshape(-1)
    crit = CriticalSet(modes, minima, cfg.merge_radius)
    return ComplexDecomposition(
        mesh=mesh, values=f, support=sup, active=active, mode_label=mode_label,
        min_label=min_label, cells=cells, cell_label=cell_label, critical=crit,
        floor=floor, config=cfg,
    )


@dataclass
class CellStats:
    centers: np.ndarray
    volumes: np.ndarray
    counts: np.ndarray
    boundary: np.ndarray
    boundary_units: str = "volume"

    def to_dict(self) -> dict:
        return {
            "centers": self.centers.tolist(),
            "volumes": self.volumes.tolist(),
            "counts": self.counts.tolist(),
            "boundary": self.boundary.tolist(),
            "boundary_units": self.boundary_units,
        }


def cell_stats(dec: ComplexDecomposition) -> CellStats:
    """Cell centers, volumes and shared-boundary sizes.

    On a lattice, an axis edge crossing between cells contributes the area of
    the dual face it pierces; on a kNN graph boundaries are raw edge counts.
    """
    L = dec.n_cells
    if L < 1:
        raise ValueError("decomposition has no cells")
    mesh = dec.mesh
    lab = dec.cell_label
    act = lab >= 0
    counts = np.bincount(lab[act], minlength=L).astype(float)
    centers = np.zeros((L, mesh.dim))
    for j in range(mesh.dim):
        centers[:, j] = np.bincount(lab[act], weights=mesh.nodes[act, j], minlength=L) / counts
    volumes = counts * mesh.node_volume()
    B = np.zeros((L, L))
    a, b = lab[mesh.edges[:, 0]], lab[mesh.edges[:, 1]]
    cross = (a >= 0) & (b >= 0) & (a != b)
    if mesh.kind == "lattice":
        face = np.prod(mesh.spacing) / mesh.spacing[mesh.edge_axis[cross]]
        units = "volume"
    else:
        face = np.ones(int(cross.sum()))
        units = "edges"
    np.add.at(B, (a[cross], b[cross]), face)
    B = B + B.T
    return CellStats(centers, volumes, counts.astype(int), B, units)


def boundary_nodes(dec: ComplexDecomposition, by: str = "mode") -> np.ndarray:
    """Midpoints of mesh edges whose endpoints carry different labels."""
    labels = {"mode": dec.mode_label, "min": dec.min_label, "cell": dec.cell_label}
    if by not in labels:
        raise ValueError(f"'by' must be one of {sorted(labels)}")
    lab = labels[by]
    e = dec.mesh.edges
    both = dec.active[e[:, 0]] & dec.active[e[:, 1]]
    diff = both & (lab[e[:, 0]] != lab[e[:, 1]])
    sel = e[diff]
    return 0.5 * (dec.mesh.nodes[sel[:, 0]] + dec.mesh.nodes[sel[:, 1]])


def hausdorff(A, B) -> float:
    """Hausdorff distance between two finite point sets."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim == 1:
        A = A.reshape(-1, 1)
    if B.ndim == 1:
        B = B.reshape(-1, 1)
    if len(A) == 0 or len(B) == 0:
        raise ValueError("Hausdorff distance needs two non-empty sets")
    if A.shape[1] != B.shape[1]:
        raise ValueError("point sets have different dimensions")
    return float(max(_directed(A, B), _directed(B, A)))


def _directed(A, B) -> float:
    step = max(1, (1 << 22) // len(B))
    out = 0.0
    for s in range(0, len(A), step):
        out = max(out, float(cdist(A[s:s + step], B).min(axis=1).max()))
    return out
