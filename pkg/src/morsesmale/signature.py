"""Morse-Smale signatures: per-cell linear summaries of a field and their graph.

Modes and minima become nodes, cells become edges carrying the cell's best
linear fit. Node positions are embedded in the plane by classical scaling.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist, squareform

from . import __version__
from .decomposition import DIVERGED, CellStats, ComplexDecomposition, cell_stats

__all__ = [
    "CellLinearFit",
    "SignatureGraph",
    "cell_linear_fit",
    "classical_mds",
    "build_signature_graph",
    "approximation_value",
    "InactiveRegionError",
]

log = logging.getLogger(__name__)

PEN_MIN, PEN_MAX = 0.5, 5.0


class InactiveRegionError(ValueError):
    pass


@dataclass(frozen=True)
class CellLinearFit:
    eta: float
    gamma: np.ndarray
    rmse: float
    n_nodes: int
    fallback: bool = False

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.eta + x @ self.gamma


def cell_linear_fit(values, nodes) -> CellLinearFit:
    """Least-squares line ``eta + gamma^T x`` through ``(nodes, values)``.

    Nodes carry equal weight, so on a regular lattice this approximates the
    L2 projection of the field onto affine functions over the cell. Below
    ``d + 2`` nodes the fit is intercept-only.
    """
    f = np.asarray(values, dtype=float).reshape(-1)
    X = np.asarray(nodes, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m, d = X.shape
    if m < 1 or f.size != m:
        raise ValueError("need one value per node and at least one node")
    if m < d + 2:
        eta = float(f.mean())
        gamma = np.zeros(d)
        fallback = True
    else:
        # centring keeps the normal equations well conditioned
        xc = X.mean(axis=0)
        fc = f.mean()
        Z = X - xc
        G = Z.T @ Z
        r = Z.T @ (f - fc)
        try:
            gamma = np.linalg.solve(G, r)
        except np.linalg.LinAlgError:
            gamma = np.linalg.lstsq(Z, f - fc, rcond=None)[0]
        eta = float(fc - xc @ gamma)
        fallback = False
    resid = f - (eta + X @ gamma)
    return CellLinearFit(eta, gamma, float(np.sqrt(np.mean(resid ** 2))), m, fallback)


def classical_mds(points, target_dim: int = 2, return_flag: bool = False):
    """Torgerson scaling of the rows of ``points`` into ``target_dim`` dimensions.

    Each eigenvector's sign is fixed so that its first entry of non-negligible
    size is positive. With fewer positive eigenvalues than ``target_dim`` the
    missing coordinates are zero and ``return_flag`` reports it.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[:, None]
    m = P.shape[0]
    if m < 1:
        raise ValueError("need at least one point")
    out = np.zeros((m, target_dim))
    padded = False
    if m == 1:
        padded = True
    else:
        D2 = squareform(pdist(P, "sqeuclidean"))
        J = np.eye(m) - 1.0 / m
        B = -0.5 * J @ D2 @ J
        B = 0.5 * (B + B.T)
        w, V = np.linalg.eigh(B)
        order = np.argsort(-w, kind="stable")
        w, V = w[order], V[:, order]
        tol = max(1e-12, 1e-10 * abs(w[0]))
        k = 0
        for j in range(min(target_dim, m)):
            if w[j] <= tol:
                break
            v = V[:, j]
            lead = np.flatnonzero(np.abs(v) > 1e-12 * np.abs(v).max())[0]
            if v[lead] < 0:
                v = -v
            out[:, j] = v * np.sqrt(w[j])
            k += 1
        padded = k < target_dim
    if padded:
        log.info("classical_mds: fewer than %d positive eigenvalues; padded with zeros", target_dim)
    return (out, padded) if return_flag else out


@dataclass
class SignatureGraph:
    nodes: list[dict]
    edges: list[dict]
    embedding_padded: bool = False
    meta: dict = field(default_factory=dict)

    def node_id(self, kind: str, index: int) -> str:
        if kind == "mode":
            return f"M{index}"
        return "Mdiv" if index == DIVERGED else f"m{index}"

    def fit(self, cell_id: int) -> CellLinearFit:
        e = self.edges[cell_id]
        return CellLinearFit(e["eta"], np.asarray(e["gamma"]), e["rmse"], e["n_nodes"], e["fallback"])

    def is_bipartite(self) -> bool:
        kinds = {n["id"]: n["kind"] for n in self.nodes}
        return all(kinds[e["source"]] == "mode" and kinds[e["target"]] != "mode" for e in self.edges)

    def to_dict(self) -> dict:
        return {
            "schema": "mss-v1",
            "version": __version__,
            "meta": self.meta,
            "embedding_padded": self.embedding_padded,
            "nodes": self.nodes,
            "edges": self.edges,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_dot(self) -> str:
        """Graphviz description; pen widths map ``width`` linearly onto [0.5, 5]."""
        w = np.array([e["width"] for e in self.edges], dtype=float)
        lo, hi = (w.min(), w.max()) if len(w) else (0.0, 0.0)
        pens = np.full(len(w), 0.5 * (PEN_MIN + PEN_MAX)) if hi <= lo else \
            PEN_MIN + (PEN_MAX - PEN_MIN) * (w - lo) / (hi - lo)
        lines = ["graph signature {"]
        for n in self.nodes:
            shape = {"mode": "triangle", "min": "invtriangle"}.get(n["kind"], "box")
            x, y = n["embedded"]
            lines.append(f'  "{n["id"]}" [shape={shape}, pos="{x!r},{y!r}!", '
                         f'label="{n["id"]}\\n{n["value"]!r}"];')
        for e, p in zip(self.edges, pens):
            lines.append(f'  "{e["source"]}" -- "{e["target"]}" '
                         f'[penwidth={float(p)!r}, label="{e["cell_id"]}", weight={e["width"]!r}];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def _diverged_anchor(dec: ComplexDecomposition) -> tuple[np.ndarray, float]:
    # lowest active node draining to the pseudo-minimum
    idx = np.flatnonzero(dec.active & (dec.min_label == DIVERGED))
    j = idx[np.argmin(dec.values[idx])]
    return dec.mesh.nodes[j], float(dec.values[j])


def build_signature_graph(dec: ComplexDecomposition, stats: CellStats | None = None,
                          include_diverged: bool = True) -> SignatureGraph:
    """Signature graph of a decomposition.

    With ``include_diverged=False`` cells draining to the pseudo-minimum are
    dropped, which removes the boundary cells created by a low-density floor.
    """
    if dec.n_cells < 1:
        raise ValueError("decomposition has no cells")
    if stats is None:
        stats = cell_stats(dec)
    keep = [c for c, (_, mn) in enumerate(dec.cells) if include_diverged or mn != DIVERGED]
    if not keep:
        raise ValueError("no cells left after dropping diverged cells")
    used_modes = sorted({dec.cells[c][0] for c in keep})
    used_mins = sorted({dec.cells[c][1] for c in keep}, key=lambda i: (i == DIVERGED, i))

    graph = SignatureGraph([], [])
    locs, meta_nodes = [], []
    for i in used_modes:
        cp = dec.critical.modes[i]
        locs.append(cp.location)
        meta_nodes.append((graph.node_id("mode", i), "mode", cp.location, cp.value))
    for i in used_mins:
        if i == DIVERGED:
            loc, val = _diverged_anchor(dec)
            kind = "diverged"
        else:
            cp = dec.critical.minima[i]
            loc, val, kind = cp.location, cp.value, "min"
        locs.append(loc)
        meta_nodes.append((graph.node_id("min", i), kind, loc, val))
    emb, padded = classical_mds(np.array(locs), 2, return_flag=True)
    graph.embedding_padded = bool(padded)
    for (nid, kind, loc, val), e in zip(meta_nodes, emb):
        graph.nodes.append({
            "id": nid, "kind": kind, "position": np.asarray(loc, float).tolist(),
            "embedded": e.tolist(), "value": float(val),
        })
    for new_id, c in enumerate(keep):
        mode, mn = dec.cells[c]
        members = dec.cell_members(c)
        fit = cell_linear_fit(dec.values[members], dec.mesh.nodes[members])
        graph.edges.append({
            "cell_id": new_id,
            "decomposition_cell": c,
            "source": graph.node_id("mode", mode),
            "target": graph.node_id("min", mn),
            "mode_id": mode,
            "min_id": mn,
            "eta": fit.eta,
            "gamma": fit.gamma.tolist(),
            "width": float(np.linalg.norm(fit.gamma)),
            "rmse": fit.rmse,
            "n_nodes": fit.n_nodes,
            "fallback": fit.fallback,
            "volume": float(stats.volumes[c]),
        })
    graph.meta = {"include_diverged": include_diverged, "floor": dec.floor,
                  "mesh_kind": dec.mesh.kind, "n_cells": dec.n_cells}
    assert graph.is_bipartite()
    return graph


def approximation_value(graph: SignatureGraph, dec: ComplexDecomposition, x) -> np.ndarray:
    """Piecewise-linear approximation ``eta + gamma^T x`` on the cell containing ``x``.

    The cell is that of the nearest active mesh node. Queries outside the
    mesh box, or in a cell not present in ``graph``, raise.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if single and dec.mesh.dim == 1 and x.shape[1] != 1:
        x = x.reshape(-1, 1)
    box = dec.mesh.box
    if not np.all((x >= box[0]) & (x <= box[1])):
        raise InactiveRegionError("query outside the mesh box")
    act = np.flatnonzero(dec.active)
    _, j = _nearest(dec, x)
    # a query nearer to an inactive node than to any active one is off the support
    _, jall = _nearest(dec, x, active_only=False)
    if not np.all(dec.active[jall]):
        raise InactiveRegionError("query lies in the inactive (low-density) region")
    cells = dec.cell_label[act[j]]
    lookup = {e["decomposition_cell"]: e for e in graph.edges}
    out = np.empty(len(x))
    for i, c in enumerate(cells):
        e = lookup.get(int(c))
        if e is None:
            raise InactiveRegionError(f"cell {int(c)} is not part of the signature graph")
        out[i] = e["eta"] + float(np.dot(e["gamma"], x[i]))
    return out[0] if single else out


def _nearest(dec, x, active_only=True):
    from scipy.spatial import cKDTree

    key = "_tree_act" if active_only else "_tree_all"
    tree = dec.__dict__.get(key)
    if tree is None:
        pts = dec.mesh.nodes[dec.active] if active_only else dec.mesh.nodes
        tree = cKDTree(pts)
        dec.__dict__[key] = tree
    return tree.query(x)
