"""Two-sample tools built on the density difference ``p_X - p_Y``.

Contents: the difference field, a bootstrap sup-norm threshold, significance
regions and per-cell ratios for visualization, the energy distance with a
permutation test, and the cell-wise energy test with Bonferroni correction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import __version__
from ._rng import rng_for
from .decomposition import ComplexDecomposition, DomainMesh, build_mesh, cell_stats, decompose
from .flow import FlowConfig
from .kernel import KdeField, Sample, domain_box, silverman_bandwidth, standardization_scale
from .signature import classical_mds

__all__ = [
    "DensityDifferenceField",
    "density_difference",
    "bootstrap_linf_threshold",
    "significance_regions",
    "TwoSampleVizReport",
    "twosample_viz",
    "energy_statistic",
    "EnergyReport",
    "energy_permutation_test",
    "MseReport",
    "mse_test",
    "bonferroni_feasible",
]

log = logging.getLogger(__name__)

# stream tags for rng_for
_TAG_BOOT, _TAG_SPLIT, _TAG_CELL, _TAG_PERM = 11, 12, 14, 15


def _points(s) -> np.ndarray:
    return s.points if isinstance(s, Sample) else Sample(s).points


class DensityDifferenceField:
    """``kde_x - kde_y`` with a shared bandwidth.

    The support used for low-density floors is the pooled density
    ``(kde_x + kde_y) / 2``, so the floor does not depend on the sign of
    the difference.
    """

    def __init__(self, kde_x: KdeField, kde_y: KdeField):
        if kde_x.dim != kde_y.dim:
            raise ValueError(f"samples have dimensions {kde_x.dim} and {kde_y.dim}")
        if not np.array_equal(kde_x.bandwidths, kde_y.bandwidths):
            raise ValueError("both density estimates must share the bandwidth")
        self.kde_x = kde_x
        self.kde_y = kde_y
        self.dim = kde_x.dim
        self.h = kde_x.h
        self.scale = kde_x.scale
        self.bandwidth = kde_x.bandwidth
        self.sample = Sample(np.vstack([kde_x.sample.points, kde_y.sample.points]))

    def value(self, x):
        return self.kde_x.value(x) - self.kde_y.value(x)

    def gradient(self, x):
        return self.kde_x.gradient(x) - self.kde_y.gradient(x)

    def support(self, x):
        return 0.5 * (self.kde_x.value(x) + self.kde_y.value(x))

    def swapped(self) -> "DensityDifferenceField":
        return DensityDifferenceField(self.kde_y, self.kde_x)

    def domain_box(self, pad: float = 3.0) -> np.ndarray:
        return domain_box(self.sample.points, pad * self.kde_x.bandwidths)


def _pooled_bandwidth(X, Y, h, standardize=True):
    pooled = np.vstack([X, Y])
    sd = standardization_scale(pooled)
    if isinstance(h, str):
        if h != "silverman":
            raise ValueError(f"unknown bandwidth rule {h!r}")
        h = silverman_bandwidth(pooled)
        if not standardize:
            # isotropic bandwidth on the geometric-mean scale
            h *= float(np.exp(np.mean(np.log(sd))))
    return float(h), (sd if standardize else np.ones(pooled.shape[1]))


def density_difference(X, Y, h="silverman", scale=None, standardize: bool = True) -> DensityDifferenceField:
    """Difference of two Gaussian KDEs sharing ``h`` and ``scale``.

    Without an explicit ``scale`` the pooled per-coordinate sd is used (or
    ones when ``standardize`` is false). ``"silverman"`` applies the rule to
    the pooled sample.
    """
    X, Y = _points(X), _points(Y)
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"samples have dimensions {X.shape[1]} and {Y.shape[1]}")
    if scale is None:
        h, scale = _pooled_bandwidth(X, Y, h, standardize)
    elif isinstance(h, str):
        h = silverman_bandwidth(np.vstack([X, Y]))
    return DensityDifferenceField(KdeField(Sample(X), float(h), scale=scale),
                                  KdeField(Sample(Y), float(h), scale=scale))


def bootstrap_linf_threshold(X, Y, h, n_boot: int = 200, level: float = 0.95, probe=None,
                             seed: int = 0, scale=None, return_draws: bool = False):
    """Bootstrap quantile of ``sup |f* - f|`` over the probe points.

    ``f* `` is the difference of KDEs of X and Y each resampled with
    replacement at its own size. Replicate ``b`` uses its own random stream,
    so the result is fixed by ``seed``. The quantile is the smallest draw
    whose empirical CDF reaches ``level``.
    """
    if n_boot < 1:
        raise ValueError("n_boot must be at least 1")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    X, Y = _points(X), _points(Y)
    base = density_difference(X, Y, h, scale=scale)
    if probe is None:
        probe = build_mesh(box=base.domain_box(3.0), kind="lattice").nodes
    probe = probe.nodes if isinstance(probe, DomainMesh) else np.atleast_2d(np.asarray(probe, float))
    if len(probe) == 0:
        raise ValueError("probe set is empty")
    f0 = base.value(probe)
    draws = np.empty(n_boot)
    for b in range(n_boot):
        rng = rng_for(seed, _TAG_BOOT, b)
        xb = X[rng.integers(0, len(X), len(X))]
        yb = Y[rng.integers(0, len(Y), len(Y))]
        fb = density_difference(xb, yb, base.h, scale=base.scale).value(probe)
        draws[b] = np.max(np.abs(fb - f0))
    lam = float(np.quantile(draws, level, method="inverted_cdf"))
    return (lam, draws) if return_draws else lam


def significance_regions(values_or_field, lam: float, nodes=None) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks of nodes with ``f > lam`` and ``f < -lam``."""
    if lam < 0:
        raise ValueError("threshold must be non-negative")
    if nodes is not None:
        pts = nodes.nodes if isinstance(nodes, DomainMesh) else nodes
        f = np.atleast_1d(values_or_field.value(pts))
    else:
        f = np.asarray(values_or_field, dtype=float)
    return f > lam, f < -lam


@dataclass
class TwoSampleVizReport:
    centers: np.ndarray
    embedded: np.ndarray
    volumes: np.ndarray
    r_plus: np.ndarray
    r_minus: np.ndarray
    radii: np.ndarray
    edges: list[tuple[int, int, float]]
    lam: float
    r0: float
    cells: list[tuple[int, int]]
    decomposition: ComplexDecomposition | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": "tsviz-v1",
            "version": __version__,
            "meta": self.meta,
            "lambda": self.lam,
            "r0": self.r0,
            "cells": [
                {
                    "cell_id": i,
                    "mode_id": self.cells[i][0],
                    "min_id": self.cells[i][1],
                    "center": self.centers[i].tolist(),
                    "embedded": self.embedded[i].tolist(),
                    "volume": float(self.volumes[i]),
                    "r_plus": float(self.r_plus[i]),
                    "r_minus": float(self.r_minus[i]),
                    "radius": float(self.radii[i]),
                }
                for i in range(len(self.cells))
            ],
            "edges": [{"a": a, "b": b, "boundary": w} for a, b, w in self.edges],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _difference_mesh(diff: DensityDifferenceField, kind="lattice", resolution=None, k=None, pad=3.0):
    if kind == "lattice":
        return build_mesh(box=diff.domain_box(pad), kind="lattice", resolution=resolution)
    return build_mesh(diff.sample.points, kind="knn", k=k)


def twosample_viz(X, Y, h="silverman", lam=None, r0: float = 1.0, mesh_kind: str = "lattice",
                  resolution=None, k=None, floor_frac: float = 0.05, n_boot: int = 200,
                  level: float = 0.95, seed: int = 0, cfg: FlowConfig | None = None) -> TwoSampleVizReport:
    """Cells of the density difference with their significant-region ratios.

    ``r_plus`` (``r_minus``) is the fraction of a cell's mesh nodes where
    the difference exceeds ``lam`` (falls below ``-lam``). Without ``lam``
    the bootstrap threshold at ``level`` is used on the same mesh.
    """
    X, Y = _points(X), _points(Y)
    diff = density_difference(X, Y, h)
    mesh = _difference_mesh(diff, mesh_kind, resolution, k)
    if cfg is None:
        cfg = FlowConfig.for_bandwidth(diff.bandwidth)
    dec = decompose(diff, mesh, cfg, floor_frac=floor_frac)
    if lam is None:
        lam = bootstrap_linf_threshold(X, Y, diff.h, n_boot, level, mesh.nodes, seed, scale=diff.scale)
    plus, minus = significance_regions(dec.values, float(lam))
    stats = cell_stats(dec)
    L = dec.n_cells
    lab = dec.cell_label
    act = lab >= 0
    cnt = np.bincount(lab[act], minlength=L).astype(float)
    rp = np.bincount(lab[act & plus], minlength=L) / cnt
    rm = np.bincount(lab[act & minus], minlength=L) / cnt
    emb = classical_mds(stats.centers, 2)
    radii = r0 * np.sqrt(stats.volumes) * (rp + rm)
    edges = [(int(a), int(b), float(stats.boundary[a, b]))
             for a in range(L) for b in range(a + 1, L) if stats.boundary[a, b] > 0]
    meta = {"h": diff.h, "scale": diff.scale.tolist(), "mesh_kind": mesh.kind,
            "resolution": list(mesh.shape) if mesh.shape else None, "k": mesh.k,
            "floor_frac": floor_frac, "n_boot": n_boot, "level": level, "seed": seed,
            "boundary_units": stats.boundary_units, "flow": cfg.to_dict()}
    return TwoSampleVizReport(stats.centers, emb, stats.volumes, rp, rm, radii, edges,
                              float(lam), float(r0), list(dec.cells), dec, meta)


def _canonical(P: np.ndarray) -> np.ndarray:
    # lexicographic row order, so identical multisets give identical arrays
    return P[np.lexsort(P.T[::-1])] if len(P) > 1 else P


def energy_statistic(X, Y) -> float:
    """Sample energy distance ``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` (V-statistic form).

    Symmetric in its arguments and exactly zero for identical multisets.
    """
    X = _canonical(_points(X))
    Y = _canonical(_points(Y))
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"samples have dimensions {X.shape[1]} and {Y.shape[1]}")
    n, m = len(X), len(Y)
    a, b = (X, Y) if (n, X.tobytes()) <= (m, Y.tobytes()) else (Y, X)
    xy = cdist(a, b).sum() / (n * m)
    xx = cdist(X, X).sum() / (n * n)
    yy = cdist(Y, Y).sum() / (m * m)
    return float((xy - xx) + (xy - yy))


@dataclass
class EnergyReport:
    statistic: float
    p_value: float
    n_permutations: int
    seed: int
    n_x: int = 0
    n_y: int = 0

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "n_permutations": self.n_permutations, "seed": self.seed,
                "n_x": self.n_x, "n_y": self.n_y}


def _split_stat(D: np.ndarray, is_x: np.ndarray, total: float) -> float:
    n = int(is_x.sum())
    m = len(is_x) - n
    rows = D[is_x]
    sxx = rows[:, is_x].sum()
    sxy = rows[:, ~is_x].sum()
    syy = total - sxx - 2.0 * sxy
    return 2.0 * sxy / (n * m) - sxx / (n * n) - syy / (m * m)


def energy_permutation_test(X, Y, n_perm: int = 199, seed: int = 0, stream=()) -> EnergyReport:
    """Permutation test for equal distributions based on the energy distance.

    Labels of the pooled sample are permuted ``n_perm`` times and
    ``p = (1 + #{permuted >= observed}) / (n_perm + 1)``. Near-ties count as
    ties. ``stream`` extends the random-stream key so callers can run many
    independent tests from one seed.
    """
    X, Y = _points(X), _points(Y)
    n, m = len(X), len(Y)
    if n < 1 or m < 1 or n + m < 4:
        raise ValueError("need n, m >= 1 and n + m >= 4")
    if n_perm < 19:
        raise ValueError("n_perm must be at least 19")
    stat = energy_statistic(X, Y)
    Z = np.vstack([X, Y])
    D = cdist(Z, Z)
    total = D.sum()
    lab = np.zeros(n + m, dtype=bool)
    lab[:n] = True
    obs = _split_stat(D, lab, total)
    tol = 1e-10 * max(total / (n + m) ** 2, 1e-300)
    rng = rng_for(seed, _TAG_PERM, *stream)
    count = 0
    for _ in range(n_perm):
        count += _split_stat(D, rng.permutation(lab), total) >= obs - tol
    p = (1 + int(count)) / (n_perm + 1)
    return EnergyReport(stat, float(p), int(n_perm), int(seed), n, m)


@dataclass
class MseReport:
    L: int
    cells: list[dict]
    alpha: float
    threshold: float
    reject: bool
    seed: int
    n_perm: int
    inconclusive: bool = False
    n_cells_total: int = 0
    meta: dict = field(default_factory=dict)

    def p_values(self) -> np.ndarray:
        return np.array([c["p_value"] for c in self.cells if not c["skipped"]], dtype=float)

    def recompute_reject(self) -> bool:
        p = self.p_values()
        return bool(len(p) and np.any(p < self.alpha / len(p)))

    def to_dict(self) -> dict:
        return {
            "schema": "mse-v1",
            "version": __version__,
            "meta": self.meta,
            "L": self.L,
            "n_cells_total": self.n_cells_total,
            "alpha": self.alpha,
            "threshold": self.threshold,
            "reject": self.reject,
            "inconclusive": self.inconclusive,
            "seed": self.seed,
            "n_perm": self.n_perm,
            "cells": self.cells,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _half_split(P: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    idx = rng.permutation(len(P))
    k = len(P) // 2
    return P[np.sort(idx[:k])], P[np.sort(idx[k:])]


def mse_test(X, Y, h="silverman", alpha: float = 0.05, n_perm: int = 199, seed: int = 0,
             mesh_kind: str = "lattice", resolution=None, k=None, floor_frac: float = 0.05,
             min_cell: int = 10, cfg: FlowConfig | None = None) -> MseReport:
    """Cell-wise energy test with Bonferroni correction.

    Each sample is split in half at random. The first halves define the
    density difference and its cells; the second halves are assigned to
    cells by nearest active mesh node and each cell gets its own energy
    permutation test. Cells with fewer than ``min_cell`` points from either
    sample are skipped: with a few hundred permutations such cells cannot
    reach ``alpha / L`` and only inflate ``L``. ``L`` counts the tested
    cells and the test rejects when some cell has ``p < alpha / L``.
    """
    X, Y = _points(X), _points(Y)
    if len(X) < 4 or len(Y) < 4:
        raise ValueError("each sample needs at least 4 points")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    # the split stream is keyed by sample size, so equal-size samples share
    # one index permutation and duplicated data split identically
    x1, x2 = _half_split(X, rng_for(seed, _TAG_SPLIT, len(X)))
    y1, y2 = _half_split(Y, rng_for(seed, _TAG_SPLIT, len(Y)))
    diff = density_difference(x1, y1, h)
    mesh = _difference_mesh(diff, mesh_kind, resolution, k)
    if cfg is None:
        cfg = FlowConfig.for_bandwidth(diff.bandwidth)
    dec = decompose(diff, mesh, cfg, floor_frac=floor_frac)
    cx, cy = dec.locate(x2), dec.locate(y2)
    cells = []
    for c in range(dec.n_cells):
        px, py = x2[cx == c], y2[cy == c]
        entry = {"cell_id": c, "mode_id": dec.cells[c][0], "min_id": dec.cells[c][1],
                 "n_x": int(len(px)), "n_y": int(len(py))}
        if min(len(px), len(py)) < min_cell or len(px) + len(py) < 4:
            entry.update(skipped=True, statistic=None, p_value=None)
        else:
            rep = energy_permutation_test(px, py, n_perm, seed, stream=(_TAG_CELL, c))
            entry.update(skipped=False, statistic=rep.statistic, p_value=rep.p_value)
        cells.append(entry)
    tested = [e for e in cells if not e["skipped"]]
    L = len(tested)
    thr = alpha / L if L else 0.0
    reject = bool(L and any(e["p_value"] < thr for e in tested))
    if L == 0:
        log.warning("mse_test: no testable cell; the result is inconclusive")
    elif (1.0 / (n_perm + 1)) >= thr:
        log.warning("mse_test: with %d permutations no p-value can fall below alpha/L = %.4g",
                    n_perm, thr)
    meta = {"h": diff.h, "scale": diff.scale.tolist(), "mesh_kind": mesh.kind,
            "resolution": list(mesh.shape) if mesh.shape else None, "k": mesh.k,
            "floor_frac": floor_frac, "min_cell": min_cell, "flow": cfg.to_dict(),
            "split_sizes": [len(x1), len(x2), len(y1), len(y2)]}
    return MseReport(L, cells, float(alpha), float(thr), reject, int(seed), int(n_perm),
                     L == 0, dec.n_cells, meta)


def min_attainable_p(n_perm: int) -> float:
    return 1.0 / (n_perm + 1)


def bonferroni_feasible(alpha: float, L: int, n_perm: int) -> bool:
    """Whether some permutation p-value can fall strictly below ``alpha / L``."""
    return L > 0 and min_attainable_p(n_perm) < alpha / L
