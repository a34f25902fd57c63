"""Morse-Smale regression: per-cell linear fits over the cells of a pilot smoother."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .decomposition import ComplexDecomposition, build_mesh, decompose
from .flow import FlowConfig
from .kernel import KernelRegressionField, Sample

__all__ = ["MsrModel", "ExtrapolationError", "fit_msr", "msr_predict", "msr_cv_bandwidth", "ols"]

log = logging.getLogger(__name__)


class ExtrapolationError(ValueError):
    def __init__(self, x, nearest_cell: int):
        self.nearest_cell = int(nearest_cell)
        super().__init__(
            f"query {np.asarray(x).tolist()} lies outside the model domain "
            f"(nearest cell: {self.nearest_cell})"
        )


def ols(X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray, bool]:
    """Least squares of ``y`` on ``(1, X)`` via the normal equations.

    A singular normal matrix gets a ridge of ``1e-10 * trace / d``; the
    returned flag reports whether that happened.
    """
    n, d = X.shape
    A = np.hstack([np.ones((n, 1)), X])
    G = A.T @ A
    r = A.T @ y
    ridged = False
    try:
        if np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError
        coef = np.linalg.solve(G, r)
    except np.linalg.LinAlgError:
        ridged = True
        lam = 1e-10 * np.trace(G) / (d + 1)
        coef = np.linalg.solve(G + lam * np.eye(d + 1), r)
    return float(coef[0]), coef[1:], ridged


@dataclass
class MsrModel:
    decomposition: ComplexDecomposition
    intercepts: np.ndarray
    slopes: np.ndarray
    fallback: np.ndarray
    ridged: np.ndarray
    n_points: np.ndarray
    pilot: KernelRegressionField
    meta: dict = field(default_factory=dict)

    @property
    def n_cells(self) -> int:
        return len(self.intercepts)

    def cell_of(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.decomposition.locate(x)

    def predict(self, x) -> np.ndarray:
        return msr_predict(self, x)

    def to_dict(self) -> dict:
        dec = self.decomposition
        return {
            "schema": "msr-v1",
            "version": __version__,
            "meta": self.meta,
            "cells": [
                {
                    "cell_id": i,
                    "mode_id": dec.cells[i][0],
                    "min_id": dec.cells[i][1],
                    "intercept": float(self.intercepts[i]),
                    "slope": self.slopes[i].tolist(),
                    "n_points": int(self.n_points[i]),
                    "fallback": bool(self.fallback[i]),
                    "ridged": bool(self.ridged[i]),
                }
                for i in range(self.n_cells)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _assign(dec: ComplexDecomposition, points: np.ndarray) -> np.ndarray:
    return dec.locate(points)


def fit_msr(sample: Sample, h="silverman", mesh_kind: str = "lattice", resolution=None, k=None,
            cfg: FlowConfig | None = None, floor_frac: float = 0.05,
            standardize: bool = True) -> MsrModel:
    """Fit piecewise-linear regression over the Morse-Smale cells of a kernel-regression pilot.

    Each observation is assigned to the cell of its nearest active mesh node.
    Cells holding fewer than ``d + 2`` observations fall back to their mean.
    """
    if not isinstance(sample, Sample):
        raise TypeError("fit_msr expects a Sample with a response")
    if sample.response is None:
        raise ValueError("fit_msr needs a response")
    n, d = sample.points.shape
    if n < d + 2:
        raise ValueError(f"need at least d + 2 = {d + 2} observations, got {n}")
    if standardize:
        pilot = KernelRegressionField.standardized(sample, h)
    else:
        if isinstance(h, str):
            from .kernel import silverman_bandwidth

            h = silverman_bandwidth(sample.points)
        pilot = KernelRegressionField(sample, float(h))
    if cfg is None:
        cfg = FlowConfig.for_bandwidth(pilot.bandwidth)
    if mesh_kind == "lattice":
        mesh = build_mesh(box=pilot.domain_box(3.0), kind="lattice", resolution=resolution)
    else:
        mesh = build_mesh(sample.points, kind="knn", k=k)
    dec = decompose(pilot, mesh, cfg, floor_frac=floor_frac)
    return _fit_cells(dec, sample, pilot, cfg, dict(
        h=pilot.h, scale=pilot.scale.tolist(), mesh_kind=mesh.kind,
        resolution=list(mesh.shape) if mesh.shape else None, k=mesh.k,
        floor_frac=floor_frac, flow=cfg.to_dict(),
    ))


def _fit_cells(dec, sample, pilot, cfg, meta) -> MsrModel:
    X, y = sample.points, sample.response
    d = X.shape[1]
    cell = _assign(dec, X)
    L = dec.n_cells
    mu = np.zeros(L)
    beta = np.zeros((L, d))
    fallback = np.zeros(L, dtype=bool)
    ridged = np.zeros(L, dtype=bool)
    counts = np.bincount(cell, minlength=L)
    for c in range(L):
        idx = np.flatnonzero(cell == c)
        if len(idx) >= d + 2:
            mu[c], beta[c], ridged[c] = ols(X[idx], y[idx])
        else:
            fallback[c] = True
            mu[c] = float(y[idx].mean()) if len(idx) else float(y.mean())
    if ridged.any():
        log.warning("ridge regularization used in %d cell(s)", int(ridged.sum()))
    return MsrModel(dec, mu, beta, fallback, ridged, counts, pilot, meta)


def msr_predict(model: MsrModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if single and model.slopes.shape[1] == 1 and x.shape[1] != 1:
        x = x.reshape(-1, 1)
    box = model.decomposition.mesh.box
    c = model.cell_of(x)
    outside = ~np.all((x >= box[0]) & (x <= box[1]), axis=1)
    if outside.any():
        i = int(np.flatnonzero(outside)[0])
        raise ExtrapolationError(x[i], c[i])
    out = model.intercepts[c] + np.einsum("ij,ij->i", model.slopes[c], x)
    return out[0] if single else out


def msr_cv_bandwidth(sample: Sample, candidates, folds: int = 5, seed: int = 0, **fit_kw):
    """K-fold cross-validated bandwidth for :func:`fit_msr`.

    Folds come from a seeded permutation applied to the rows in canonical
    (lexicographic) order, so reordering the sample leaves them unchanged. Returns
    ``(best_h, {h: cv_error})``; ties go to the larger bandwidth.
    """
    from ._rng import rng_for

    candidates = [float(h) for h in candidates]
    if len(candidates) < 2:
        raise ValueError("need at least two candidate bandwidths")
    if folds < 2:
        raise ValueError("need at least two folds")
    n = sample.n
    canon = np.lexsort(np.column_stack([sample.points, sample.response]).T[::-1])
    perm = rng_for(seed, 0xCF).permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[canon[perm]] = np.arange(n) % folds
    scores = {}
    for h in candidates:
        sse = 0.0
        for f in range(folds):
            tr, te = fold_of != f, fold_of == f
            model = fit_msr(Sample(sample.points[tr], sample.response[tr]), h, **fit_kw)
            xt = sample.points[te]
            box = model.decomposition.mesh.box
            xt = np.clip(xt, box[0], box[1])
            pred = msr_predict(model, xt)
            sse += float(np.sum((pred - sample.response[te]) ** 2))
        scores[h] = sse / n
    best = min(scores.values())
    tol = 1e-12 * max(1.0, abs(best))
    chosen = max(h for h, s in scores.items() if s <= best + tol)
    return chosen, scores
