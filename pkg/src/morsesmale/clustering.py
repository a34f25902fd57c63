"""Mode (mean-shift) clustering and the Rand index."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .flow import FlowConfig, FlowStatus, _cluster, ascend_many
from .kernel import KdeField, Sample

__all__ = ["ClusterAssignment", "UNASSIGNED", "mode_cluster", "rand_index", "matched_accuracy"]

log = logging.getLogger(__name__)

UNASSIGNED = -1


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    mode_locations: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)

    @property
    def n_clusters(self) -> int:
        return len(self.mode_locations)

    @property
    def n_unassigned(self) -> int:
        return int(np.sum(self.labels == UNASSIGNED))


def mode_cluster(sample, h="silverman", cfg: FlowConfig | None = None, standardize: bool = True,
                 box_pad: float = 3.0, capture_frac: float = 0.1) -> ClusterAssignment:
    """Cluster points by the mode their mean-shift ascent reaches.

    ``h`` is a number or ``"silverman"``; with ``standardize`` the bandwidth
    applies to coordinates divided by their standard deviation. Ascents stop
    early once within ``capture_frac * merge_radius`` of a converged mode
    (0 disables this).
    """
    if not isinstance(sample, Sample):
        sample = Sample(sample)
    if sample.n == 1:
        kde = KdeField(sample, 1.0 if isinstance(h, str) else float(h))
    elif standardize:
        kde = KdeField.standardized(sample, h)
    else:
        if isinstance(h, str):
            from .kernel import silverman_bandwidth

            h = silverman_bandwidth(sample.points)
        kde = KdeField(sample, float(h))
    if cfg is None:
        cfg = FlowConfig.for_bandwidth(kde.bandwidth)
    box = kde.domain_box(box_pad)
    capture = cfg.merge_radius * capture_frac if capture_frac else None
    dest, status, iters = ascend_many(kde, sample.points, cfg, box, capture=capture)
    ok = status == FlowStatus.CONVERGED
    labels = np.full(sample.n, UNASSIGNED, dtype=int)
    modes = np.zeros((0, sample.dim))
    if ok.any():
        reps, lab = _cluster(dest[ok], np.atleast_1d(kde.value(dest[ok])), cfg.merge_radius, True)
        # number clusters by decreasing mode height
        order = np.argsort([-r.value for r in reps], kind="stable")
        rank = np.empty(len(reps), dtype=int)
        rank[order] = np.arange(len(reps))
        labels[ok] = rank[lab]
        modes = np.array([reps[i].location for i in order])
    if not ok.all():
        log.warning("%d of %d ascents did not converge; left unassigned", int((~ok).sum()), sample.n)
    meta = {"h": kde.h, "scale": kde.scale.tolist(), "flow": cfg.to_dict(),
            "max_iterations": int(iters.max()) if len(iters) else 0}
    return ClusterAssignment(labels, modes, meta)


def _labels(x) -> np.ndarray:
    if isinstance(x, ClusterAssignment):
        return x.labels
    return np.asarray(x).reshape(-1)


def _pairs_same(counts: np.ndarray) -> int:
    counts = counts.astype(np.int64)
    return int(np.sum(counts * (counts - 1) // 2))


def rand_index(a, b) -> float:
    """Fraction of point pairs on which two partitions agree.

    Points labelled ``UNASSIGNED`` in either partition are dropped first.
    """
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"partitions have different lengths ({la.size} vs {lb.size})")
    keep = (la != UNASSIGNED) & (lb != UNASSIGNED)
    if not keep.all():
        log.warning("rand_index: ignoring %d unassigned points", int((~keep).sum()))
    la, lb = la[keep], lb[keep]
    n = la.size
    if n < 2:
        raise ValueError("need at least 2 points")
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    ia, ib = ia.reshape(-1), ib.reshape(-1)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    same_a = _pairs_same(table.sum(1))
    same_b = _pairs_same(table.sum(0))
    same_ab = _pairs_same(table.ravel())
    disagree = same_a + same_b - 2 * same_ab
    total = n * (n - 1) // 2
    return 1.0 - disagree / total


def matched_accuracy(a, b) -> float:
    """Agreement after the best one-to-one matching of cluster labels."""
    la, lb = _labels(a), _labels(b)
    _, ia = np.unique(la, return_inverse=True)
    _, ib = np.unique(lb, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia.reshape(-1), ib.reshape(-1)), 1)
    r, c = linear_sum_assignment(-table)
    return float(table[r, c].sum() / la.size)
