"""Gradient ascent/descent flows and critical-point discovery.

Fields are duck-typed: anything with ``value(x)`` and ``gradient(x)`` that
accept ``(m, d)`` arrays works. Optional attributes used when present:

``support(x)``
    non-negative density used for low-density floors (defaults to ``value``)
``bandwidth``
    length scale used for default tolerances
``mean_shift(x)``
    exact mean-shift update; when available ascent uses it instead of
    backtracking gradient steps
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

__all__ = [
    "FlowConfig",
    "FlowStatus",
    "FlowResult",
    "CriticalPoint",
    "CriticalSet",
    "EmptyCriticalSetError",
    "FunctionField",
    "ascend",
    "descend",
    "ascend_many",
    "descend_many",
    "find_critical_set",
    "merge_points",
    "support_of",
    "default_floor",
]


class EmptyCriticalSetError(RuntimeError):
    pass


@dataclass(frozen=True)
class FlowConfig:
    """Numerical settings of the discretized flow.

    ``step_size`` multiplies the field's length scale to give the longest
    allowed displacement per iteration.
    """

    step_size: float = 0.5
    tolerance: float = 1e-7
    max_iters: int = 5000
    merge_radius: float = 0.5

    def __post_init__(self):
        if not (self.step_size > 0 and self.tolerance > 0 and self.merge_radius > 0):
            raise ValueError("step_size, tolerance and merge_radius must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tolerance < self.merge_radius:
            raise ValueError("tolerance must be smaller than merge_radius")

    @classmethod
    def for_bandwidth(cls, h: float, **kw) -> "FlowConfig":
        """Scale-aware defaults: tolerance 1e-7 h, merge radius h / 2."""
        params = dict(tolerance=1e-7 * h, merge_radius=0.5 * h, step_size=0.5)
        params.update(kw)
        cfg = cls(**params)
        object.__setattr__(cfg, "_length", float(h))
        return cfg

    @property
    def length(self) -> float:
        """Length scale the config was derived from (2 * merge_radius otherwise)."""
        return getattr(self, "_length", 2.0 * self.merge_radius)

    def to_dict(self) -> dict:
        return dict(
            step_size=self.step_size,
            tolerance=self.tolerance,
            max_iters=self.max_iters,
            merge_radius=self.merge_radius,
        )


class FlowStatus(enum.IntEnum):
    CONVERGED = 0
    NOT_CONVERGED = 1
    LEFT_DOMAIN = 2
    DIVERGED = 3


@dataclass
class FlowResult:
    destination: np.ndarray | None
    iterations: int
    status: FlowStatus
    grad_norm: float = float("nan")
    trace: list | None = None

    @property
    def converged(self) -> bool:
        return self.status is FlowStatus.CONVERGED


@dataclass(frozen=True)
class CriticalPoint:
    location: np.ndarray
    value: float


@dataclass
class CriticalSet:
    modes: list[CriticalPoint] = field(default_factory=list)
    minima: list[CriticalPoint] = field(default_factory=list)
    merge_radius: float = 0.0

    def mode_locations(self) -> np.ndarray:
        return np.array([c.location for c in self.modes]).reshape(len(self.modes), -1)

    def minimum_locations(self) -> np.ndarray:
        return np.array([c.location for c in self.minima]).reshape(len(self.minima), -1)


@dataclass(frozen=True, eq=False)
class FunctionField:
    """Adapter turning plain callables into a field.

    ``value_fn`` and ``grad_fn`` receive an ``(m, d)`` array.
    """

    value_fn: object
    grad_fn: object
    dim: int
    support_fn: object = None
    bandwidth: float | None = None

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(np.asarray(self.value_fn(x.reshape(1, self.dim)))[0])
        return np.asarray(self.value_fn(x), dtype=float)

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return np.asarray(self.grad_fn(x.reshape(1, self.dim)), dtype=float).reshape(self.dim)
        return np.asarray(self.grad_fn(x), dtype=float).reshape(len(x), self.dim)

    def support(self, x):
        if self.support_fn is None:
            return self.value(x)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(np.asarray(self.support_fn(x.reshape(1, self.dim)))[0])
        return np.asarray(self.support_fn(x), dtype=float)


def support_of(field_, x) -> np.ndarray:
    fn = getattr(field_, "support", None)
    return np.atleast_1d(fn(x) if fn is not None else field_.value(x))


def default_floor(field_, frac: float = 0.05) -> float:
    """``frac`` times the largest support value over the field's sample points."""
    pts = field_.sample.points
    return frac * float(np.max(support_of(field_, pts)))


def _field_length(field_, cfg: FlowConfig) -> float:
    h = getattr(field_, "bandwidth", None)
    return float(h) if h else cfg.length


def _inside(x: np.ndarray, box) -> np.ndarray:
    if box is None:
        return np.ones(len(x), dtype=bool)
    box = np.asarray(box, dtype=float)
    return np.all((x >= box[0]) & (x <= box[1]), axis=1)


def _rownorm(g: np.ndarray) -> np.ndarray:
    # scaled so tiny gradients do not underflow to zero when squared
    top = np.max(np.abs(g), axis=1)
    safe = np.where(top > 0, top, 1.0)
    return top * np.sqrt(np.sum((g / safe[:, None]) ** 2, axis=1))


def _flow_many(field_, x0, cfg, sign, box, floor, use_mean_shift, trace=False, capture=None,
               anchors=None):
    x = np.array(np.atleast_2d(x0), dtype=float)
    m, d = x.shape
    status = np.full(m, int(FlowStatus.NOT_CONVERGED), dtype=np.int8)
    iters = np.zeros(m, dtype=int)
    max_step = cfg.step_size * _field_length(field_, cfg)
    tol = cfg.tolerance
    descending = sign < 0
    traces = [[] for _ in range(m)] if trace else None

    def fval(p):
        return sign * np.atleast_1d(field_.value(p))

    def out_of_bounds(p):
        bad = ~_inside(p, box)
        if descending and floor is not None:
            bad |= support_of(field_, p) < floor
        return bad

    live = np.flatnonzero(~out_of_bounds(x)) if len(x) else np.array([], dtype=int)
    status[np.setdiff1d(np.arange(m), live)] = (
        FlowStatus.DIVERGED if descending else FlowStatus.LEFT_DOMAIN
    )
    if len(live) == 0:
        return x, status, iters, np.full(m, np.nan), traces
    f = np.full(m, np.nan)
    f[live] = fval(x[live])
    if trace:
        for i in live:
            traces[i].append(sign * f[i])
    eta = np.zeros(m)
    if not use_mean_shift:
        g = sign * field_.gradient(x[live])
        gn = _rownorm(g)
        eta[live] = max_step / np.maximum(gn, 1e-300)

    for _ in range(cfg.max_iters):
        if len(live) == 0:
            break
        xl = x[live]
        if use_mean_shift:
            prop = field_.mean_shift(xl)
        else:
            g = sign * field_.gradient(xl)
            gn = np.maximum(_rownorm(g), 1e-300)
            eta[live] = np.minimum(eta[live], max_step / gn)
            prop = xl + eta[live, None] * g
        disp = np.linalg.norm(prop - xl, axis=1)
        iters[live] += 1
        if use_mean_shift:
            # mean shift never decreases a Gaussian KDE; values only for traces
            fp = fval(prop) if trace else np.zeros(len(live))
            accept = np.ones(len(live), dtype=bool)
        else:
            fp = fval(prop)
            accept = fp > f[live]
            tiny = disp < tol
            # a rejected step shorter than the tolerance: nothing left to gain
            done_here = ~accept & tiny
        leave = accept & out_of_bounds(prop)
        idx_acc = live[accept & ~leave]
        x[idx_acc] = prop[accept & ~leave]
        f[idx_acc] = fp[accept & ~leave]
        if trace:
            for i, v in zip(idx_acc, fp[accept & ~leave]):
                traces[i].append(sign * v)
        finished = np.zeros(len(live), dtype=bool)
        status[live[leave]] = FlowStatus.DIVERGED if descending else FlowStatus.LEFT_DOMAIN
        finished |= leave
        conv = accept & ~leave & (disp < tol)
        if not use_mean_shift:
            conv |= done_here
            eta[live[accept]] *= 1.5
            eta[live[~accept]] *= 0.5
        status[live[conv]] = FlowStatus.CONVERGED
        finished |= conv
        if capture:
            if conv.any():
                new = x[live[conv]]
                anchors = new if anchors is None else np.vstack([anchors, new])
                anchors = anchors[np.unique(merge_points(anchors, capture * 1e-3), return_index=True)[1]]
            if anchors is not None:
                rest = np.flatnonzero(~finished)
                dist, j = cKDTree(anchors).query(x[live[rest]])
                hit = rest[dist < capture]
                x[live[hit]] = anchors[j[dist < capture]]
                status[live[hit]] = FlowStatus.CONVERGED
                finished[hit] = True
        live = live[~finished]

    gnorm = np.full(m, np.nan)
    ok = status == FlowStatus.CONVERGED
    if np.any(ok):
        gnorm[ok] = np.linalg.norm(np.atleast_2d(field_.gradient(x[ok])), axis=1)
    return x, status, iters, gnorm, traces


def _use_mean_shift(field_, sign: int) -> bool:
    return sign > 0 and hasattr(field_, "mean_shift")


def ascend_many(field_, x0, cfg: FlowConfig, box=None, capture: float | None = None):
    """Vectorized ascent from each row of ``x0``.

    Returns ``(destinations, status array, iteration counts)``. Rows that did
    not converge keep their last iterate. With ``capture`` a flow stops as
    soon as it is within that distance of an already converged destination
    and takes over that destination.
    """
    ms = _use_mean_shift(field_, +1)
    anchors = None
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if capture and len(x0) > 64:
        # fully converge a strided subset first so captures can start early
        pilot = x0[:: max(1, len(x0) // 32)]
        px, pst, _, _, _ = _flow_many(field_, pilot, cfg, +1, box, None, ms)
        good = px[pst == FlowStatus.CONVERGED]
        if len(good):
            anchors = good[np.unique(merge_points(good, capture * 1e-3), return_index=True)[1]]
    x, status, iters, _, _ = _flow_many(
        field_, x0, cfg, +1, box, None, ms, capture=capture, anchors=anchors
    )
    return x, status, iters


def descend_many(field_, x0, cfg: FlowConfig, box=None, floor=None):
    """Vectorized descent; rows whose support drops below ``floor`` or leave ``box`` are DIVERGED."""
    x, status, iters, _, _ = _flow_many(field_, x0, cfg, -1, box, floor, False)
    return x, status, iters


def _single(field_, x, cfg, sign, box, floor, trace):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if not np.all(np.isfinite(x)):
        raise ValueError("start point must be finite")
    xs, status, iters, gn, traces = _flow_many(
        field_, x, cfg, sign, box, floor, _use_mean_shift(field_, sign), trace
    )
    st = FlowStatus(int(status[0]))
    dest = xs[0] if st in (FlowStatus.CONVERGED, FlowStatus.NOT_CONVERGED) else None
    return FlowResult(dest, int(iters[0]), st, float(gn[0]), traces[0] if trace else None)


def ascend(field_, x, cfg: FlowConfig, box=None, trace: bool = False) -> FlowResult:
    """Follow the ascent flow from ``x``.

    Fields exposing ``mean_shift`` use the exact mean-shift fixed-point
    iteration; others take gradient steps with step-size backtracking so the
    field value never decreases.
    """
    return _single(field_, x, cfg, +1, box, None, trace)


def descend(field_, x, cfg: FlowConfig, box=None, floor="auto", trace: bool = False) -> FlowResult:
    """Follow the descent flow from ``x``.

    ``floor="auto"`` uses :func:`default_floor` when the field carries a
    sample; ``None`` disables the low-density check.
    """
    if isinstance(floor, str):
        floor = default_floor(field_) if hasattr(field_, "sample") else None
    return _single(field_, x, cfg, -1, box, floor, trace)


def merge_points(points: np.ndarray, radius: float) -> np.ndarray:
    """Single-linkage components of ``points`` at ``radius``.

    Returns a component label per row; labels are numbered by first
    appearance so the result only depends on input order.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m = len(pts)
    if m == 0:
        return np.zeros(0, dtype=int)
    # Points in the same small bucket are certainly linked; collapse them first.
    eps = radius * 1e-3 / np.sqrt(pts.shape[1])
    keys = np.floor(pts / eps).astype(np.int64)
    _, first, inv = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    reps = pts[first]
    pairs = cKDTree(reps).query_pairs(radius, output_type="ndarray")
    k = len(reps)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k))
    _, comp = connected_components(graph, directed=False)
    raw = comp[inv]
    _, order = np.unique(raw, return_index=True)
    relabel = np.empty(raw.max() + 1, dtype=int)
    relabel[raw[np.sort(order)]] = np.arange(len(order))
    return relabel[raw]


def _cluster(points, values, radius, prefer_high):
    """Merge points and choose the highest (or lowest) valued member per group."""
    labels = merge_points(points, radius)
    reps = []
    for c in range(labels.max() + 1 if len(labels) else 0):
        members = np.flatnonzero(labels == c)
        v = values[members]
        j = members[np.argmax(v) if prefer_high else np.argmin(v)]
        reps.append(CriticalPoint(points[j].copy(), float(values[j])))
    return reps, labels


def _sorted_critical(points: list[CriticalPoint], high_first: bool):
    def key(c):
        return ((-c.value if high_first else c.value),) + tuple(c.location)

    return sorted(points, key=key)


def find_critical_set(field_, seeds, cfg: FlowConfig, box=None, floor="auto") -> CriticalSet:
    """Ascend and descend from every seed, then merge destinations.

    Modes are ordered by decreasing value, minima by increasing value.
    """
    seeds = np.atleast_2d(np.asarray(seeds, dtype=float))
    if seeds.size == 0:
        raise ValueError("need at least one seed")
    if isinstance(floor, str):
        floor = default_floor(field_) if hasattr(field_, "sample") else None
    # duplicate seeds give duplicate flows; drop them up front
    seeds = np.unique(seeds, axis=0)
    up, st_up, _ = ascend_many(field_, seeds, cfg, box)
    down, st_down, _ = descend_many(field_, seeds, cfg, box, floor)
    ok_up = st_up == FlowStatus.CONVERGED
    ok_down = st_down == FlowStatus.CONVERGED
    if not ok_up.any() and not ok_down.any():
        raise EmptyCriticalSetError("no flow converged")
    modes = minima = []
    if ok_up.any():
        pts = up[ok_up]
        modes, _ = _cluster(pts, np.atleast_1d(field_.value(pts)), cfg.merge_radius, True)
    if ok_down.any():
        pts = down[ok_down]
        minima, _ = _cluster(pts, np.atleast_1d(field_.value(pts)), cfg.merge_radius, False)
    return CriticalSet(
        _sorted_critical(modes, True), _sorted_critical(minima, False), cfg.merge_radius
    )
