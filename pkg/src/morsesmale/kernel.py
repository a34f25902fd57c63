"""Gaussian kernels, kernel density estimation and Nadaraya-Watson regression.

All fields use a single scalar bandwidth ``h`` applied to coordinates that are
divided by a per-coordinate ``scale`` (usually the sample standard deviation).
With ``scale`` equal to ones this is the textbook isotropic estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

__all__ = [
    "KernelSpec",
    "Sample",
    "KdeField",
    "KernelRegressionField",
    "FarFromDataError",
    "kernel_value",
    "silverman_bandwidth",
    "standardization_scale",
    "domain_box",
]

# Number of (query, atom) pairs evaluated per block.
_BLOCK = 1 << 21
UNDERFLOW_FLOOR = 1e-300


class FarFromDataError(ValueError):
    """Raised when a kernel regression query has (numerically) zero weight."""

    def __init__(self, distance: float):
        self.distance = float(distance)
        super().__init__(
            f"query is too far from the data: nearest sample point at distance {self.distance:.6g}"
        )


@dataclass(frozen=True)
class KernelSpec:
    family: str = "gaussian"
    dim: int = 1

    def __post_init__(self):
        if self.family != "gaussian":
            raise ValueError(f"unsupported kernel family {self.family!r}")
        if self.dim < 1:
            raise ValueError("kernel dimension must be positive")

    @property
    def norm_const(self) -> float:
        return (2.0 * math.pi) ** (-self.dim / 2.0)


def kernel_value(spec: KernelSpec, u) -> float:
    """Standard Gaussian kernel ``(2 pi)^(-d/2) exp(-|u|^2 / 2)``."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != spec.dim:
        raise ValueError(f"expected a {spec.dim}-vector, got {u.size} entries")
    if not np.all(np.isfinite(u)):
        raise ValueError("kernel argument must be finite")
    return spec.norm_const * math.exp(-0.5 * float(u @ u))


@dataclass(frozen=True)
class Sample:
    """Points (n x d) and an optional response vector."""

    points: np.ndarray
    response: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("sample points must be a non-empty n x d matrix")
        if not np.all(np.isfinite(pts)):
            raise ValueError("sample points must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.response is not None:
            y = np.asarray(self.response, dtype=float).reshape(-1)
            if y.size != pts.shape[0]:
                raise ValueError(f"response has {y.size} entries for {pts.shape[0]} points")
            if not np.all(np.isfinite(y)):
                raise ValueError("response must be finite")
            y.setflags(write=False)
            object.__setattr__(self, "response", y)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def _as_points(points) -> np.ndarray:
    if isinstance(points, Sample):
        return points.points
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    return pts


def standardization_scale(points) -> np.ndarray:
    """Per-coordinate sample standard deviation (ddof=1)."""
    pts = _as_points(points)
    if pts.shape[0] < 2:
        raise ValueError("need at least 2 points to standardize")
    sd = pts.std(axis=0, ddof=1)
    for j, s in enumerate(sd):
        if not s > 0:
            raise ValueError(f"coordinate {j} has zero variance")
    return sd


def silverman_bandwidth(points) -> float:
    """Normal-reference bandwidth for standardized data.

    Returns ``(4 / ((d + 2) n)) ** (1 / (d + 4))``; pair it with
    ``scale=standardization_scale(points)`` so the effective bandwidth of
    coordinate ``j`` is ``h * sd_j``.
    """
    pts = _as_points(points)
    n, d = pts.shape
    if n < 2:
        raise ValueError("Silverman's rule needs at least 2 points")
    standardization_scale(pts)  # raises on degenerate coordinates
    return (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def domain_box(points, pad) -> np.ndarray:
    """Bounding box of ``points`` inflated by ``pad`` (scalar or per-coordinate).

    Returns a ``(2, d)`` array of lower and upper corners.
    """
    pts = _as_points(points)
    pad = np.broadcast_to(np.asarray(pad, dtype=float), (pts.shape[1],))
    return np.vstack([pts.min(axis=0) - pad, pts.max(axis=0) + pad])


def _query(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if d == 1 and x.shape[1] != 1 and single:
        x = x.reshape(-1, 1)
    if x.shape[1] != d:
        raise ValueError(f"query has dimension {x.shape[1]}, field has dimension {d}")
    if not np.all(np.isfinite(x)):
        raise ValueError("query points must be finite")
    return x, single


def _blocks(m: int, n: int):
    step = max(1, _BLOCK // max(n, 1))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cdist(a, b, "sqeuclidean")


@dataclass(frozen=True, eq=False)
class _KernelSmoother:
    sample: Sample
    h: float
    scale: np.ndarray | None = None
    kernel: KernelSpec = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if not isinstance(self.sample, Sample):
            object.__setattr__(self, "sample", Sample(self.sample))
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError(f"bandwidth must be positive, got {self.h!r}")
        d = self.sample.dim
        scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=float).reshape(-1)
        if scale.size != d or not np.all(scale > 0):
            raise ValueError("scale must be a positive d-vector")
        scale.setflags(write=False)
        object.__setattr__(self, "scale", scale)
        if self.kernel is None:
            object.__setattr__(self, "kernel", KernelSpec("gaussian", d))
        elif self.kernel.dim != d:
            raise ValueError("kernel dimension does not match the sample")
        bw = self.h * scale
        object.__setattr__(self, "_bw", bw)
        object.__setattr__(self, "_atoms", self.sample.points / bw)

    @property
    def dim(self) -> int:
        return self.sample.dim

    @property
    def bandwidths(self) -> np.ndarray:
        """Effective per-coordinate bandwidths ``h * scale``."""
        return self._bw

    @property
    def bandwidth(self) -> float:
        """Geometric mean of the effective bandwidths; sets flow length scales."""
        return float(np.exp(np.mean(np.log(self._bw))))

    def domain_box(self, pad: float = 3.0) -> np.ndarray:
        return domain_box(self.sample.points, pad * self._bw)

    @classmethod
    def standardized(cls, sample, h="silverman", **kw):
        """Build with ``scale`` = per-coordinate sd; ``h`` numeric or ``"silverman"``."""
        if not isinstance(sample, Sample):
            sample = Sample(sample)
        scale = standardization_scale(sample.points)
        if isinstance(h, str):
            if h != "silverman":
                raise ValueError(f"unknown bandwidth rule {h!r}")
            h = silverman_bandwidth(sample.points)
        return cls(sample, float(h), scale=scale, **kw)


class KdeField(_KernelSmoother):
    """Gaussian kernel density estimate with analytic gradient."""

    def _norm(self) -> float:
        return self.kernel.norm_const / (self.sample.n * float(np.prod(self._bw)))

    def value(self, x):
        x, single = _query(x, self.dim)
        u = x / self._bw
        out = np.empty(len(x))
        for sl in _blocks(len(x), self.sample.n):
            out[sl] = np.exp(-0.5 * _sqdist(u[sl], self._atoms)).sum(1)
        out *= self._norm()
        return out[0] if single else out

    def gradient(self, x):
        x, single = _query(x, self.dim)
        u = x / self._bw
        out = np.empty_like(x)
        for sl in _blocks(len(x), self.sample.n):
            w = np.exp(-0.5 * _sqdist(u[sl], self._atoms))
            # sum_i w_i (X_i - x) / bw^2
            out[sl] = (w @ self._atoms - w.sum(1)[:, None] * u[sl]) / self._bw
        out *= self._norm()
        return out[0] if single else out

    def support(self, x):
        return self.value(x)

    def mean_shift(self, x) -> np.ndarray:
        """One mean-shift update ``sum_i w_i X_i / sum_i w_i`` for each row of ``x``.

        Weights are shifted by the smallest squared distance so the update is
        defined even where every kernel value underflows.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        u = x / self._bw
        out = np.empty_like(x)
        for sl in _blocks(len(x), self.sample.n):
            d2 = _sqdist(u[sl], self._atoms)
            w = np.exp(-0.5 * (d2 - d2.min(1, keepdims=True)))
            out[sl] = (w @ self.sample.points) / w.sum(1)[:, None]
        return out


class KernelRegressionField(_KernelSmoother):
    """Nadaraya-Watson regression with a Gaussian kernel."""

    def __post_init__(self):
        super().__post_init__()
        if self.sample.response is None:
            raise ValueError("kernel regression needs a response vector")

    def _weights(self, x):
        u = x / self._bw
        d2 = _sqdist(u, self._atoms)
        dmin = d2.min(1)
        # log of the raw (unshifted) total kernel weight
        w = np.exp(-0.5 * (d2 - dmin[:, None]))
        logw = -0.5 * dmin + np.log(w.sum(1)) + math.log(self.kernel.norm_const)
        bad = logw < math.log(UNDERFLOW_FLOOR)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            dist = cKDTree(self.sample.points).query(x[i])[0]
            raise FarFromDataError(dist)
        return u, w

    def value(self, x):
        x, single = _query(x, self.dim)
        out = np.empty(len(x))
        y = self.sample.response
        for sl in _blocks(len(x), self.sample.n):
            _, w = self._weights(x[sl])
            out[sl] = (w @ y) / w.sum(1)
        return out[0] if single else out

    def gradient(self, x):
        x, single = _query(x, self.dim)
        out = np.empty_like(x)
        y = self.sample.response
        for sl in _blocks(len(x), self.sample.n):
            u, w = self._weights(x[sl])
            s = w.sum(1)
            m = (w @ y) / s
            wr = w * (y[None, :] - m[:, None])
            # sum_i w_i (Y_i - m) (X_i - x) / bw^2, normalized by sum_i w_i
            out[sl] = (wr @ self._atoms - wr.sum(1)[:, None] * u) / self._bw / s[:, None]
        return out[0] if single else out

    def covariate_density(self) -> KdeField:
        return KdeField(Sample(self.sample.points), self.h, scale=self.scale)

    def support(self, x):
        """Density of the covariates; used for low-density floors."""
        kde = self.__dict__.get("_kde")
        if kde is None:
            kde = self.covariate_density()
            object.__setattr__(self, "_kde", kde)
        return kde.value(x)
