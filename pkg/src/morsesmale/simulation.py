"""Synthetic mixtures and the desk-scale experiment drivers.

Every trial draws from its own random stream keyed by ``(seed, tag, ...)``,
so a trial's data do not depend on how many trials run or on the number of
worker processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from ._rng import rng_for
from .clustering import mode_cluster, rand_index
from .decomposition import boundary_nodes, decompose, hausdorff, lattice_mesh
from .flow import FlowConfig
from .kernel import KdeField, Sample

__all__ = [
    "MixtureSpec",
    "ExperimentResult",
    "sample_mixture",
    "mixture_density",
    "fig6_mixture",
    "mirror_mixture",
    "power_study",
    "stability_study",
]

log = logging.getLogger(__name__)

_TAG_MIX, _TAG_POWER, _TAG_STAB = 21, 22, 23


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture: per component a mean, a sigma and a weight."""

    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.means, dtype=float))
        s = np.asarray(self.sigmas, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(m) == len(s) == len(w)) or len(w) == 0:
            raise ValueError("means, sigmas and weights need one entry per component")
        if np.any(s <= 0):
            raise ValueError("sigmas must be positive")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")
        for name, a in (("means", m), ("sigmas", s), ("weights", w)):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def from_components(cls, components) -> "MixtureSpec":
        means, sigmas, weights = zip(*components)
        return cls(np.array(means, dtype=float), np.array(sigmas), np.array(weights))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def with_sigma(self, index: int, sigma: float) -> "MixtureSpec":
        s = self.sigmas.copy()
        s[index] = sigma
        return MixtureSpec(self.means, s, self.weights)

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "sigmas": self.sigmas.tolist(),
                "weights": self.weights.tolist()}


def fig6_mixture(sigma: float = 0.2) -> MixtureSpec:
    """Four unit-square corners C1..C4 with weights (0.2, 0.5, 0.2, 0.1)."""
    means = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return MixtureSpec(means, np.full(4, sigma), np.array([0.2, 0.5, 0.2, 0.1]))


def mirror_mixture(separation: float = 1.5, sigma: float = 0.5, dim: int = 2) -> MixtureSpec:
    """Equal-weight pair at ``(+-separation, 0, ...)``; the true mode boundary is ``x_1 = 0``."""
    means = np.zeros((2, dim))
    means[:, 0] = [-separation, separation]
    return MixtureSpec(means, np.full(2, sigma), np.array([0.5, 0.5]))


def sample_mixture(spec: MixtureSpec, n: int, seed: int = 0, stream=(), return_labels: bool = False):
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = rng_for(seed, _TAG_MIX, *stream)
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    pts = spec.means[comp] + spec.sigmas[comp, None] * rng.standard_normal((n, spec.dim))
    s = Sample(pts)
    return (s, comp) if return_labels else s


def mixture_density(spec: MixtureSpec, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = spec.dim
    out = np.zeros(len(x))
    for mu, s, w in zip(spec.means, spec.sigmas, spec.weights):
        r2 = np.sum((x - mu) ** 2, axis=1) / s ** 2
        out += w * np.exp(-0.5 * r2) / ((2 * np.pi) ** (d / 2) * s ** d)
    return out


@dataclass
class ExperimentResult:
    study: str
    seed: int
    config: dict
    rows: list[dict]
    trials: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"schema": "experiment-v1", "version": __version__, "study": self.study,
                "seed": self.seed, "config": self.config, "rows": self.rows, "trials": self.trials}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        keys = list(self.rows[0])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(keys)
        for r in self.rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
        return buf.getvalue()


def _map(fn, jobs, workers: int | None):
    workers = workers or 1
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def _power_trial(job):
    from .twosample import energy_permutation_test, mse_test

    base, alt, N, seed, key, alpha, n_perm, mse_kw = job
    X = sample_mixture(base, N, seed, stream=(_TAG_POWER, 0, *key))
    Y = sample_mixture(alt, N, seed, stream=(_TAG_POWER, 1, *key))
    trial_seed = int(rng_for(seed, _TAG_POWER, 2, *key).integers(2 ** 31))
    r = mse_test(X, Y, alpha=alpha, n_perm=n_perm, seed=trial_seed, **mse_kw)
    e = energy_permutation_test(X, Y, n_perm, seed=trial_seed)
    return {"mse_reject": bool(r.reject), "energy_reject": bool(e.p_value < alpha),
            "L": r.L, "min_p": float(r.p_values().min()) if r.L else None,
            "energy_p": e.p_value, "trial_seed": trial_seed}


def power_study(base: MixtureSpec, perturb_index: int, sigmas, Ns, trials: int = 100, seed: int = 0,
                alpha: float = 0.05, n_perm: int = 199, workers: int | None = None,
                mse_kw: dict | None = None) -> ExperimentResult:
    """Rejection rates of the cell-wise energy test and the plain energy test.

    For each ``(sigma, N)`` the first sample comes from ``base`` and the
    second from ``base`` with component ``perturb_index`` given sigma
    ``sigma``. Trial ``t`` of configuration ``(i, N)`` uses the stream key
    ``(i, N, t)``.
    """
    if trials < 20:
        raise ValueError("trials must be at least 20")
    mse_kw = dict(mse_kw or {})
    jobs, where = [], []
    for i, s in enumerate(sigmas):
        alt = base.with_sigma(perturb_index, float(s))
        for N in Ns:
            for t in range(trials):
                jobs.append((base, alt, int(N), seed, (i, int(N), t), alpha, n_perm, mse_kw))
                where.append((float(s), int(N)))
    out = _map(_power_trial, jobs, workers)
    rows = []
    for s in sigmas:
        for N in Ns:
            res = [o for o, w in zip(out, where) if w == (float(s), int(N))]
            rows.append({"sigma": float(s), "N": int(N), "trials": len(res),
                         "mse_rate": float(np.mean([r["mse_reject"] for r in res])),
                         "energy_rate": float(np.mean([r["energy_reject"] for r in res])),
                         "median_L": float(np.median([r["L"] for r in res]))})
    cfg = {"base": base.to_dict(), "perturb_index": perturb_index, "sigmas": [float(s) for s in sigmas],
           "Ns": [int(N) for N in Ns], "trials": trials, "alpha": alpha, "n_perm": n_perm,
           "mse": mse_kw}
    trial_rows = [dict(o, sigma=w[0], N=w[1]) for o, w in zip(out, where)]
    return ExperimentResult("power", int(seed), cfg, rows, trial_rows)


def _mirror_box(spec: MixtureSpec) -> np.ndarray:
    pad = 4.0 * spec.sigmas.max()
    return np.vstack([spec.means.min(0) - pad, spec.means.max(0) + pad])


def true_bisector(spec: MixtureSpec, mesh, floor_frac: float) -> np.ndarray:
    """Points of the plane ``x_1 = 0`` at the mesh's other coordinates, above the floor."""
    others = np.unique(mesh.nodes[:, 1:], axis=0)
    pts = np.hstack([np.zeros((len(others), 1)), others])
    dens = mixture_density(spec, pts)
    peak = mixture_density(spec, mesh.nodes).max()
    return pts[dens >= floor_frac * peak]


def _stability_trial(job):
    spec, n, seed, key, metrics, resolution, floor_frac = job
    s = sample_mixture(spec, n, seed, stream=(_TAG_STAB, *key))
    row = {"n": n, "trial": key[-1]}
    oracle = (s.points[:, 0] > 0).astype(int)
    if "hausdorff" in metrics:
        kde = KdeField.standardized(s)
        mesh = lattice_mesh(_mirror_box(spec), resolution)
        dec = decompose(kde, mesh, FlowConfig.for_bandwidth(kde.bandwidth), floor_frac=floor_frac)
        b = boundary_nodes(dec, "mode")
        # compare both sets on the same compact region {p >= floor}
        peak = mixture_density(spec, mesh.nodes).max()
        b = b[mixture_density(spec, b) >= floor_frac * peak]
        truth = true_bisector(spec, mesh, floor_frac)
        row["n_modes"] = len(dec.critical.modes)
        row["hausdorff"] = hausdorff(b, truth) if len(b) else float("inf")
    if "rand" in metrics:
        ca = mode_cluster(s)
        row["n_clusters"] = ca.n_clusters
        row["rand"] = rand_index(ca.labels, oracle) if ca.n_unassigned < n - 1 else 0.0
    return row


def stability_study(spec: MixtureSpec | None = None, ns=(500, 2000, 8000), trials: int = 10,
                    seed: int = 0, metrics=("hausdorff", "rand"), resolution: int = 64,
                    floor_frac: float = 0.005, workers: int | None = None) -> ExperimentResult:
    """Boundary and clustering accuracy on a mirror-symmetric mixture.

    Per ``n`` reports the median Hausdorff distance between the estimated
    mode boundary (mesh edges joining different mode basins) and the true
    bisector, and the median Rand index of mode clustering against the sign
    of the first coordinate.
    """
    spec = mirror_mixture() if spec is None else spec
    jobs = [(spec, int(n), seed, (int(n), t), tuple(metrics), resolution, floor_frac)
            for n in ns for t in range(trials)]
    out = _map(_stability_trial, jobs, workers)
    rows = []
    for n in ns:
        res = [o for o in out if o["n"] == int(n)]
        row = {"n": int(n), "trials": len(res)}
        if "hausdorff" in metrics:
            row["median_hausdorff"] = float(np.median([r["hausdorff"] for r in res]))
        if "rand" in metrics:
            row["median_rand"] = float(np.median([r["rand"] for r in res]))
        rows.append(row)
    cfg = {"mixture": spec.to_dict(), "ns": [int(n) for n in ns], "trials": trials,
           "metrics": list(metrics), "resolution": resolution, "floor_frac": floor_frac}
    return ExperimentResult("stability", int(seed), cfg, rows, out)


def default_workers() -> int:
    env = os.environ.get("MORSESMALE_THREADS")
    return max(1, int(env)) if env else 1
