"""Command-line front end.

Subcommands: cluster, msr, signature, tsviz, msetest, study. Artifacts go to
``--out`` (stdout by default) and a one-line summary goes to stderr. Exit
codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .clustering import mode_cluster
from .decomposition import EmptyDecompositionError, build_mesh, decompose
from .flow import EmptyCriticalSetError, FlowConfig
from .kernel import FarFromDataError, KdeField, KernelRegressionField, Sample

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
THREADS_ENV = "MORSESMALE_THREADS"


class CsvError(ValueError):
    def __init__(self, path, line, msg):
        self.line = line
        super().__init__(f"{path}:{line}: {msg}" if line else f"{path}: {msg}")


class NumericalFailure(RuntimeError):
    pass


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_csv(path, response: bool = False, response_col: int = -1, allow_nan: bool = False):
    """Read a numeric CSV into a :class:`Sample`.

    Blank lines and lines starting with ``#`` are ignored. A first row that
    is not entirely numeric is taken as a header. With ``response`` the
    column ``response_col`` becomes the response. With ``allow_nan`` the
    raw matrix is returned and ``nan`` cells are accepted (labels files).
    """
    try:
        with open(path, newline="") as fh:
            text = fh.read()
    except OSError as e:
        raise CsvError(path, 0, f"cannot read file ({e.strerror})") from None
    rows, lines = [], []
    width = None
    header_seen = False
    for lineno, rec in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not rec or all(not c.strip() for c in rec) or rec[0].lstrip().startswith("#"):
            continue
        cells = [c.strip() for c in rec]
        numeric = [_is_float(c) for c in cells]
        if not rows and not header_seen and not all(numeric):
            header_seen = True
            width = len(cells)
            continue
        if width is None:
            width = len(cells)
        if len(cells) != width:
            raise CsvError(path, lineno, f"row has {len(cells)} fields, expected {width}")
        if not all(numeric):
            bad = cells[numeric.index(False)]
            raise CsvError(path, lineno, f"non-numeric value {bad!r}")
        vals = [float(c) for c in cells]
        if not allow_nan and not all(np.isfinite(vals)):
            raise CsvError(path, lineno, "non-finite value")
        rows.append(vals)
        lines.append(lineno)
    if not rows:
        raise CsvError(path, 0, "no data rows")
    A = np.array(rows)
    if allow_nan:
        return A
    if response:
        if A.shape[1] < 2:
            raise CsvError(path, lines[0], "need at least one covariate column and a response")
        col = response_col % A.shape[1]
        y = A[:, col]
        X = np.delete(A, col, axis=1)
        return Sample(X, y)
    return Sample(A)


@dataclass
class RunConfig:
    subcommand: str
    inputs: list[str]
    h: str = "silverman"
    mesh: str = "lattice"
    resolution: int | None = None
    k: int | None = None
    floor_frac: float = 0.05
    alpha: float = 0.05
    n_perm: int = 199
    n_boot: int = 200
    seed: int = 0
    out: str | None = None
    format: str = "json"
    threads: int = 1
    extra: dict = field(default_factory=dict)

    def bandwidth(self):
        if self.h == "silverman":
            return "silverman"
        try:
            h = float(self.h)
        except ValueError:
            raise ValueError(f"--h must be a positive number or 'silverman', got {self.h!r}") from None
        if not (np.isfinite(h) and h > 0):
            raise ValueError("--h must be positive")
        return h

    def validate(self):
        if not 0 <= self.floor_frac < 1:
            raise ValueError("--floor-frac must lie in [0, 1)")
        if not 0 < self.alpha < 1:
            raise ValueError("--alpha must lie in (0, 1)")
        if self.n_perm < 19:
            raise ValueError("--n-perm must be at least 19")
        if self.n_boot < 1:
            raise ValueError("--n-boot must be at least 1")
        if self.threads < 1:
            raise ValueError("--threads must be at least 1")
        if self.resolution is not None and self.resolution < 2:
            raise ValueError("--resolution must be at least 2")
        if self.mesh not in ("lattice", "knn"):
            raise ValueError("--mesh must be 'lattice' or 'knn'")
        self.bandwidth()

    def recorded(self) -> dict:
        d = asdict(self)
        # neither the worker count nor the output location changes results
        d.pop("threads")
        d.pop("out")
        return d


def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.bool_):
            return bool(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"cannot serialize {type(o).__name__}")

    return json.dumps(obj, sort_keys=True, indent=1, default=default) + "\n"


def _envelope(cfg: RunConfig, schema: str, payload: dict) -> dict:
    return {"schema": schema, "version": __version__, "seed": cfg.seed, "config": cfg.recorded(),
            "result": payload}


def _comment_header(cfg: RunConfig, schema: str) -> str:
    return (f"# schema={schema} version={__version__} seed={cfg.seed}\n"
            f"# config={json.dumps(cfg.recorded(), sort_keys=True)}\n")


def _emit(cfg: RunConfig, text: str, suffix: str | None = None):
    if cfg.out is None and suffix is None:
        sys.stdout.write(text)
        return
    path = cfg.out if suffix is None else (cfg.out or "morsesmale") + suffix
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _mesh_for(cfg: RunConfig, field_, points):
    if cfg.mesh == "lattice":
        return build_mesh(box=field_.domain_box(3.0), kind="lattice", resolution=cfg.resolution)
    return build_mesh(points, kind="knn", k=cfg.k)


def run_cluster(cfg: RunConfig) -> str:
    s = load_csv(cfg.inputs[0])
    ca = mode_cluster(s, cfg.bandwidth())
    if cfg.format == "json":
        _emit(cfg, _json(_envelope(cfg, "cluster-v1", {
            "labels": ca.labels.tolist(), "modes": ca.mode_locations.tolist(),
            "n_clusters": ca.n_clusters, "n_unassigned": ca.n_unassigned, "meta": ca.meta})))
    else:
        d = s.dim
        lines = [_comment_header(cfg, "cluster-labels-v1"),
                 ",".join(["index", "label"] + [f"mode_{j + 1}" for j in range(d)]) + "\n"]
        for i, v in enumerate(ca.labels):
            # unassigned points have no mode
            coords = ca.mode_locations[v] if v >= 0 else np.full(d, np.nan)
            lines.append(",".join([str(i), str(int(v))] + [repr(float(c)) for c in coords]) + "\n")
        _emit(cfg, "".join(lines))
    return f"cluster: n={s.n} modes={ca.n_clusters} unassigned={ca.n_unassigned}"


def run_msr(cfg: RunConfig) -> str:
    from .msr import fit_msr, msr_predict

    s = load_csv(cfg.inputs[0], response=True, response_col=cfg.extra.get("response_col", -1))
    model = fit_msr(s, cfg.bandwidth(), mesh_kind=cfg.mesh, resolution=cfg.resolution, k=cfg.k,
                    floor_frac=cfg.floor_frac)
    _emit(cfg, _json(_envelope(cfg, "msr-v1", model.to_dict())))
    predict = cfg.extra.get("predict")
    if predict:
        q = load_csv(predict).points
        yhat = msr_predict(model, q)
        lines = [_comment_header(cfg, "msr-predictions-v1"), "prediction\n"]
        lines += [f"{float(v)!r}\n" for v in np.atleast_1d(yhat)]
        _emit(cfg, "".join(lines), suffix=".pred.csv")
    return f"msr: n={s.n} cells={model.n_cells} fallback={int(model.fallback.sum())}"


def run_signature(cfg: RunConfig) -> str:
    from .signature import build_signature_graph

    kind = cfg.extra.get("field", "kde")
    s = load_csv(cfg.inputs[0], response=(kind == "regression"))
    h = cfg.bandwidth()
    f = (KernelRegressionField if kind == "regression" else KdeField).standardized(s, h)
    mesh = _mesh_for(cfg, f, s.points)
    dec = decompose(f, mesh, FlowConfig.for_bandwidth(f.bandwidth), floor_frac=cfg.floor_frac)
    g = build_signature_graph(dec, include_diverged=not cfg.extra.get("drop_diverged", False))
    if cfg.format == "dot":
        _emit(cfg, f"// schema=mss-v1 version={__version__} seed={cfg.seed}\n"
                   f"// config={json.dumps(cfg.recorded(), sort_keys=True)}\n" + g.to_dot())
    else:
        _emit(cfg, _json(_envelope(cfg, "mss-v1", g.to_dict())))
    return f"signature: nodes={len(g.nodes)} edges={len(g.edges)}"


def run_tsviz(cfg: RunConfig) -> str:
    from .twosample import twosample_viz

    X, Y = load_csv(cfg.inputs[0]), load_csv(cfg.inputs[1])
    lam = cfg.extra.get("lam")
    rep = twosample_viz(X, Y, cfg.bandwidth(), lam=lam, r0=cfg.extra.get("r0", 1.0),
                        mesh_kind=cfg.mesh, resolution=cfg.resolution, k=cfg.k,
                        floor_frac=cfg.floor_frac, n_boot=cfg.n_boot, seed=cfg.seed)
    _emit(cfg, _json(_envelope(cfg, "tsviz-v1", rep.to_dict())))
    return f"tsviz: cells={len(rep.cells)} lambda={rep.lam:.6g}"


def run_msetest(cfg: RunConfig) -> str:
    from .twosample import mse_test

    X, Y = load_csv(cfg.inputs[0]), load_csv(cfg.inputs[1])
    rep = mse_test(X, Y, cfg.bandwidth(), alpha=cfg.alpha, n_perm=cfg.n_perm, seed=cfg.seed,
                   mesh_kind=cfg.mesh, resolution=cfg.resolution, k=cfg.k,
                   floor_frac=cfg.floor_frac, min_cell=cfg.extra.get("min_cell", 10))
    _emit(cfg, _json(_envelope(cfg, "mse-v1", rep.to_dict())))
    return f"msetest: L={rep.L} reject={rep.reject} threshold={rep.threshold:.6g}"


def _sizes(text):
    if not text:
        return None
    try:
        ns = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValueError(f"--ns must be comma-separated integers, got {text!r}") from None
    if not ns or min(ns) < 4:
        raise ValueError("--ns sizes must be at least 4")
    return ns


def run_study(cfg: RunConfig) -> str:
    from .simulation import fig6_mixture, power_study, stability_study

    preset = cfg.inputs[0]
    trials = cfg.extra.get("trials")
    ns = _sizes(cfg.extra.get("ns"))
    if preset == "fig6":
        Ns = ns or ([500, 1000] if cfg.extra.get("full") else [500])
        res = power_study(fig6_mixture(), 2, [0.2, 0.3, 0.4, 0.5], Ns, trials=trials or 100,
                          seed=cfg.seed, alpha=cfg.alpha, n_perm=cfg.n_perm, workers=cfg.threads)
    elif preset == "stability":
        res = stability_study(ns=ns or (500, 2000, 8000), trials=trials or 10, seed=cfg.seed,
                              workers=cfg.threads)
    else:
        raise ValueError(f"unknown study preset {preset!r}; choose 'fig6' or 'stability'")
    if cfg.format == "csv":
        _emit(cfg, _comment_header(cfg, "experiment-v1") + res.to_csv())
    else:
        _emit(cfg, _json(_envelope(cfg, "experiment-v1", res.to_dict())))
    return f"study {preset}: {len(res.rows)} configurations"


COMMANDS = {
    "cluster": run_cluster, "msr": run_msr, "signature": run_signature,
    "tsviz": run_tsviz, "msetest": run_msetest, "study": run_study,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morsesmale", description="Morse-Smale tools for densities, "
                                "regression and two-sample comparison.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--h", default="silverman", help="bandwidth on standardized scale or 'silverman'")
    common.add_argument("--mesh", default="lattice", choices=["lattice", "knn"])
    common.add_argument("--resolution", type=int, default=None, help="lattice nodes per axis")
    common.add_argument("--k", type=int, default=None, help="neighbours for the knn mesh")
    common.add_argument("--floor-frac", type=float, default=0.05)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker processes (default ${THREADS_ENV} or 1)")
    common.add_argument("--out", default=None, help="output path (default stdout)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    c = sub.add_parser("cluster", parents=[common], help="mode clustering")
    c.add_argument("data")
    c.add_argument("--format", default="csv", choices=["csv", "json"])

    m = sub.add_parser("msr", parents=[common], help="Morse-Smale regression")
    m.add_argument("data")
    m.add_argument("--response-col", type=int, default=-1)
    m.add_argument("--predict", default=None, help="CSV of query points")

    s = sub.add_parser("signature", parents=[common], help="signature graph")
    s.add_argument("data")
    s.add_argument("--field", default="kde", choices=["kde", "regression"])
    s.add_argument("--drop-diverged", action="store_true")
    s.add_argument("--format", default="json", choices=["json", "dot"])

    t = sub.add_parser("tsviz", parents=[common], help="two-sample visualization")
    t.add_argument("x")
    t.add_argument("y")
    t.add_argument("--lambda", dest="lam", type=float, default=None)
    t.add_argument("--r0", type=float, default=1.0)
    t.add_argument("--n-boot", type=int, default=200)

    e = sub.add_parser("msetest", parents=[common], help="cell-wise energy test")
    e.add_argument("x")
    e.add_argument("y")
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--n-perm", type=int, default=199)
    e.add_argument("--min-cell", type=int, default=10)

    y = sub.add_parser("study", parents=[common], help="simulation presets")
    y.add_argument("preset", choices=["fig6", "stability"])
    y.add_argument("--trials", type=int, default=None)
    y.add_argument("--alpha", type=float, default=0.05)
    y.add_argument("--n-perm", type=int, default=199)
    y.add_argument("--full", action="store_true", help="include N=1000")
    y.add_argument("--ns", default=None, help="comma-separated sample sizes overriding the preset")
    y.add_argument("--format", default="json", choices=["json", "csv"])
    return p


def _config(ns) -> RunConfig:
    threads = ns.threads if ns.threads is not None else int(os.environ.get(THREADS_ENV, "1") or 1)
    if ns.subcommand in ("cluster", "msr", "signature"):
        inputs = [ns.data]
    elif ns.subcommand in ("tsviz", "msetest"):
        inputs = [ns.x, ns.y]
    else:
        inputs = [ns.preset]
    extra = {}
    for key in ("response_col", "predict", "field", "drop_diverged", "lam", "r0", "min_cell",
                "trials", "full", "ns"):
        if hasattr(ns, key):
            extra[key] = getattr(ns, key)
    return RunConfig(
        subcommand=ns.subcommand, inputs=inputs, h=ns.h, mesh=ns.mesh, resolution=ns.resolution,
        k=ns.k, floor_frac=ns.floor_frac, alpha=getattr(ns, "alpha", 0.05),
        n_perm=getattr(ns, "n_perm", 199), n_boot=getattr(ns, "n_boot", 200), seed=ns.seed,
        out=ns.out, format=getattr(ns, "format", "json"), threads=threads, extra=extra,
    )


def run(cfg: RunConfig) -> int:
    try:
        cfg.validate()
        summary = COMMANDS[cfg.subcommand](cfg)
    except (FarFromDataError, EmptyDecompositionError, EmptyCriticalSetError,
            np.linalg.LinAlgError, FloatingPointError, NumericalFailure) as e:
        print(f"error (numerical): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, OSError) as e:
        print(f"error (input): {e}", file=sys.stderr)
        return EXIT_INPUT
    print(summary, file=sys.stderr)
    return EXIT_OK


def main(argv=None) -> int:
    ns = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(ns)
    except ValueError as e:
        print(f"error (input): {e}", file=sys.stderr)
        return EXIT_INPUT
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
