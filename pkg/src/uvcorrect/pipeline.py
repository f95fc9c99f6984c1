"""Configured runs: correct, filter sweep, cluster, score; and benchmark
grids of designs x methods x seeds on generated data.

A run directory holds its outputs and ``manifest.json``. The manifest keeps
the configuration as given plus every ``"auto"`` resolution with its
formula inputs. Resolution is deterministic, so feeding the manifest back
as a config reproduces the run, manifest included, byte for byte.
"""

import json
import logging
import os
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy

from .correction import (
    IterationConfig,
    calibrate_lambda,
    correct_mean_center,
    correct_naive_fixed,
    correct_random_alpha,
    correct_ratio,
    correct_replicate,
    default_nu,
    iterate_correction,
)
from .data import (
    REPLICATE_FACTOR,
    TRUTH_FACTOR,
    DataError,
    ExpressionMatrix,
    atomic_write_text,
    build_differences,
    load_annotations,
    load_controls,
    load_matrix,
    write_matrix,
)
from .estimation import (
    DegenerateError,
    combine_w,
    default_k,
    estimate_w_control_genes,
    estimate_w_replicates,
    save_uvmodel,
)
from .evaluation import clustering_distance, emit_plot_data, pca_plot_coords, variance_filter
from .linalg import QuadraticNormSpec
from .synthgen import GeneratorSpec, generate
from .unsupervised import Partition, SparseDictionaryEstimator, kmeans, kmeans_sigma_rowwise

log = logging.getLogger(__name__)

__version__ = "0.1.0"

METHODS = ("none", "mean-center", "ratio", "naive-ruv2", "replicate", "random-alpha", "combined")
W_METHODS = ("naive-ruv2", "replicate", "random-alpha", "combined")
WORKERS_ENV = "UVCORRECT_WORKERS"
MIN_FILTER_SIZE = 50
BENCHMARK_RESTARTS = 200


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class PipelineError(RuntimeError):
    """A stage failed; ``cause`` keeps the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def exit_code_for(exc):
    """0 success, 2 config error, 3 data error, 4 numerical failure."""
    if isinstance(exc, PipelineError):
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (DegenerateError, np.linalg.LinAlgError, FloatingPointError)):
        return 4
    if isinstance(exc, (DataError, OSError)):
        return 3
    return 4


def _is_auto(v):
    return isinstance(v, str) and v == "auto"


def _auto_or(v, kind, name, minimum):
    if _is_auto(v):
        return v
    if isinstance(v, bool) or (kind is int and isinstance(v, float) and not v.is_integer()):
        raise ConfigError(f"{name} must be 'auto' or a {kind.__name__}, got {v!r}")
    try:
        x = kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be 'auto' or a {kind.__name__}, got {v!r}") from None
    if not np.isfinite(x) or x < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {v!r}")
    return x


@dataclass(frozen=True)
class PipelineConfig:
    """One correction run.

    Exactly one input source: the three paths ``matrix``/``annotations``/
    ``controls`` (annotations and controls optional for methods that do
    not need them) or a ``generator`` mapping of :class:`GeneratorSpec`
    fields. ``k``, ``nu``, ``lam``, ``n_clusters`` and ``filter_sizes``
    accept ``"auto"``.
    """

    matrix: str = None
    annotations: str = None
    controls: str = None
    generator: dict = None
    method: str = "none"
    iterative: bool = False
    sigma_variant: bool = False
    k: object = "auto"
    nu: object = "auto"
    lam: object = "auto"
    n_clusters: object = "auto"
    restarts: int = 10
    filter_sizes: object = "auto"
    seed: int = 0
    batch_factors: tuple = ("batch",)
    scheme: str = "all-pairs"
    max_iters: int = 30
    w_refresh_period: int = 10

    def __post_init__(self):
        has_paths = self.matrix is not None
        has_gen = self.generator is not None
        if has_paths == has_gen:
            raise ConfigError("give exactly one input source: matrix paths or generator")
        if not has_paths and (self.annotations or self.controls):
            raise ConfigError("annotations/controls paths require a matrix path")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if (self.iterative or self.sigma_variant) and self.method not in W_METHODS:
            raise ConfigError(f"method {self.method!r} has no iterative or sigma variant")
        object.__setattr__(self, "k", _auto_or(self.k, int, "k", 1))
        object.__setattr__(self, "nu", _auto_or(self.nu, float, "nu", 0.0))
        object.__setattr__(self, "lam", _auto_or(self.lam, float, "lambda", 0.0))
        object.__setattr__(self, "n_clusters", _auto_or(self.n_clusters, int, "n_clusters", 1))
        if int(self.restarts) < 1:
            raise ConfigError("restarts must be >= 1")
        if int(self.max_iters) < 1 or int(self.w_refresh_period) < 1:
            raise ConfigError("max_iters and w_refresh_period must be >= 1")
        if not _is_auto(self.filter_sizes):
            try:
                sizes = tuple(int(s) for s in self.filter_sizes)
            except (TypeError, ValueError):
                raise ConfigError(f"bad filter_sizes {self.filter_sizes!r}") from None
            if not sizes or min(sizes) < 1:
                raise ConfigError("filter_sizes must be positive")
            object.__setattr__(self, "filter_sizes", sizes)
        if isinstance(self.batch_factors, str):
            object.__setattr__(self, "batch_factors", (self.batch_factors,))
        object.__setattr__(self, "batch_factors", tuple(self.batch_factors))
        if not self.batch_factors:
            raise ConfigError("batch_factors must name at least one factor")
        if self.scheme not in ("all-pairs", "vs-group-mean"):
            raise ConfigError(f"unknown difference scheme {self.scheme!r}")
        if has_gen:
            try:
                GeneratorSpec(**self.generator)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"generator: {exc}") from None

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self):
        d = asdict(self)
        d["batch_factors"] = list(self.batch_factors)
        if isinstance(self.filter_sizes, tuple):
            d["filter_sizes"] = list(self.filter_sizes)
        d["lambda"] = d.pop("lam")
        return d

    @property
    def label(self):
        parts = [self.method]
        if self.iterative:
            parts.append("iterative")
        if self.sigma_variant:
            parts.append("sigma")
        return "+".join(parts)


def parse_method(text):
    """``"replicate+iterative+sigma"`` -> ``(method, iterative, sigma)``."""
    parts = text.split("+")
    flags = set(parts[1:])
    if not flags <= {"iterative", "sigma"}:
        raise ConfigError(f"unknown method modifier in {text!r}")
    return parts[0], "iterative" in flags, "sigma" in flags


# -- stages ------------------------------------------------------------------


@dataclass
class RunState:
    y: ExpressionMatrix = None
    annotations: object = None
    controls: object = None
    resolved: dict = field(default_factory=dict)
    resolutions: list = field(default_factory=list)
    uv_model: object = None
    sigma_spec: object = None
    corrected: ExpressionMatrix = None
    partitions: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)


def _load_inputs(cfg, st):
    if cfg.generator is not None:
        ds = generate(GeneratorSpec(**cfg.generator))
        st.y, st.annotations, st.controls = ds.y, ds.annotations, ds.controls
        return
    st.y = load_matrix(cfg.matrix)
    if cfg.annotations:
        st.annotations = load_annotations(cfg.annotations)
        st.annotations.validate(st.y)
    if cfg.controls:
        st.controls = load_controls(cfg.controls, st.y)


def _note(st, name, value, **inputs):
    entry = {"name": name, "value": value, **inputs}
    st.resolutions.append(entry)
    log.info("auto %s = %r (%s)", name, value, ", ".join(f"{k}={v!r}" for k, v in inputs.items()))


def _need(st, what, method):
    if what == "annotations" and st.annotations is None:
        raise ConfigError(f"method {method!r} needs sample annotations")
    if what == "controls" and st.controls is None:
        raise ConfigError(f"method {method!r} needs a control-gene list")


def _resolve_k(cfg, st, kind, n_differences=None):
    m = st.y.shape[0]
    n_ctl = len(st.controls)
    if not _is_auto(cfg.k):
        return int(cfg.k)
    if kind == "random":
        k = min(m, n_ctl)
        _note(st, f"k_{kind}", k, formula="k = m (ridge regularized)", m=m, n_controls=n_ctl)
    else:
        k = min(default_k(m, n_differences), n_ctl if kind == "controls" else m)
        _note(st, f"k_{kind}", k, formula="round(m/4) capped by |d|", m=m,
              m_over_4=int(round(m / 4)), n_differences=n_differences)
    return k


def _replicate_model(cfg, st):
    _need(st, "annotations", cfg.method)
    _need(st, "controls", cfg.method)
    d = build_differences(st.y, st.annotations, cfg.scheme)
    k = _resolve_k(cfg, st, "replicates", len(d))
    return estimate_w_replicates(st.y, st.controls, d, min(k, len(d)))


def _build_model(cfg, st):
    if cfg.method in ("naive-ruv2", "random-alpha"):
        _need(st, "controls", cfg.method)
        kind = "controls" if cfg.method == "naive-ruv2" else "random"
        return estimate_w_control_genes(st.y, st.controls, _resolve_k(cfg, st, kind))
    if cfg.method == "replicate":
        return _replicate_model(cfg, st)
    _need(st, "controls", cfg.method)
    w2 = estimate_w_control_genes(st.y, st.controls, _resolve_k(cfg, st, "random"))
    return combine_w(w2, _replicate_model(cfg, st))


def _resolve_nu(cfg, st, model):
    if not _is_auto(cfg.nu):
        return float(cfg.nu)
    nu = default_nu(model)
    sigma1 = float(np.linalg.norm(model.w_hat, ord=2) ** 2)
    _note(st, "nu", nu, formula="sigma1(W^T W) * 1e-3", sigma1=sigma1)
    return nu


def _one_shot(cfg, st, model, nu):
    if cfg.method == "naive-ruv2":
        return correct_naive_fixed(st.y, model)
    if cfg.method == "replicate":
        return correct_replicate(st.y, model)
    return correct_random_alpha(st.y, model, nu)


def stage_correct(cfg, st):
    y = st.y
    if cfg.method == "none":
        st.corrected = y
        return
    if cfg.method == "mean-center":
        _need(st, "annotations", cfg.method)
        st.corrected = correct_mean_center(y, st.annotations, cfg.batch_factors).y_corrected
        return
    if cfg.method == "ratio":
        _need(st, "annotations", cfg.method)
        st.corrected = correct_ratio(y, st.annotations, cfg.batch_factors[0]).y_corrected
        return
    model = _build_model(cfg, st)
    st.uv_model = model
    nu = _resolve_nu(cfg, st, model)
    if cfg.method != "combined":
        # a combined model splits k between its parents; "auto" stays
        st.resolved["k"] = model.k
    st.resolved["nu"] = nu
    base = _one_shot(cfg, st, model, nu)
    if cfg.sigma_variant:
        st.sigma_spec = QuadraticNormSpec(model.w_hat, nu)
    if not cfg.iterative:
        st.corrected = base.y_corrected
        return
    # naive-ruv2 iterates with fixed alpha (least squares), the rest with ridge
    step_nu = 0.0 if cfg.method == "naive-ruv2" else nu
    p_dict = model.k

    def make(lam):
        return SparseDictionaryEstimator(p_dict, lam, seed=cfg.seed)

    it_cfg = IterationConfig(cfg.max_iters, cfg.w_refresh_period, 0.0, step_nu)
    if _is_auto(cfg.lam):
        info = {}
        lam, energy = calibrate_lambda(y, model, step_nu, base.removed_energy, make, it_cfg,
                                       y.sample_ids, info=info)
        _note(st, "lambda", lam, formula="match ||W alpha||_F of the one-shot correction",
              lambda0=info["lambda0"], bracket=info["bracket"],
              target_energy=info["target"], achieved_energy=energy)
    else:
        lam = float(cfg.lam)
    st.resolved["lambda"] = lam
    st.resolved["dictionary_rank"] = p_dict
    run_cfg = replace(it_cfg, lam=lam)
    res, _ = iterate_correction(y, model, make(lam), run_cfg, y.sample_ids)
    st.corrected = res.y_corrected


def _resolve_clusters(cfg, st):
    if not _is_auto(cfg.n_clusters):
        return int(cfg.n_clusters)
    if st.annotations is None or not st.annotations.has(TRUTH_FACTOR):
        raise ConfigError("n_clusters is 'auto' but no truth_label annotation is available")
    levels = sorted(set(st.annotations.factor(TRUTH_FACTOR, st.y.sample_ids)))
    _note(st, "n_clusters", len(levels), formula="number of truth_label levels")
    return len(levels)


def auto_filter_sizes(n, minimum=MIN_FILTER_SIZE):
    """Geometric halving from ``n`` while the size stays >= ``minimum``."""
    s = int(n)
    floor = min(s, minimum)
    sizes = [s]
    while s // 2 >= floor:
        s //= 2
        sizes.append(s)
    return tuple(sizes)


def stage_cluster(cfg, st):
    n = st.corrected.shape[1]
    k = _resolve_clusters(cfg, st)
    st.resolved["n_clusters"] = k
    if _is_auto(cfg.filter_sizes):
        sizes = auto_filter_sizes(n)
        _note(st, "filter_sizes", list(sizes), formula="halving from n", n=n,
              minimum=MIN_FILTER_SIZE)
    else:
        sizes = tuple(s for s in cfg.filter_sizes if s <= n)
        if not sizes:
            raise ConfigError(f"all filter sizes exceed the {n} available features")
    st.resolved["filter_sizes"] = list(sizes)
    for size in sizes:
        kept = variance_filter(st.corrected, size)
        if st.sigma_spec is not None:
            cols = st.y.feature_indices(kept.feature_ids)
            res = kmeans_sigma_rowwise(st.y.values[:, cols], k, st.sigma_spec, seed=cfg.seed,
                                       n_restarts=cfg.restarts)
        else:
            res = kmeans(kept.values, k, n_restarts=cfg.restarts, seed=cfg.seed)
        st.partitions[size] = res.partition


def truth_partition(ann, sample_ids):
    return Partition.from_labels(ann.factor(TRUTH_FACTOR, sample_ids))


def stage_score(cfg, st):
    if st.annotations is None or not st.annotations.has(TRUTH_FACTOR):
        return False
    truth = truth_partition(st.annotations, st.y.sample_ids)
    for size, part in st.partitions.items():
        if truth.k != part.k:
            raise ConfigError(f"n_clusters={part.k} differs from the {truth.k} truth levels")
        st.scores.append((size, clustering_distance(part, truth).value))
    return True


# -- run directory -----------------------------------------------------------


def versions():
    return {
        "uvcorrect": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def resolved_config(cfg, st):
    d = cfg.to_dict()
    for key in ("k", "nu", "n_clusters", "filter_sizes"):
        if key in st.resolved and _is_auto(d[key]):
            d[key] = st.resolved[key]
    if "lambda" in st.resolved and _is_auto(d["lambda"]):
        d["lambda"] = st.resolved["lambda"]
    return d


def write_partitions(path, sample_ids, partitions):
    sizes = sorted(partitions, reverse=True)
    lines = [",".join(["sample_id", *(f"n{s}" for s in sizes)])]
    for i, sid in enumerate(sample_ids):
        lines.append(",".join([sid, *(str(int(partitions[s].assignments[i])) for s in sizes)]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_partitions(path):
    """Inverse of :func:`write_partitions`: ``(sample_ids, {size: labels})``."""
    with open(path, encoding="utf-8") as fh:
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    header = rows[0]
    if header[0] != "sample_id" or not all(h.startswith("n") for h in header[1:]):
        raise DataError(f"{path}: not a partitions file")
    sizes = [int(h[1:]) for h in header[1:]]
    ids = [r[0] for r in rows[1:]]
    cols = {s: [int(r[j + 1]) for r in rows[1:]] for j, s in enumerate(sizes)}
    return ids, cols


def write_scores(path, scores):
    lines = ["n_genes_kept,error"]
    lines += [f"{s},{e!r}" for s, e in sorted(scores, reverse=True)]
    atomic_write_text(path, "\n".join(lines) + "\n")


STAGES = ("correct", "cluster", "score")


def run_pipeline(cfg, out, write=True, stages=STAGES):
    """Run the requested stages in order; returns the :class:`RunState`.

    Without the ``correct`` stage the input is clustered as is.

    With ``write`` the run directory ``out`` receives corrected.csv,
    partitions.csv, scores.csv and plot_data*.csv (when truth labels
    exist), uv_model.csv for W-based methods, and manifest.json. A stage
    failure writes a manifest flagged ``failed`` and raises
    :class:`PipelineError`.
    """
    st = RunState()
    out = Path(out) if out is not None else None
    written = []
    stage = "load"

    def finish(status, error=None):
        if not write:
            return
        manifest = {
            "kind": "run",
            "stages": list(stages),
            "status": status,
            "config": cfg.to_dict(),
            "resolved": resolved_config(cfg, st),
            "resolutions": st.resolutions,
            "seed": cfg.seed,
            "versions": versions(),
            "outputs": sorted(written),
        }
        if error is not None:
            manifest["failed_stage"] = stage
            manifest["error"] = f"{type(error).__name__}: {error}"
            manifest["partial_outputs"] = sorted(written)
        atomic_write_text(out / "manifest.json", _dump(manifest))

    bad = [s for s in stages if s not in STAGES]
    if bad or not stages:
        raise ConfigError(f"unknown stage(s) {bad}; choose from {', '.join(STAGES)}")
    try:
        _load_inputs(cfg, st)
        stage = "correct"
        if "correct" in stages:
            stage_correct(cfg, st)
            if write:
                write_matrix(st.corrected, out / "corrected.csv")
                written.append("corrected.csv")
                if st.uv_model is not None:
                    save_uvmodel(st.uv_model, out / "uv_model.csv", st.y.sample_ids)
                    written += ["uv_model.csv", "uv_model.csv.json"]
        else:
            st.corrected = st.y
        stage = "cluster"
        if "cluster" in stages:
            stage_cluster(cfg, st)
            if write:
                write_partitions(out / "partitions.csv", st.y.sample_ids, st.partitions)
                written.append("partitions.csv")
        stage = "score"
        if "score" in stages and st.partitions and stage_score(cfg, st) and write:
            write_scores(out / "scores.csv", st.scores)
            rows = [
                {"method": cfg.label, "n_genes_kept": s, "error": e, "seed": cfg.seed}
                for s, e in st.scores
            ]
            labels = {"truth_label": st.annotations.factor(TRUTH_FACTOR, st.y.sample_ids)}
            for f in cfg.batch_factors:
                if st.annotations.has(f):
                    labels[f] = st.annotations.factor(f, st.y.sample_ids)
            paths = emit_plot_data(rows, out / "plot_data.csv",
                                   pca=(st.y.sample_ids, pca_plot_coords(st.corrected), labels))
            written += [Path(p).name for p in paths] + ["scores.csv"]
    except ConfigError as exc:
        finish("failed", exc)
        raise
    except Exception as exc:
        finish("failed", exc)
        raise PipelineError(stage, exc) from exc
    finish("ok")
    return st


def score_partitions(partitions_path, annotations_path, out):
    """Score every column of a partitions file against ``truth_label``."""
    ids, cols = read_partitions(partitions_path)
    ann = load_annotations(annotations_path)
    if not ann.has(TRUTH_FACTOR):
        raise DataError(f"{annotations_path}: no {TRUTH_FACTOR} annotation")
    truth = truth_partition(ann, ids)
    scores = []
    for size, labels in cols.items():
        part = Partition(np.asarray(labels), max(truth.k, max(labels) + 1))
        if part.k != truth.k:
            raise DataError(f"partition n{size} has more clusters than truth levels")
        scores.append((size, clustering_distance(part, truth).value))
    write_scores(Path(out) / "scores.csv", scores)
    return scores


def load_config_document(path):
    """Read a JSON config; a run manifest is accepted and yields its
    resolved configuration."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


# -- benchmark ---------------------------------------------------------------


@dataclass(frozen=True)
class SuiteConfig:
    """Designs x methods x seeds on generated data.

    ``designs`` maps a design name to :class:`GeneratorSpec` fields (the
    seed is filled per cell). ``methods`` holds method strings such as
    ``"replicate+iterative"``. ``base`` carries shared
    :class:`PipelineConfig` fields, with ``restarts`` defaulting to
    ``BENCHMARK_RESTARTS``; ``score_size`` picks the kept-feature count
    whose error enters the summary (default: all features).
    """

    designs: dict
    methods: tuple
    seeds: tuple
    base: dict = field(default_factory=dict)
    score_size: int = None

    def __post_init__(self):
        if not self.designs or not self.methods or not self.seeds:
            raise ConfigError("suite needs at least one design, method and seed")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        for name, spec in self.designs.items():
            if "seed" in spec:
                raise ConfigError(f"design {name!r}: seeds come from the suite, not the design")
        for text in self.methods:
            method, _, _ = parse_method(text)
            if method not in METHODS:
                raise ConfigError(f"unknown method {method!r}")
        if "generator" in self.base or "matrix" in self.base:
            raise ConfigError("suite base must not set an input source")
        for cell in self.cells():
            cell_config(self, *cell)

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("kind") == "benchmark":
            doc = doc["suite"]
        if "seeds" in doc and isinstance(doc["seeds"], int):
            doc["seeds"] = list(range(doc["seeds"]))
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"unknown suite field(s): {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return {
            "designs": self.designs,
            "methods": list(self.methods),
            "seeds": list(self.seeds),
            "base": self.base,
            "score_size": self.score_size,
        }

    def cells(self):
        return [(d, m, s) for d in sorted(self.designs) for m in self.methods for s in self.seeds]


def cell_config(suite, design, method_text, seed):
    method, iterative, sigma = parse_method(method_text)
    gen = {**suite.designs[design], "seed": seed}
    return PipelineConfig.from_dict(
        {"restarts": BENCHMARK_RESTARTS, **suite.base, "generator": gen, "method": method,
         "iterative": iterative, "sigma_variant": sigma, "seed": seed}
    )


def run_cell(suite, design, method_text, seed):
    """One benchmark cell; failures are returned, not raised."""
    try:
        cfg = cell_config(suite, design, method_text, seed)
        st = run_pipeline(cfg, None, write=False)
        scores = dict(st.scores)
        if not scores:
            raise ConfigError("benchmark designs need truth labels")
        size = suite.score_size or max(scores)
        if size not in scores:
            raise ConfigError(f"score_size {size} not among filter sizes {sorted(scores)}")
        return {"design": design, "method": method_text, "seed": seed, "status": "ok",
                "error": scores[size], "n_genes_kept": size,
                "resolutions": st.resolutions}
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        return {"design": design, "method": method_text, "seed": seed, "status": "failed",
                "error": None, "message": f"{type(exc).__name__}: {exc}"}


def _run_cell_args(args):
    return run_cell(*args)


def worker_count(default=1):
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def summarize(cells):
    """Median/min/max of the score per (design, method)."""
    table = {}
    for c in cells:
        key = (c["design"], c["method"])
        row = table.setdefault(key, {"errors": [], "failed": 0})
        if c["status"] == "ok":
            row["errors"].append(c["error"])
        else:
            row["failed"] += 1
    out = []
    for (design, method), row in sorted(table.items()):
        e = np.array(row["errors"], dtype=np.float64)
        out.append({
            "design": design,
            "method": method,
            "median": float(np.median(e)) if e.size else None,
            "min": float(e.min()) if e.size else None,
            "max": float(e.max()) if e.size else None,
            "n": int(e.size),
            "n_failed": row["failed"],
        })
    return out


def _fmt(v):
    return "" if v is None else repr(v) if isinstance(v, float) else str(v)


def run_benchmark(suite, out, workers=None):
    """Run every cell (in a process pool when ``workers > 1``) and write
    cells.csv, summary.csv, summary.json and manifest.json into ``out``.

    Returns the summary rows.
    """
    workers = worker_count() if workers is None else int(workers)
    jobs = [(suite, *cell) for cell in suite.cells()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell_args, jobs))
    else:
        cells = [_run_cell_args(j) for j in jobs]
    out = Path(out)
    summary = summarize(cells)
    cell_lines = ["design,method,seed,status,n_genes_kept,error,message"]
    for c in cells:
        msg = c.get("message", "").replace(",", ";").replace("\n", " ")
        cell_lines.append(",".join([c["design"], c["method"], str(c["seed"]), c["status"],
                                    _fmt(c.get("n_genes_kept")), _fmt(c["error"]), msg]))
    atomic_write_text(out / "cells.csv", "\n".join(cell_lines) + "\n")
    cols = ["design", "method", "median", "min", "max", "n", "n_failed"]
    lines = [",".join(cols)] + [",".join(_fmt(r[c]) for c in cols) for r in summary]
    atomic_write_text(out / "summary.csv", "\n".join(lines) + "\n")
    atomic_write_text(out / "summary.json", _dump(summary))
    manifest = {
        "kind": "benchmark",
        "suite": suite.to_dict(),
        "versions": versions(),
        "outputs": ["cells.csv", "summary.csv", "summary.json"],
        "n_failed": sum(c["status"] != "ok" for c in cells),
        "resolutions": {f"{c['design']}|{c['method']}|{c['seed']}": c.get("resolutions", [])
                        for c in cells},
    }
    atomic_write_text(out / "manifest.json", _dump(manifest))
    return summary


def configure_logging(verbose=False):
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
