"""Partition distance, variance filtering, control-gene diagnostics and
plot-data emission."""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .data import ExpressionMatrix, atomic_write_text
from .linalg import as_matrix, canonical_correlations, pca_coordinates


@dataclass(frozen=True)
class ClusteringScore:
    value: float
    k: int

    def __post_init__(self):
        if not -1e-12 <= self.value <= self.k - 1 + 1e-12:
            raise ValueError(f"score {self.value} outside [0, {self.k - 1}]")

    def __float__(self):
        return self.value


def contingency(a, b):
    """Cluster overlap counts ``|c_i & c'_j|``."""
    table = np.zeros((a.k, b.k))
    np.add.at(table, (a.assignments, b.assignments), 1.0)
    return table


def clustering_distance(a, b):
    """``k - sum_ij |c_i & c'_j|^2 / (|c_i| |c'_j|)``.

    0 for equivalent partitions, ``k - 1`` for independent balanced ones.
    Empty clusters contribute nothing to the sum.
    """
    if a.m != b.m:
        raise ValueError(f"partitions cover {a.m} and {b.m} samples")
    if a.k != b.k:
        raise ValueError(f"partitions have k={a.k} and k={b.k}")
    table = contingency(a, b)
    ra = table.sum(axis=1)
    rb = table.sum(axis=0)
    denom = np.outer(ra, rb)
    ratio = np.divide(table**2, denom, out=np.zeros_like(table), where=denom > 0)
    # clamp rounding noise at the ends of the range
    value = min(max(float(a.k - ratio.sum()), 0.0), a.k - 1.0)
    return ClusteringScore(value, a.k)


def variance_filter(y, n_keep):
    """Keep the ``n_keep`` features of highest sample variance.

    Ties go to the lexicographically smaller feature id; kept columns stay
    in their input order.
    """
    n = y.shape[1]
    n_keep = int(n_keep)
    if not 1 <= n_keep <= n:
        raise ValueError(f"n_keep={n_keep} out of range [1, {n}]")
    var = y.values.var(axis=0)
    order = sorted(range(n), key=lambda j: (-var[j], y.feature_ids[j]))
    keep = sorted(order[:n_keep])
    return y.select_features(keep)


def cca_per_feature(y, x_truth):
    """Multiple correlation of every feature with the columns of X.

    This is the first canonical correlation between a single column and X,
    computed on centered data.
    """
    values = y.values if isinstance(y, ExpressionMatrix) else as_matrix(y, "y")
    x = as_matrix(x_truth, "x_truth")
    if x.shape[0] != values.shape[0]:
        raise ValueError("x_truth and y must have the same number of rows")
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("x_truth has no variance after centering")
    q = u[:, s > 1e-10 * s[0]]
    yc = values - values.mean(axis=0)
    norms = np.linalg.norm(yc, axis=0)
    proj = np.linalg.norm(q.T @ yc, axis=0)
    out = np.divide(proj, norms, out=np.zeros_like(proj), where=norms > 0)
    return np.clip(out, 0.0, 1.0)


def eigenspace_cca_curve(y, feature_set, x_truth, k_max):
    """First canonical correlation between X and the top-k eigenvectors of
    the sample covariance on ``feature_set``, for k = 1..k_max."""
    values = y.values if isinstance(y, ExpressionMatrix) else as_matrix(y, "y")
    idx = np.asarray(list(feature_set), dtype=int)
    if idx.size == 0:
        raise ValueError("feature set is empty")
    m = values.shape[0]
    k_max = int(k_max)
    if not 1 <= k_max <= m:
        raise ValueError(f"k_max={k_max} out of range [1, {m}]")
    # features are the observations of an m-dimensional sample vector
    sub = values[:, idx]
    sub = sub - sub.mean(axis=1, keepdims=True)
    cov = sub @ sub.T / max(idx.size - 1, 1)
    lam, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, ::-1]
    curve = []
    best = 0.0
    for k in range(1, k_max + 1):
        cc = canonical_correlations(vecs[:, :k], x_truth)
        best = max(best, float(cc[0]) if cc.size else 0.0)
        curve.append(best)
    return np.array(curve)


def score_summary(values):
    v = np.asarray(values, dtype=np.float64)
    return {
        "median": float(np.median(v)),
        "min": float(v.min()),
        "max": float(v.max()),
        "n": int(v.size),
    }


# -- plot data ---------------------------------------------------------------

TIDY_FIELDS = ("method", "n_genes_kept", "error", "seed")


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def emit_plot_data(results, path, pca=None):
    """Write the tidy error table and, optionally, PCA coordinates.

    ``results`` is an iterable of mappings with keys method, n_genes_kept,
    error and seed. ``pca`` is ``(sample_ids, coords, labels)`` where
    ``labels`` maps a field name to per-sample values. Returns the written
    paths.
    """
    rows = [tuple(r[f] for f in TIDY_FIELDS) for r in results]
    if not rows:
        raise ValueError("no results to emit")
    written = [str(path)]
    atomic_write_text(path, _csv_text(TIDY_FIELDS, rows))
    if pca is not None:
        sample_ids, coords, labels = pca
        names = sorted(labels)
        header = ["sample_id", "pc1", "pc2", *names]
        prow = [
            [sid, float(c[0]), float(c[1]), *(labels[n][i] for n in names)]
            for i, (sid, c) in enumerate(zip(sample_ids, coords))
        ]
        ppath = str(path).rsplit(".", 1)[0] + "_pca.csv"
        atomic_write_text(ppath, _csv_text(header, prow))
        written.append(ppath)
    return written


def read_plot_data(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [
        {
            "method": r["method"],
            "n_genes_kept": int(r["n_genes_kept"]),
            "error": float(r["error"]),
            "seed": int(r["seed"]),
        }
        for r in rows
    ]


def pca_plot_coords(y, n_components=2):
    return pca_coordinates(y.values, min(n_components, *y.shape))
