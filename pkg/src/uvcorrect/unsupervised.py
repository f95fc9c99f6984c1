"""Unsupervised estimators of ``X beta``.

k-means and its two covariance-aware variants (row-wise coordinate descent
and a projected-gradient relaxation), sparse dictionary learning, and the
shrunken multi-task regression of the gene-covariance model.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .linalg import QuadraticNormSpec, as_matrix

CONSTRAINT_KINDS = ("membership", "unit-norm-columns", "low-rank")


@dataclass(frozen=True)
class Partition:
    """Cluster index (0-based) of every sample."""

    assignments: np.ndarray
    k: int

    def __post_init__(self):
        a = np.asarray(self.assignments, dtype=int)
        if a.ndim != 1:
            raise ValueError("assignments must be 1-D")
        if a.size and (a.min() < 0 or a.max() >= self.k):
            raise ValueError(f"cluster index out of range [0, {self.k})")
        object.__setattr__(self, "assignments", a)
        object.__setattr__(self, "k", int(self.k))

    @property
    def m(self):
        return self.assignments.size

    def membership(self):
        x = np.zeros((self.m, self.k))
        x[np.arange(self.m), self.assignments] = 1.0
        return x

    @classmethod
    def from_labels(cls, labels, k=None):
        """Encode arbitrary hashable labels (sorted) as a partition."""
        levels = sorted(set(labels))
        pos = {lv: i for i, lv in enumerate(levels)}
        return cls(np.array([pos[v] for v in labels]), k or len(levels))


@dataclass(frozen=True)
class FactorEstimate:
    x_hat: np.ndarray
    beta_hat: np.ndarray
    constraint_kind: str

    def __post_init__(self):
        if self.constraint_kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.constraint_kind!r}")

    @property
    def xbeta(self):
        return self.x_hat @ self.beta_hat


# -- k-means -----------------------------------------------------------------


def _sq_dists(y, centers, y_sq=None):
    if y_sq is None:
        y_sq = np.sum(y**2, axis=1)
    d = y_sq[:, None] - 2.0 * y @ centers.T + np.sum(centers**2, axis=1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(y, k, rng):
    """k-means++ seeding; returns k rows of ``y`` as initial centers."""
    m = y.shape[0]
    y_sq = np.sum(y**2, axis=1)
    first = int(rng.integers(m))
    chosen = [first]
    closest = _sq_dists(y, y[[first]], y_sq)[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center
            rest = [i for i in range(m) if i not in chosen]
            nxt = rest[int(rng.integers(len(rest)))]
        else:
            nxt = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            nxt = min(nxt, m - 1)
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(y, y[[nxt]], y_sq)[:, 0])
    return y[chosen].copy()


def _reseed_empty(y, labels, centers, empty):
    # empty clusters move to the points farthest from their current center
    d = np.sum((y - centers[labels]) ** 2, axis=1)
    order = np.argsort(-d, kind="stable")
    taken = 0
    for j in empty:
        i = order[taken]
        taken += 1
        centers[j] = y[i]
        labels[i] = j
    return labels, centers


def _update_means(y, labels, centers, k):
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        labels, centers = _reseed_empty(y, labels.copy(), centers.copy(), empty)
        counts = np.bincount(labels, minlength=k)
    onehot = np.zeros((labels.size, k))
    onehot[np.arange(labels.size), labels] = 1.0
    return labels, (onehot.T @ y) / counts[:, None]


def kmeans_objective(y, labels, centers):
    return float(np.sum((y - centers[labels]) ** 2))


def _lloyd(y, centers, max_iter):
    k = centers.shape[0]
    rows = np.arange(y.shape[0])
    y_sq = np.sum(y**2, axis=1)
    labels = np.argmin(_sq_dists(y, centers, y_sq), axis=1)
    trace = []
    for _ in range(max_iter):
        labels, centers = _update_means(y, labels, centers, k)
        # one distance matrix scores both the update and the reassignment
        d = _sq_dists(y, centers, y_sq)
        trace.append(float(d[rows, labels].sum()))
        new = np.argmin(d, axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        trace.append(float(d[rows, labels].sum()))
    return labels, centers, trace


@dataclass(frozen=True)
class KMeansResult:
    partition: Partition
    estimate: FactorEstimate
    objective: float
    restart_objectives: tuple = ()
    trace: tuple = ()


def _check_k(k, m):
    k = int(k)
    if not 1 <= k <= m:
        raise ValueError(f"cluster count k={k} out of range [1, {m}]")
    return k


def _restart_rng(seed, r):
    return np.random.default_rng([int(seed), int(r)])


def kmeans(y, k, n_restarts=10, seed=0, max_iter=300, init_centers=None):
    """Best-of-restarts Lloyd k-means with k-means++ seeding.

    Restart ``r`` draws its seeding from ``(seed, r)``; ties in the final
    objective go to the lowest restart index. ``init_centers`` adds a
    warm-started run that competes with the restarts.
    """
    y = as_matrix(y, "y")
    k = _check_k(k, y.shape[0])
    if int(n_restarts) < 1:
        raise ValueError("n_restarts must be >= 1")
    runs = []
    if init_centers is not None:
        runs.append(_lloyd(y, np.array(init_centers, dtype=np.float64), max_iter))
    for r in range(int(n_restarts)):
        runs.append(_lloyd(y, kmeans_plusplus(y, k, _restart_rng(seed, r)), max_iter))
    objs = [kmeans_objective(y, lab, cen) for lab, cen, _ in runs]
    best = int(np.argmin(objs))
    labels, centers, trace = runs[best]
    part = Partition(labels, k)
    est = FactorEstimate(part.membership(), centers, "membership")
    return KMeansResult(part, est, objs[best], tuple(objs), tuple(trace))


# -- covariance-aware k-means ------------------------------------------------


def _spec_inverse(spec, m):
    if spec.m != m:
        raise ValueError(f"spec has {spec.m} rows, data has {m}")
    return spec.inverse_matrix()


def sigma_objective(y, x, beta, p_inv):
    r = y - x @ beta
    return float(np.sum(r * (p_inv @ r)))


def gls_centers(y, x, p_inv):
    """``(X^T P X)^{-1} X^T P Y`` for the weight matrix ``P = S^{-1}``."""
    a = x.T @ p_inv @ x
    b = x.T @ p_inv @ y
    try:
        return sla.solve(a, b, assume_a="pos")
    except (np.linalg.LinAlgError, sla.LinAlgError):
        return np.linalg.lstsq(a, b, rcond=None)[0]


def partition_sigma_objective(y, labels, k, p_inv):
    """Objective of a hard partition with its optimal (GLS) centers."""
    x = Partition(labels, k).membership()
    occupied = x.sum(axis=0) > 0
    xs = x[:, occupied]
    beta = gls_centers(y, xs, p_inv)
    return sigma_objective(y, xs, beta, p_inv)


def _random_labels(m, k, rng):
    labels = rng.integers(k, size=m)
    labels[rng.permutation(m)[:k]] = np.arange(k)
    return labels


def _rowwise_run(y, k, p_inv, centers, max_sweeps, labels=None):
    m = y.shape[0]
    if labels is None:
        labels = np.argmin(_sq_dists(y, centers), axis=1)
    trace = []
    for _ in range(max_sweeps):
        # center update: GLS on occupied clusters, farthest-point reseed for empty ones
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            labels, centers = _reseed_empty(y, labels.copy(), centers.copy(), empty)
        x = Partition(labels, k).membership()
        centers = gls_centers(y, x, p_inv)
        trace.append(sigma_objective(y, x, centers, p_inv))
        # coordinate sweep over rows with the others held fixed
        r = y - centers[labels]
        g = p_inv @ r
        changed = False
        for i in range(m):
            pii = p_inv[i, i]
            coupling = g[i] - pii * r[i]
            cand = y[i][None, :] - centers
            cost = pii * np.sum(cand**2, axis=1) + 2.0 * cand @ coupling
            best = int(np.argmin(cost))
            cur = labels[i]
            if best != cur and cost[best] < cost[cur] - 1e-12 * max(1.0, abs(cost[cur])):
                delta = cand[best] - r[i]
                g += np.outer(p_inv[:, i], delta)
                r[i] = cand[best]
                labels[i] = best
                changed = True
        trace.append(sigma_objective(y, Partition(labels, k).membership(), centers, p_inv))
        if not changed:
            break
    return labels, centers, trace


@dataclass(frozen=True)
class SigmaKMeansResult:
    partition: Partition
    objective: float
    trace: tuple = ()
    restart_objectives: tuple = ()
    underflow: bool = False
    relaxed_x: np.ndarray = None


def kmeans_sigma_rowwise(y, k, spec, seed=0, n_restarts=1, max_sweeps=200):
    """Local minimum of ``||Y - X beta||^2_S`` over memberships.

    Alternates a generalized least squares update of the centers with a
    sweep that reassigns one row at a time against the full coupled
    objective. Even restarts seed with k-means++ (nearest-center labels),
    odd restarts with a random partition, since a coupled ``S`` can put
    the optimum outside every Euclidean Voronoi start. With ``S = I`` and
    one restart this follows the Lloyd path of :func:`kmeans` exactly.
    """
    y = as_matrix(y, "y")
    k = _check_k(k, y.shape[0])
    p_inv = _spec_inverse(spec, y.shape[0])
    runs = []
    for r in range(int(n_restarts)):
        rng = _restart_rng(seed, r)
        c0 = kmeans_plusplus(y, k, rng)
        labels = _random_labels(y.shape[0], k, rng) if r % 2 else None
        runs.append(_rowwise_run(y, k, p_inv, c0, max_sweeps, labels))
    objs = [partition_sigma_objective(y, lab, k, p_inv) for lab, _, _ in runs]
    best = int(np.argmin(objs))
    labels, _, trace = runs[best]
    return SigmaKMeansResult(Partition(labels, k), objs[best], tuple(trace), tuple(objs))


def project_simplex_rows(v):
    """Euclidean projection of each row onto the probability simplex."""
    v = np.asarray(v, dtype=np.float64)
    m, k = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = css[np.arange(m), rho] / (rho + 1)
    return np.maximum(v - theta[:, None], 0.0)


def _relaxed_run(y, k, p_inv, centers, max_iter, tol):
    m = y.shape[0]
    labels = np.argmin(_sq_dists(y, centers), axis=1)
    x = Partition(labels, k).membership()
    p_norm = float(np.linalg.eigvalsh(p_inv)[-1])
    beta = gls_centers(y, x, p_inv)
    f = sigma_objective(y, x, beta, p_inv)
    trace = [f]
    underflow = False
    for _ in range(max_iter):
        grad = -2.0 * p_inv @ (y - x @ beta) @ beta.T
        lip = 2.0 * p_norm * float(np.linalg.eigvalsh(beta @ beta.T)[-1])
        step = 1.0 / max(lip, 1e-300)
        while True:
            x_new = project_simplex_rows(x - step * grad)
            f_new = sigma_objective(y, x_new, beta, p_inv)
            if f_new <= f:
                break
            step *= 0.5
            if step < 1e-30:
                underflow = True
                x_new, f_new = x, f
                break
        beta_new = gls_centers(y, x_new, p_inv)
        f_beta = sigma_objective(y, x_new, beta_new, p_inv)
        if f_beta <= f_new:
            beta, f_new = beta_new, f_beta
        x_prev_f = f
        x, f = x_new, f_new
        trace.append(f)
        if underflow or x_prev_f - f <= tol * max(1.0, abs(x_prev_f)):
            break
    return x, trace, underflow


def kmeans_sigma_relaxed(y, k, spec, seed=0, n_restarts=1, max_iter=2000, tol=1e-12):
    """Projected-gradient solution of the simplex relaxation, rounded.

    Memberships are relaxed to rows of the probability simplex; the
    gradient step in X alternates with the GLS update of the centers.
    Rounding takes the row argmax (lowest index on ties).
    """
    y = as_matrix(y, "y")
    k = _check_k(k, y.shape[0])
    p_inv = _spec_inverse(spec, y.shape[0])
    runs = []
    for r in range(int(n_restarts)):
        c0 = kmeans_plusplus(y, k, _restart_rng(seed, r))
        x, trace, underflow = _relaxed_run(y, k, p_inv, c0, max_iter, tol)
        labels = np.argmax(x, axis=1)
        runs.append((labels, x, trace, underflow))
    objs = [partition_sigma_objective(y, lab, k, p_inv) for lab, *_ in runs]
    best = int(np.argmin(objs))
    labels, x, trace, underflow = runs[best]
    if underflow:
        warnings.warn("projected gradient step size underflowed", RuntimeWarning, stacklevel=2)
    return SigmaKMeansResult(
        Partition(labels, k), objs[best], tuple(trace), tuple(objs), underflow, x
    )


# -- sparse dictionary learning ----------------------------------------------


def soft_threshold(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def lasso_columns(x, y, lam, beta0=None, max_sweeps=1000, tol=1e-10):
    """Column-wise lasso ``min_b 0.5||y_j - X b||^2 + lam ||b||_1``.

    ``lam == 0`` is solved exactly (minimum-norm least squares). Otherwise
    cyclic coordinate descent, vectorized over the columns of ``y`` and
    started from ``beta0`` or the least-squares solution.
    """
    if lam == 0:
        return np.linalg.lstsq(x, y, rcond=None)[0]
    g = x.T @ x
    c = x.T @ y
    p = g.shape[0]
    if beta0 is None:
        beta = np.linalg.lstsq(x, y, rcond=None)[0]
    else:
        beta = np.array(beta0, dtype=np.float64)
    diag = np.diag(g).copy()
    scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
    if not c.size:
        return beta
    for _ in range(max_sweeps):
        biggest = 0.0
        for j in range(p):
            if diag[j] <= 0:
                beta[j] = 0.0
                continue
            rho = c[j] - g[j] @ beta + diag[j] * beta[j]
            new = (np.maximum(rho - lam, 0.0) - np.maximum(-rho - lam, 0.0)) / diag[j]
            biggest = max(biggest, np.abs(new - beta[j]).max())
            beta[j] = new
        if biggest <= tol * scale:
            break
    return beta


def dictionary_objective(y, x, beta, lam):
    return float(0.5 * np.sum((y - x @ beta) ** 2) + lam * np.sum(np.abs(beta)))


def _update_atoms(y, x, beta, rng):
    # block coordinate descent: each unit-norm column solves its own
    # constrained least squares exactly with the others held fixed
    # (Gram form: E_j b_j^T = (Y b^T)_j - X (b b^T)_j + x_j (b b^T)_jj)
    a = y @ beta.T
    b = beta @ beta.T
    for j in range(x.shape[1]):
        if b[j, j] <= 0:
            v = rng.standard_normal(x.shape[0])
            x[:, j] = v / np.linalg.norm(v)
            continue
        v = a[:, j] - x @ b[:, j] + x[:, j] * b[j, j]
        nv = np.linalg.norm(v)
        if nv > 0:
            x[:, j] = v / nv
    return x


@dataclass(frozen=True)
class DictionaryResult:
    estimate: FactorEstimate
    objective: float
    trace: tuple = ()


def sparse_dictionary(y, p, lam, seed=0, max_iter=200, tol=1e-8, init=None):
    """Alternating minimization of ``0.5||Y - X beta||^2 + lam ||beta||_1``
    over unit-norm columns of X (m x p) and codes beta (p x n).

    Starts from the truncated SVD (or ``init``). The objective never
    increases; no global optimality is implied.
    """
    y = as_matrix(y, "y")
    p = int(p)
    if not 1 <= p <= min(y.shape):
        raise ValueError(f"p={p} out of range [1, {min(y.shape)}]")
    lam = float(lam)
    if lam < 0:
        raise ValueError("lam must be >= 0")
    rng = np.random.default_rng(seed)
    if init is not None:
        x = np.array(init.x_hat, dtype=np.float64)
        beta0 = np.array(init.beta_hat, dtype=np.float64)
        norms = np.linalg.norm(x, axis=0)
        norms[norms == 0] = 1.0
        x, beta0 = x / norms, beta0 * norms[:, None]
    else:
        u, _, _ = np.linalg.svd(y, full_matrices=False)
        x = u[:, :p].copy()
        beta0 = None
    beta = lasso_columns(x, y, lam, beta0)
    f = dictionary_objective(y, x, beta, lam)
    trace = [f]
    for _ in range(max_iter):
        x = _update_atoms(y, x, beta, rng)
        beta = lasso_columns(x, y, lam, beta)
        f_new = dictionary_objective(y, x, beta, lam)
        trace.append(f_new)
        done = f - f_new <= tol * max(1.0, abs(f))
        f = f_new
        if done:
            break
    return DictionaryResult(FactorEstimate(x, beta, "unit-norm-columns"), f, tuple(trace))


# -- estimator handles for the alternating correction engine -----------------


class SparseDictionaryEstimator:
    """``fit`` runs a few dictionary sweeps from the previous estimate.

    The outer alternation warm-starts every call, so a short inner budget
    suffices; falling back to the start point keeps the alternating
    objective monotone."""

    def __init__(self, p, lam, seed=0, max_iter=10, tol=1e-7):
        self.p, self.lam, self.seed = int(p), float(lam), seed
        self.max_iter, self.tol = max_iter, tol

    def describe(self):
        return {"estimator": "sparse-dictionary", "p": self.p, "lambda": self.lam}

    def penalty(self, est):
        return self.lam * float(np.sum(np.abs(est.beta_hat)))

    def objective(self, y, est):
        return 0.5 * float(np.sum((y - est.xbeta) ** 2)) + self.penalty(est)

    def fit(self, y, init=None):
        res = sparse_dictionary(y, self.p, self.lam, self.seed, self.max_iter, self.tol, init)
        est = res.estimate
        fallback = init if init is not None else zero_estimate(y.shape, self.p)
        if self.objective(y, fallback) < self.objective(y, est):
            return fallback
        return est


class KMeansEstimator:
    """Cluster centers as ``X beta``; warm starts compete with restarts."""

    def __init__(self, k, n_restarts=10, seed=0):
        self.k, self.n_restarts, self.seed = int(k), int(n_restarts), seed
        self.last_partition = None

    def describe(self):
        return {"estimator": "kmeans", "k": self.k, "restarts": self.n_restarts}

    def penalty(self, est):
        return 0.0

    def objective(self, y, est):
        return 0.5 * float(np.sum((y - est.xbeta) ** 2))

    def fit(self, y, init=None):
        centers = None
        if init is not None and init.constraint_kind == "membership" and init.x_hat.shape[1] == self.k:
            centers = init.beta_hat
        res = kmeans(y, self.k, self.n_restarts, self.seed, init_centers=centers)
        if init is not None and self.objective(y, init) < self.objective(y, res.estimate):
            return init
        self.last_partition = res.partition
        return res.estimate


class ZeroEstimator:
    """``X beta = 0``: turns the alternating engine into a one-shot correction."""

    def describe(self):
        return {"estimator": "zero"}

    def penalty(self, est):
        return 0.0

    def objective(self, y, est):
        return 0.5 * float(np.sum((y - est.xbeta) ** 2))

    def fit(self, y, init=None):
        return zero_estimate(y.shape, 0)


def zero_estimate(shape, p):
    m, n = shape
    x = np.zeros((m, p))
    if p:
        x[0] = 1.0
    return FactorEstimate(x, np.zeros((p, n)), "unit-norm-columns" if p else "low-rank")


# -- MAP estimator under a constant gene covariance --------------------------


def map_shrunk_regression(y, x, lam, nu):
    """Minimize ``||Y - X b||^2 + lam sum_i ||b_i - bbar||^2 + nu ||bbar||^2``.

    ``bbar = sum_i b_i / (n + nu/lam)`` is the shrunken average of the
    columns. Closed form through the joint ridge system in ``(beta, v)``
    with ``b = beta + v 1^T``.
    """
    y = as_matrix(y, "y")
    x = as_matrix(x, "x")
    lam, nu = float(lam), float(nu)
    if lam < 0 or nu < 0:
        raise ValueError("lam and nu must be >= 0")
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")
    p = x.shape[1]
    if np.linalg.matrix_rank(x) < p:
        raise ValueError("x must have full column rank")
    n = y.shape[1]
    xtx = x.T @ x
    xty = x.T @ y
    if lam == 0:
        return np.linalg.solve(xtx, xty)
    # summing the stationarity conditions over columns gives the total s
    shrink = lam * nu / (n * lam + nu)
    s = np.linalg.solve(xtx + shrink * np.eye(p), xty.sum(axis=1))
    bbar = s * lam / (n * lam + nu)
    return np.linalg.solve(xtx + lam * np.eye(p), xty + lam * bbar[:, None])


def map_objective(y, x, b, lam, nu):
    n = b.shape[1]
    bbar = b.sum(axis=1) / (n + nu / lam) if lam > 0 else np.zeros(b.shape[0])
    return float(
        np.sum((y - x @ b) ** 2)
        + lam * np.sum((b - bbar[:, None]) ** 2)
        + nu * np.sum(bbar**2)
    )
