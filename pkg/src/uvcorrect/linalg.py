"""Dense linear-algebra kernel.

Truncated SVD, ridge solves, quadratic norms under the covariance
``S(W, nu) = (W W^T + nu I) / nu`` and the covariance-to-loading mapping
used to turn a generalized least squares problem into a ridge one.

All functions are pure and operate on float64 numpy arrays.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla


class ShapeError(ValueError):
    """Raised when matrix dimensions do not conform."""


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _flip_signs(u, vt):
    # Largest-magnitude entry of each left vector is made positive so that
    # repeated calls on the same input return the same factors.
    if u.shape[1] == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray

    def reconstruct(self):
        return (self.u * self.singular_values) @ self.v.T


def truncated_svd(a, k):
    """Top-``k`` singular triples of ``a``.

    The reconstruction ``u @ diag(s) @ v.T`` is the best rank-``k``
    approximation of ``a`` in Frobenius norm. Signs are normalized so the
    result is deterministic for a fixed input.
    """
    a = as_matrix(a)
    k = int(k)
    if not 1 <= k <= min(a.shape):
        raise ValueError(f"rank k={k} out of range [1, {min(a.shape)}]")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    u, vt = _flip_signs(u[:, :k], vt[:k])
    return SvdResult(u=u, singular_values=s[:k], v=vt.T)


def _check_nu(nu):
    nu = float(nu)
    if not nu > 0 or not np.isfinite(nu):
        raise ValueError(f"ridge parameter nu must be positive, got {nu}")
    return nu


def ridge_solve(w, r, nu):
    """Return ``(W^T W + nu I)^{-1} W^T R``.

    Solved through a Cholesky factorization of the k x k system, never by
    forming an m x m inverse.
    """
    w = as_matrix(w, "w")
    r = as_matrix(r, "r")
    nu = _check_nu(nu)
    if w.shape[0] != r.shape[0]:
        raise ShapeError(f"w has {w.shape[0]} rows but r has {r.shape[0]}")
    k = w.shape[1]
    if k == 0:
        return np.zeros((0, r.shape[1]))
    gram = w.T @ w
    gram[np.diag_indices(k)] += nu
    factor = sla.cho_factor(gram, lower=True)
    return sla.cho_solve(factor, w.T @ r)


@dataclass(frozen=True)
class QuadraticNormSpec:
    """Covariance ``S(W, nu) = nu^{-1} (W W^T + nu I_m)`` in factored form."""

    w: np.ndarray
    nu: float

    def __post_init__(self):
        object.__setattr__(self, "w", as_matrix(self.w, "w"))
        object.__setattr__(self, "nu", _check_nu(self.nu))

    @property
    def m(self):
        return self.w.shape[0]

    def apply_inverse(self, r):
        """``S^{-1} R = R - W (W^T W + nu I)^{-1} W^T R``."""
        r = as_matrix(r, "r")
        if r.shape[0] != self.m:
            raise ShapeError(f"r has {r.shape[0]} rows, spec expects {self.m}")
        if self.w.shape[1] == 0:
            return r.copy()
        return r - self.w @ ridge_solve(self.w, r, self.nu)

    def inverse_matrix(self):
        """Dense ``S^{-1}`` (m x m), for small problems only."""
        return self.apply_inverse(np.eye(self.m))

    @classmethod
    def identity(cls, m, nu=1.0):
        return cls(np.zeros((m, 1)), nu)


def quad_norm_sq(r, spec):
    """``||R||^2_S = tr(R^T S^{-1} R)`` via the Woodbury form of ``S^{-1}``."""
    r = as_matrix(r, "r")
    val = float(np.sum(r * spec.apply_inverse(r)))
    return max(val, 0.0)


def ridge_objective(w, r, alpha, nu):
    """``||R - W alpha||_F^2 + nu ||alpha||_F^2``."""
    return float(np.sum((r - w @ alpha) ** 2) + nu * np.sum(alpha**2))


def symmetrize(sigma, rtol=1e-10):
    sigma = as_matrix(sigma, "sigma")
    if sigma.shape[0] != sigma.shape[1]:
        raise ShapeError("sigma must be square")
    asym = np.max(np.abs(sigma - sigma.T)) if sigma.size else 0.0
    if asym > rtol * np.linalg.norm(sigma):
        raise ValueError(f"sigma is not symmetric (max asymmetry {asym:.3g})")
    return 0.5 * (sigma + sigma.T)


def sigma_to_w(sigma, nu):
    """Loading matrix ``W`` with ``S(W, nu) = sigma / nu``.

    Uses ``W = U (Lambda - nu I)^{1/2} U^T`` where ``sigma = U Lambda U^T``,
    so ``W W^T + nu I = sigma``. Minimizers of ``||.||_S`` and of
    ``||.||_sigma`` coincide since the two norms differ by the factor nu.
    """
    nu = _check_nu(nu)
    sigma = symmetrize(sigma)
    lam, u = np.linalg.eigh(sigma)
    if nu >= lam[0]:
        raise ValueError(
            f"nu={nu} must be below the smallest eigenvalue of sigma ({lam[0]:.6g})"
        )
    return (u * np.sqrt(lam - nu)) @ u.T


def pca_coordinates(y, n_components):
    """Sample scores on the leading principal axes of column-centered ``y``."""
    y = as_matrix(y, "y")
    n_components = int(n_components)
    if not 1 <= n_components <= min(y.shape):
        raise ValueError(
            f"n_components={n_components} out of range [1, {min(y.shape)}]"
        )
    yc = y - y.mean(axis=0)
    u, s, vt = np.linalg.svd(yc, full_matrices=False)
    u, vt = _flip_signs(u[:, :n_components], vt[:n_components])
    return u * s[:n_components]


def orthonormal_basis(a, rtol=1e-10):
    """Orthonormal basis of the column space of ``a`` (numerical rank)."""
    a = np.asarray(a, dtype=np.float64)
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((a.shape[0], 0))
    return u[:, s > rtol * s[0]]


def canonical_correlations(a, b, rtol=1e-10):
    """Canonical correlations between the columns of ``a`` and ``b``.

    Both blocks are column-centered first. Returns correlations in
    decreasing order, clipped to [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] != b.shape[0]:
        raise ShapeError("blocks must have the same number of rows")
    qa = orthonormal_basis(a - a.mean(axis=0), rtol)
    qb = orthonormal_basis(b - b.mean(axis=0), rtol)
    if qa.shape[1] == 0 or qb.shape[1] == 0:
        return np.zeros(0)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.clip(s, 0.0, 1.0)


def first_canonical_correlation(a, b):
    s = canonical_correlations(a, b)
    return float(s[0]) if s.size else 0.0
