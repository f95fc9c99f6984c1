"""Corrections removing an estimate of ``W alpha`` from Y.

One-shot corrections (naive fixed-alpha projection, random-alpha ridge,
direct replicate removal), the known-batch baselines (mean-centering and
the ratio method), the ridge heuristic, and the alternating engine that
interleaves alpha-steps with an unsupervised estimate of ``X beta``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import (
    REPLICATE_FACTOR,
    DataError,
    ExpressionMatrix,
    center_by_factor,
    subtract_group_means,
)
from .estimation import DegenerateError, UVModel, refresh_w
from .linalg import orthonormal_basis, ridge_solve
from .unsupervised import ZeroEstimator, zero_estimate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrectionResult:
    y_corrected: ExpressionMatrix
    removed_energy: float
    method: dict
    iterations_run: int = 1
    alpha: np.ndarray = None
    trace: tuple = ()

    def __post_init__(self):
        if self.removed_energy < 0:
            raise ValueError("removed_energy must be >= 0")


@dataclass(frozen=True)
class IterationConfig:
    max_iters: int = 30
    w_refresh_period: int = 10
    lam: float = 0.0
    nu: float = None
    tol: float = 1e-6

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be >= 1")
        if int(self.w_refresh_period) < 1:
            raise ValueError("w_refresh_period must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.nu is not None and self.nu < 0:
            raise ValueError("nu must be >= 0 (0 selects the fixed-alpha step)")


def _result(y, removed, method, **kw):
    return CorrectionResult(
        y.with_values(y.values - removed),
        float(np.linalg.norm(removed)),
        method,
        **kw,
    )


def default_nu(w):
    """Ridge heuristic: largest eigenvalue of ``W^T W`` times 1e-3."""
    w_hat = w.w_hat if isinstance(w, UVModel) else np.asarray(w, dtype=np.float64)
    if w_hat.size == 0 or not np.any(w_hat):
        raise DegenerateError("cannot derive nu from a zero model")
    s1 = np.linalg.norm(w_hat, ord=2)
    return float(s1**2 * 1e-3)


def ols_alpha(w_hat, r):
    """Least-squares ``alpha`` on the column space of ``W`` (rank-safe)."""
    if w_hat.shape[1] == 0:
        return np.zeros((0, r.shape[1]))
    return np.linalg.lstsq(w_hat, r, rcond=None)[0]


def correct_naive_fixed(y, w):
    """Naive fixed-alpha correction: remove the projection of Y on col(W)."""
    w_hat = w.w_hat
    if w_hat.shape[0] != y.shape[0]:
        raise ValueError("model and data have different sample counts")
    basis = orthonormal_basis(w_hat)
    if basis.shape[1] >= y.shape[0]:
        raise DegenerateError(
            "fixed-alpha correction needs rank(W) < m; a full-rank W removes all of Y"
        )
    removed = basis @ (basis.T @ y.values)
    method = {"name": "naive-fixed", "k": w.k, "provenance": w.provenance}
    return _result(y, removed, method, alpha=ols_alpha(w_hat, y.values))


def correct_random_alpha(y, w, nu=None):
    """Random-alpha correction ``Y - W (W^T W + nu I)^{-1} W^T Y``."""
    if nu is None:
        nu = w.nu if w.nu is not None else default_nu(w)
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    alpha = ridge_solve(w.w_hat, y.values, nu)
    method = {"name": "random-alpha", "k": w.k, "nu": float(nu), "provenance": w.provenance}
    return _result(y, w.w_hat @ alpha, method, alpha=alpha)


def correct_replicate(y, w):
    """Remove ``W_hat alpha_hat`` as estimated by the replicate procedure."""
    if w.alpha is None:
        raise ValueError("model carries no alpha_hat; use estimate_w_replicates")
    method = {"name": "replicate", "k": w.k, "provenance": w.provenance}
    return _result(y, w.w_hat @ w.alpha, method, alpha=w.alpha)


def correct_mean_center(y, ann, factors):
    out = center_by_factor(y, ann, factors)
    removed = y.values - out.values
    return CorrectionResult(
        out, float(np.linalg.norm(removed)), {"name": "mean-center", "factors": list(factors)}
    )


def correct_ratio(y, ann, platform_factor):
    """Ratio method: within each batch subtract the mean of its replicate
    samples (samples carrying a replicate group)."""
    keys = [(v,) for v in ann.factor(platform_factor, y.sample_ids)]
    groups = ann.levels.get(REPLICATE_FACTOR, {})
    ref = [bool(groups.get(s)) for s in y.sample_ids]
    try:
        values = subtract_group_means(y.values, keys, ref)
    except DataError as exc:
        raise DataError(f"ratio method: {exc}") from None
    out = y.with_values(values)
    return CorrectionResult(
        out,
        float(np.linalg.norm(y.values - values)),
        {"name": "ratio", "factor": platform_factor},
    )


# -- alternating engine --------------------------------------------------------


def alternating_objective(y, xb, w_hat, alpha, nu, penalty):
    """``0.5||Y - Xb - W alpha||^2 + 0.5 nu ||alpha||^2 + penalty(beta)``."""
    r = y - xb - w_hat @ alpha
    return float(0.5 * np.sum(r**2) + 0.5 * (nu or 0.0) * np.sum(alpha**2) + penalty)


@dataclass(frozen=True)
class IterationTrace:
    objectives: tuple
    steps: tuple
    refreshes: tuple = ()


def _alpha_step(w_hat, r, nu):
    return ridge_solve(w_hat, r, nu) if nu and nu > 0 else ols_alpha(w_hat, r)


def iterate_correction(y, w0, estimator=None, cfg=None, sample_ids=None):
    """Alternate alpha-steps and ``X beta``-steps.

    Each alpha-step is a ridge regression of ``Y - X beta`` on ``W``
    (ordinary least squares when ``nu == 0``); each ``X beta``-step runs
    ``estimator.fit`` on ``Y - W alpha``, warm-started from the previous
    estimate. Every ``w_refresh_period`` iterations ``W`` is re-estimated
    from ``Y - X beta`` through the pathway that produced ``w0``. A
    replicate model starts from its own ``alpha_hat``.

    Returns ``(CorrectionResult, FactorEstimate)``.
    """
    cfg = cfg or IterationConfig()
    estimator = estimator or ZeroEstimator()
    values = y.values
    nu = cfg.nu
    if nu is None:
        nu = w0.nu if w0.nu is not None else default_nu(w0)
    model = w0
    w_hat = model.w_hat
    est = None
    xb = np.zeros_like(values)
    objectives, steps, refreshes = [], [], []

    def penalty():
        return estimator.penalty(est) if est is not None else 0.0

    if model.alpha is not None:
        alpha = model.alpha
    else:
        alpha = _alpha_step(w_hat, values, nu)
    objectives.append(alternating_objective(values, xb, w_hat, alpha, nu, 0.0))
    steps.append("alpha")
    it = 0
    just_refreshed = False
    for it in range(1, int(cfg.max_iters) + 1):
        if it > 1:
            alpha = _alpha_step(w_hat, values - xb, nu)
            objectives.append(alternating_objective(values, xb, w_hat, alpha, nu, penalty()))
            steps.append("alpha")
        ytilde = values - w_hat @ alpha
        try:
            est = estimator.fit(ytilde, est)
        except Exception as exc:
            raise RuntimeError(f"estimator failed at iteration {it}: {exc}") from exc
        xb = est.xbeta
        objectives.append(alternating_objective(values, xb, w_hat, alpha, nu, penalty()))
        steps.append("xbeta")
        if it == int(cfg.max_iters):
            break
        if it % int(cfg.w_refresh_period) == 0:
            try:
                model = refresh_w(model, values, xb, sample_ids)
            except DegenerateError as exc:
                log.warning("W refresh skipped at iteration %d: %s", it, exc)
            else:
                w_hat = model.w_hat
                if cfg.nu is None:
                    nu = default_nu(model)
                refreshes.append(it)
                just_refreshed = True
                log.info("W refreshed at iteration %d (k=%d, nu=%.6g)", it, model.k, nu)
            continue
        if just_refreshed:
            # the objective changed definition with W; restart the stop test
            just_refreshed = False
            continue
        prev = objectives[-3] if len(objectives) >= 3 else objectives[0]
        if prev - objectives[-1] < cfg.tol * max(abs(prev), 1e-300):
            break
    if est is None:
        est = zero_estimate(values.shape, 0)
    method = {
        "name": "iterative",
        "provenance": w0.provenance,
        "k": w0.k,
        "nu": float(nu) if nu else 0.0,
        "lambda": cfg.lam,
        "max_iters": int(cfg.max_iters),
        "w_refresh_period": int(cfg.w_refresh_period),
        **getattr(estimator, "describe", dict)(),
    }
    trace = IterationTrace(tuple(objectives), tuple(steps), tuple(refreshes))
    res = _result(y, w_hat @ alpha, method, iterations_run=it, alpha=alpha, trace=trace)
    return res, est


def calibrate_lambda(y, w, nu, target_energy, make_estimator, cfg=None,
                     sample_ids=None, band=0.10, max_evals=30, info=None):
    """Pick the l1 strength so the iterated ``||W alpha||_F`` lands within
    ``band`` of ``target_energy``.

    ``make_estimator(lam)`` builds the ``X beta`` estimator. Larger lambda
    shrinks ``X beta`` and lets the alpha-step remove more, so the search
    bisects on log(lambda) toward the lower edge of the band, which keeps
    the iterations as active as the energy constraint allows. The bracket
    is ``[1e-6, 1e3] * lambda0`` with ``lambda0`` the largest entry of
    ``|X0^T Y|`` for the SVD start ``X0``; returns ``(lambda, energy)``.
    A dict passed as ``info`` receives the bracket and every evaluation.
    """
    cfg = cfg or IterationConfig()
    target = float(target_energy)
    if target < 0:
        raise ValueError("target_energy must be >= 0")
    p = make_estimator(1.0).p
    u, s, vt = np.linalg.svd(y.values, full_matrices=False)
    lam0 = float(np.max(np.abs(s[:p, None] * vt[:p])))
    if lam0 <= 0:
        raise DegenerateError("Y is zero; cannot bracket lambda")
    cache = {}

    def energy(lam):
        if lam not in cache:
            run_cfg = IterationConfig(cfg.max_iters, cfg.w_refresh_period, lam, nu, cfg.tol)
            res, _ = iterate_correction(y, w, make_estimator(lam), run_cfg, sample_ids)
            cache[lam] = res.removed_energy
            log.debug("calibrate_lambda: lambda=%.6g energy=%.6g target=%.6g",
                      lam, cache[lam], target)
        return cache[lam]

    lo, hi = 1e-6 * lam0, 1e3 * lam0
    if info is not None:
        info.update(lambda0=lam0, bracket=[lo, hi], target=target, band=band,
                    evaluations=cache)
    lower, upper = (1 - band) * target, (1 + band) * target
    aim = (1 - band / 2) * target

    def inside(e):
        return lower <= e <= upper

    e_lo, e_hi = energy(lo), energy(hi)
    if inside(e_lo):
        return lo, e_lo
    if (e_lo - aim) * (e_hi - aim) > 0:
        if inside(e_hi):
            return hi, e_hi
        # no bracket: closest achievable endpoint
        best = min((abs(e_lo - target), lo), (abs(e_hi - target), hi))[1]
        log.warning("calibrate_lambda: no bracket in [%.3g, %.3g]; using %.3g", lo, hi, best)
        return best, energy(best)
    for _ in range(max_evals):
        mid = float(np.sqrt(lo * hi))
        e_mid = energy(mid)
        if inside(e_mid) and abs(e_mid - aim) <= band * target / 2:
            return mid, e_mid
        if (e_lo - aim) * (e_mid - aim) <= 0:
            hi, e_hi = mid, e_mid
        else:
            lo, e_lo = mid, e_mid
        if hi / lo < 1 + 1e-6:
            break
    cands = [(abs(e - aim), lam) for lam, e in ((lo, e_lo), (hi, e_hi)) if inside(e)]
    if cands:
        lam = min(cands)[1]
        return lam, energy(lam)
    lam = min((abs(e_lo - target), lo), (abs(e_hi - target), hi))[1]
    return lam, energy(lam)
