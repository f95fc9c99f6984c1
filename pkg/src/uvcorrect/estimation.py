"""Estimators of the unwanted-variation loading matrix ``W`` (m x k)."""

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .data import (
    ControlGeneSet,
    DataError,
    ExpressionMatrix,
    ReplicateDifferenceSet,
    atomic_write_text,
)
from .linalg import as_matrix

PROVENANCES = (
    "control-genes",
    "replicates",
    "combined",
    "known-factors",
    "residual-updated",
)

SINGULAR_RTOL = 1e-10


class DegenerateError(ValueError):
    """The data carry no unwanted variation to estimate."""


class RankReductionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class UVModel:
    """An estimate of ``W`` plus whatever is needed to reuse or refresh it.

    ``alpha`` is only set by the replicate estimator, whose correction
    removes ``w_hat @ alpha`` directly. ``parents`` holds the two inputs of
    a combined model. ``params`` records estimator arguments (rank,
    control indices, ...) so the same pathway can be rerun on residuals.
    """

    w_hat: np.ndarray
    provenance: str
    nu: float = None
    alpha: np.ndarray = None
    parents: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.w_hat, dtype=np.float64)
        if w.ndim != 2 or not np.all(np.isfinite(w)):
            raise ValueError("w_hat must be a finite 2-D array")
        object.__setattr__(self, "w_hat", w)
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "combined" and len(self.parents) != 2:
            raise ValueError("combined model must store both parents")

    @property
    def k(self):
        return self.w_hat.shape[1]

    @property
    def m(self):
        return self.w_hat.shape[0]

    def with_nu(self, nu):
        return replace(self, nu=float(nu))


def _values(y):
    return y.values if isinstance(y, ExpressionMatrix) else as_matrix(y, "y")


def default_k(m, n_differences=None):
    """Rank heuristic: about a quarter of the samples, capped by the number
    of replicate differences when those are used."""
    k = max(1, int(round(m / 4)))
    if n_differences is not None:
        k = min(k, n_differences)
    return k


def _kept_rank(s, k, what):
    if s.size == 0 or s[0] == 0:
        raise DegenerateError(f"{what} is identically zero")
    r = int(np.sum(s[:k] > SINGULAR_RTOL * s[0]))
    if r < k:
        warnings.warn(
            f"{what} has numerical rank {r} < k={k}; using k={r}",
            RankReductionWarning,
            stacklevel=3,
        )
    return r


def _check_rank(k, upper, what):
    k = int(k)
    if not 1 <= k <= upper:
        raise ValueError(f"rank k={k} out of range [1, {upper}] for {what}")
    return k


def estimate_w_control_genes(y, controls, k):
    """``W2 = U Lambda_k`` from the SVD of the control-gene columns.

    Columns beyond the numerical rank of ``Y_c`` are set to zero.
    """
    values = _values(y)
    idx = controls.check(values.shape[1])
    yc = values[:, idx]
    k = _check_rank(k, min(yc.shape), "control-gene matrix")
    u, s, _ = np.linalg.svd(yc, full_matrices=False)
    if s[0] == 0:
        raise DegenerateError("control-gene matrix is identically zero")
    scale = np.where(s[:k] > SINGULAR_RTOL * s[0], s[:k], 0.0)
    return UVModel(
        u[:, :k] * scale,
        "control-genes",
        params={"k": k, "controls": idx.tolist()},
    )


def difference_operator(d, sample_ids):
    """Matrix ``D`` (|d| x m) with ``D @ Y`` equal to the difference rows."""
    row_of = {s: i for i, s in enumerate(sample_ids)}
    op = np.zeros((len(d.provenance), len(sample_ids)))
    if d.scheme == "all-pairs":
        for r, (a, b) in enumerate(d.provenance):
            op[r, row_of[a]] += 1.0
            op[r, row_of[b]] -= 1.0
    else:
        members = {}
        for s, g in d.provenance:
            members.setdefault(g, []).append(s)
        for r, (s, g) in enumerate(d.provenance):
            others = [o for o in members[g] if o != s]
            op[r, row_of[s]] += 1.0
            for o in others:
                op[r, row_of[o]] -= 1.0 / len(others)
    return op


def replicate_alpha(d_rows, k):
    """``alpha_hat = E_k Q^T`` from the SVD ``Y^d = P E Q^T``."""
    d_rows = as_matrix(d_rows, "replicate differences")
    k = _check_rank(k, min(d_rows.shape), "replicate differences")
    _, s, qt = np.linalg.svd(d_rows, full_matrices=False)
    r = _kept_rank(s, k, "replicate difference matrix")
    return s[:r, None] * qt[:r]


def estimate_w_replicates(y, controls, d, k, regress_on="controls"):
    """Replicate-based estimate of ``W``.

    ``alpha_hat = E_k Q^T`` is taken from the SVD of the difference rows,
    then ``W_hat = Y_c alpha_c^T (alpha_c alpha_c^T)^{-1}`` regresses the
    control-gene columns on it. ``regress_on="all"`` uses every feature
    for the regression instead. The model keeps ``alpha_hat`` (over all
    features) so that ``W_hat @ alpha_hat`` can be removed directly.
    """
    values = _values(y)
    idx = controls.check(values.shape[1])
    if regress_on not in ("controls", "all"):
        raise ValueError(f"regress_on must be 'controls' or 'all', got {regress_on!r}")
    d_rows = d.d_rows if isinstance(d, ReplicateDifferenceSet) else as_matrix(d)
    if d_rows.shape[1] != values.shape[1]:
        raise DataError("difference rows and matrix have different feature counts")
    if int(k) > d_rows.shape[0]:
        raise ValueError(f"rank k={k} exceeds the number of differences {d_rows.shape[0]}")
    alpha = replicate_alpha(d_rows, k)
    cols = idx if regress_on == "controls" else np.arange(values.shape[1])
    alpha_c = alpha[:, cols]
    gram = alpha_c @ alpha_c.T
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= SINGULAR_RTOL * ev[-1]:
        raise DegenerateError(
            "alpha_c alpha_c^T is singular: replicate variation is invisible on the "
            "regression features"
        )
    w_hat = np.linalg.solve(gram, alpha_c @ values[:, cols].T).T
    params = {
        "k": int(alpha.shape[0]),
        "controls": idx.tolist(),
        "regress_on": regress_on,
    }
    if isinstance(d, ReplicateDifferenceSet):
        params["scheme"] = d.scheme
        params["provenance"] = [list(p) for p in d.provenance]
    return UVModel(w_hat, "replicates", alpha=alpha, params=params)


@dataclass(frozen=True)
class RankDiagnostic:
    projector: np.ndarray
    rank: int
    deleted: tuple
    collapsed: tuple


def replicate_rank_diagnostic(w_d, atol=1e-10):
    """``B_r B_r^T`` from the SVD ``W^d = A Delta B^T`` at numerical rank r.

    Factors whose diagonal entry vanishes are deleted from the replicate
    estimate; factors coupled by off-diagonal entries are collapsed
    together.
    """
    w_d = as_matrix(w_d, "w_d")
    _, s, bt = np.linalg.svd(w_d, full_matrices=True)
    if s.size == 0 or s[0] == 0:
        raise DegenerateError("W^d is the zero matrix")
    r = int(np.sum(s > SINGULAR_RTOL * s[0]))
    b_r = bt[:r].T
    proj = b_r @ b_r.T
    proj[np.abs(proj) < atol] = 0.0
    kk = proj.shape[0]
    deleted = tuple(i for i in range(kk) if abs(proj[i, i]) <= atol)
    seen, collapsed = set(), []
    for i in range(kk):
        if i in seen or i in deleted:
            continue
        block = [j for j in range(kk) if j != i and abs(proj[i, j]) > atol]
        if block:
            grp = tuple(sorted({i, *block}))
            seen.update(grp)
            collapsed.append(grp)
    return RankDiagnostic(proj, r, deleted, tuple(collapsed))


def combine_w(a, b):
    """Concatenate two loading estimates; their Gram matrices add up."""
    if a.m != b.m:
        raise ValueError(f"row mismatch: {a.m} vs {b.m}")
    return UVModel(
        np.hstack([a.w_hat, b.w_hat]), "combined", parents=(a, b), params={"k": a.k + b.k}
    )


def estimate_w_residuals(y, xbeta_hat, k):
    """Top-k left singular vectors, scaled, of ``Y - X_hat beta_hat``."""
    values = _values(y)
    xb = as_matrix(xbeta_hat, "xbeta_hat")
    if xb.shape != values.shape:
        raise ValueError(f"xbeta_hat shape {xb.shape} != Y shape {values.shape}")
    resid = values - xb
    k = _check_rank(k, min(resid.shape), "residual matrix")
    u, s, _ = np.linalg.svd(resid, full_matrices=False)
    r = _kept_rank(s, k, "residual matrix")
    return UVModel(u[:, :r] * s[:r], "residual-updated", params={"k": r})


def known_w(ann, factors, sample_ids):
    """One-hot encoding of the cross-classification of known factors.

    One column per occupied cell, in sorted cell order.
    """
    factors = list(factors)
    if not factors:
        raise ValueError("at least one factor is required")
    cols = [ann.factor(f, list(sample_ids)) for f in factors]
    keys = list(zip(*cols))
    cells = sorted(set(keys))
    pos = {c: j for j, c in enumerate(cells)}
    w = np.zeros((len(keys), len(cells)))
    for i, key in enumerate(keys):
        w[i, pos[key]] = 1.0
    return UVModel(
        w, "known-factors", params={"factors": factors, "cells": [list(c) for c in cells]}
    )


def refresh_w(model, y, xbeta_hat, sample_ids=None):
    """Rerun the pathway that produced ``model`` on ``Y - X_hat beta_hat``.

    Control-gene models redo the SVD of the residual control columns,
    replicate models rebuild the differences from the residual rows,
    combined models refresh both parents. Known factors are left alone.
    """
    values = _values(y)
    resid = values - as_matrix(xbeta_hat, "xbeta_hat")
    p = model.params
    if model.provenance == "control-genes":
        return estimate_w_control_genes(resid, ControlGeneSet(p["controls"]), p["k"])
    if model.provenance == "replicates":
        if "provenance" not in p or sample_ids is None:
            return estimate_w_residuals(values, xbeta_hat, model.k)
        d = ReplicateDifferenceSet(
            np.zeros((0, 0)), p["scheme"], tuple(tuple(x) for x in p["provenance"])
        )
        d_rows = difference_operator(d, sample_ids) @ resid
        d = ReplicateDifferenceSet(d_rows, p["scheme"], d.provenance)
        return estimate_w_replicates(
            resid, ControlGeneSet(p["controls"]), d, min(p["k"], len(d)), p["regress_on"]
        )
    if model.provenance == "combined":
        a, b = model.parents
        return combine_w(
            refresh_w(a, values, xbeta_hat, sample_ids),
            refresh_w(b, values, xbeta_hat, sample_ids),
        )
    if model.provenance == "residual-updated":
        return estimate_w_residuals(values, xbeta_hat, model.k)
    return model


# -- serialization -----------------------------------------------------------


def _model_meta(model):
    meta = {"provenance": model.provenance, "k": model.k, "nu": model.nu,
            "params": model.params}
    if model.parents:
        meta["parents"] = [_model_meta(p) for p in model.parents]
    return meta


def save_uvmodel(model, path, sample_ids):
    """Write ``w_hat`` as CSV (sample_id, w1..wk) and a JSON sidecar with
    provenance, parameters and, for combined models, the parents' layout."""
    header = ",".join(["sample_id"] + [f"w{j + 1}" for j in range(model.k)])
    lines = [header]
    for sid, row in zip(sample_ids, model.w_hat):
        lines.append(",".join([sid, *map(repr, row.tolist())]))
    atomic_write_text(path, "\n".join(lines) + "\n")
    text = json.dumps(_model_meta(model), indent=2, sort_keys=True) + "\n"
    atomic_write_text(str(path) + ".json", text)


def _model_from_meta(w, meta):
    parents = ()
    if meta.get("parents"):
        parts, start = [], 0
        for pm in meta["parents"]:
            parts.append(_model_from_meta(w[:, start:start + pm["k"]], pm))
            start += pm["k"]
        if start != w.shape[1]:
            raise DataError("combined model columns do not match its parents")
        parents = tuple(parts)
    return UVModel(w, meta["provenance"], nu=meta.get("nu"), parents=parents,
                   params=meta.get("params", {}))


def load_uvmodel(path):
    """Inverse of :func:`save_uvmodel`; returns ``(model, sample_ids)``."""
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    with open(str(path) + ".json", encoding="utf-8") as fh:
        meta = json.load(fh)
    w = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    if w.size == 0:
        w = w.reshape(len(rows) - 1, 0)
    return _model_from_meta(w, meta), [r[0] for r in rows[1:]]
