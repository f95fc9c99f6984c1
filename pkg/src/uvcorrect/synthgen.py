"""Synthetic data from ``Y = X beta + W alpha + eps`` with known truth.

Designs:

``orthogonal-full``
    every biological sample is measured once in each batch, so batch and
    factor of interest are exactly orthogonal;
``confounded``
    outside the replicate groups, a fraction ``confounding_strength`` of
    the samples sits in the batch matching its class, the rest are spread
    evenly over batches.

Normal draws go through the inverse normal CDF of PCG64 uniforms so a seed
gives the same data on every platform.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .data import (
    REPLICATE_FACTOR,
    TRUTH_FACTOR,
    ControlGeneSet,
    ExpressionMatrix,
    SampleAnnotations,
    atomic_write_text,
    write_annotations,
    write_controls,
    write_matrix,
)

DESIGNS = ("orthogonal-full", "confounded")
CONTROL_QUALITIES = ("clean", "leaky")
BATCH_FACTOR = "batch"


class LayoutError(ValueError):
    """The requested sample layout cannot be built."""


@dataclass(frozen=True)
class GeneratorSpec:
    m: int = 90
    n: int = 2000
    p: int = 3
    k_uv: int = 3
    sigma_alpha: float = 2.0
    sigma_eps: float = 1.0
    sigma_beta: float = 1.0
    sigma_beta_c: float = 1.0
    signal_fraction: float = 0.3
    design: str = "orthogonal-full"
    confounding_strength: float = 1.0
    n_replicate_groups: int = 5
    group_size: int = 3
    control_fraction: float = 0.25
    control_quality: str = "clean"
    sigma_bio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("m", "n", "p", "k_uv"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma_alpha", "sigma_eps", "sigma_beta", "sigma_beta_c", "sigma_bio"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0 <= self.confounding_strength <= 1:
            raise ValueError("confounding_strength must lie in [0, 1]")
        if not 0 < self.control_fraction <= 1:
            raise ValueError("control_fraction must lie in (0, 1]")
        if not 0 <= self.signal_fraction <= 1:
            raise ValueError("signal_fraction must lie in [0, 1]")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}")
        if self.control_quality not in CONTROL_QUALITIES:
            raise ValueError(f"unknown control quality {self.control_quality!r}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GroundTruth:
    x: np.ndarray
    beta: np.ndarray
    w: np.ndarray
    alpha: np.ndarray
    labels: np.ndarray
    batches: np.ndarray


@dataclass(frozen=True)
class SyntheticDataset:
    y: ExpressionMatrix
    annotations: SampleAnnotations
    controls: ControlGeneSet
    truth: GroundTruth
    spec: object = None


def _uniform(rng, size):
    # open interval (0, 1): midpoints of a 2^53 grid
    return (rng.integers(0, 2**53, size=size, dtype=np.int64) + 0.5) / 2.0**53


def normal(rng, size, scale=1.0):
    """Standard normals by inverse CDF, times ``scale``."""
    return scale * ndtri(_uniform(rng, size))


def _layout(spec, rng):
    """Per-sample (label, batch, replicate group or -1, biological unit)."""
    m, p, kb = spec.m, spec.p, spec.k_uv
    g, gs = spec.n_replicate_groups, spec.group_size
    if gs > kb:
        raise LayoutError(f"group_size={gs} exceeds the number of batches {kb}")
    if g and gs < 2:
        raise LayoutError("replicate groups need at least two members")
    labels, batches, groups, units = [], [], [], []
    if spec.design == "orthogonal-full":
        if m % kb:
            raise LayoutError(f"m={m} is not a multiple of the {kb} batches")
        n_bio = m // kb
        if g > n_bio:
            raise LayoutError(f"{g} replicate groups but only {n_bio} biological samples")
        rep = set(rng.permutation(n_bio)[:g].tolist())
        rep_index = {u: i for i, u in enumerate(sorted(rep))}
        for u in range(n_bio):
            for b in range(kb):
                labels.append(u % p)
                batches.append(b)
                groups.append(rep_index[u] if u in rep and b < gs else -1)
                units.append(u)
    else:
        n_rep = g * gs
        if n_rep > m:
            raise LayoutError(f"{n_rep} replicate samples exceed m={m}")
        for r in range(g):
            for b in range(gs):
                labels.append(r % p)
                batches.append(b)
                groups.append(r)
                units.append(r)
        rest = m - n_rep
        per_label = [list(range(c, rest, p)) for c in range(p)]
        slot = [0] * rest
        lab = [0] * rest
        for c, members in enumerate(per_label):
            n_aligned = int(round(spec.confounding_strength * len(members)))
            for pos, i in enumerate(members):
                lab[i] = c
                if pos < n_aligned:
                    slot[i] = c % kb
                else:
                    slot[i] = (pos - n_aligned) % kb
        for i in range(rest):
            labels.append(lab[i])
            batches.append(slot[i])
            groups.append(-1)
            units.append(g + i)
    return (
        np.array(labels),
        np.array(batches),
        np.array(groups),
        np.array(units),
    )


def generate(spec):
    """Draw a dataset and its ground truth from ``spec``."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    labels, batches, groups, units = _layout(spec, rng)
    m, n, p, kb = spec.m, spec.n, spec.p, spec.k_uv

    n_ctl = max(1, int(round(spec.control_fraction * n)))
    perm = rng.permutation(n)
    controls = np.sort(perm[:n_ctl])
    others = perm[n_ctl:]
    n_sig = int(round(spec.signal_fraction * others.size))
    signal = np.sort(others[:n_sig])

    x = np.zeros((m, p))
    x[np.arange(m), labels] = 1.0
    w = np.zeros((m, kb))
    w[np.arange(m), batches] = 1.0

    beta = np.zeros((p, n))
    beta[:, signal] = normal(rng, (p, signal.size), spec.sigma_beta)
    leak = normal(rng, (p, controls.size), spec.sigma_beta_c)
    if spec.control_quality == "leaky":
        beta[:, controls] = leak
    alpha = normal(rng, (kb, n), spec.sigma_alpha)
    eps = normal(rng, (m, n), spec.sigma_eps)
    n_units = int(units.max()) + 1
    bio = normal(rng, (n_units, n), spec.sigma_bio)[units]

    values = x @ beta + w @ alpha + bio + eps

    sample_ids = [f"s{i:03d}" for i in range(m)]
    feature_ids = [f"g{j:05d}" for j in range(n)]
    ann = {
        BATCH_FACTOR: {s: f"B{b}" for s, b in zip(sample_ids, batches)},
        TRUTH_FACTOR: {s: f"C{c}" for s, c in zip(sample_ids, labels)},
        REPLICATE_FACTOR: {
            s: f"R{gr:02d}" for s, gr in zip(sample_ids, groups) if gr >= 0
        },
    }
    truth = GroundTruth(x, beta, w, alpha, labels, batches)
    return SyntheticDataset(
        ExpressionMatrix(values, sample_ids, feature_ids),
        SampleAnnotations(ann),
        ControlGeneSet(controls.tolist()),
        truth,
        spec,
    )


def write_dataset(ds, out):
    """Write matrix.csv, annotations.csv, controls.txt and the ground-truth
    sidecar truth.json (X, W, labels, batches, generator spec) into ``out``.
    The sidecar is meant for tests and scoring only."""
    out = Path(out)
    write_matrix(ds.y, out / "matrix.csv")
    write_annotations(ds.annotations, out / "annotations.csv")
    write_controls(ds.y, ds.controls, out / "controls.txt")
    t = ds.truth
    doc = {
        "sample_ids": list(ds.y.sample_ids),
        "x": t.x.tolist(),
        "w": t.w.tolist(),
        "labels": t.labels.tolist(),
        "batches": t.batches.tolist(),
        "spec": asdict(ds.spec) if ds.spec is not None else None,
    }
    atomic_write_text(out / "truth.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return [out / n for n in ("matrix.csv", "annotations.csv", "controls.txt", "truth.json")]


# -- two-sample demonstration --------------------------------------------------


@dataclass(frozen=True)
class DemoSpec:
    """Genes as points in R^2 (two samples): X along the first axis, W1 at
    ``angle`` from X with scale ``scale_w1``, W2 orthogonal to W1."""

    n: int = 400
    control_fraction: float = 0.3
    cos_x_w1: float = 0.95
    scale_w1: float = 2.0
    scale_w2: float = 0.7
    sigma_beta: float = 1.0
    sigma_alpha: float = 1.0
    sigma_eps: float = 0.05
    seed: int = 0


def two_feature_demo(spec=None):
    """Dataset with m = 2 where the dominant UV direction leans on X.

    Returns a :class:`SyntheticDataset`; ``truth.w`` holds the unit
    directions scaled by their UV magnitudes and ``truth.x`` the unit X.
    """
    spec = spec or DemoSpec()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    c = float(np.clip(spec.cos_x_w1, -1.0, 1.0))
    s = float(np.sqrt(max(0.0, 1.0 - c * c)))
    x = np.array([[1.0], [0.0]])
    w1 = np.array([c, s])
    w2 = np.array([-s, c])
    w = np.column_stack([spec.scale_w1 * w1, spec.scale_w2 * w2])

    n_ctl = max(1, int(round(spec.control_fraction * spec.n)))
    controls = np.arange(n_ctl)
    beta = normal(rng, (1, spec.n), spec.sigma_beta)
    beta[:, controls] = 0.0
    alpha = normal(rng, (2, spec.n), spec.sigma_alpha)
    eps = normal(rng, (2, spec.n), spec.sigma_eps)
    values = x @ beta + w @ alpha + eps
    y = ExpressionMatrix(values, ["a", "b"], [f"g{j:04d}" for j in range(spec.n)])
    truth = GroundTruth(x, beta, w, alpha, np.zeros(2, dtype=int), np.zeros(2, dtype=int))
    return SyntheticDataset(y, SampleAnnotations({}), ControlGeneSet(controls.tolist()), truth, spec)


def gene_association(y_corrected, beta):
    """First canonical correlation, across genes, between the corrected
    coordinates and the true effects of the factor of interest."""
    from .linalg import first_canonical_correlation

    vals = y_corrected.values if isinstance(y_corrected, ExpressionMatrix) else y_corrected
    return first_canonical_correlation(np.asarray(vals).T, np.asarray(beta).T)
