"""Expression matrices, sample annotations, control genes and replicate
differences, with CSV/TSV ingestion and validation."""

import csv
import itertools
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REPLICATE_FACTOR = "replicate_group"
TRUTH_FACTOR = "truth_label"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def _check_unique(ids, kind):
    seen = set()
    for i in ids:
        if i in seen:
            raise DataError(f"duplicate {kind} id: {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class ExpressionMatrix:
    """Samples x features matrix with row and column identifiers."""

    values: np.ndarray
    sample_ids: tuple
    feature_ids: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "sample_ids", tuple(str(s) for s in self.sample_ids))
        object.__setattr__(self, "feature_ids", tuple(str(f) for f in self.feature_ids))
        m, n = values.shape
        if len(self.sample_ids) != m or len(self.feature_ids) != n:
            raise DataError(
                f"id counts ({len(self.sample_ids)}, {len(self.feature_ids)}) "
                f"do not match matrix shape {values.shape}"
            )
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.feature_ids, "feature")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise DataError(f"non-finite value at sample {i}, feature {j}")

    @property
    def shape(self):
        return self.values.shape

    def with_values(self, values):
        return ExpressionMatrix(values, self.sample_ids, self.feature_ids)

    def select_features(self, idx):
        idx = np.asarray(idx, dtype=int)
        return ExpressionMatrix(
            self.values[:, idx], self.sample_ids, [self.feature_ids[i] for i in idx]
        )

    def feature_indices(self, ids):
        lookup = {f: j for j, f in enumerate(self.feature_ids)}
        try:
            return [lookup[i] for i in ids]
        except KeyError as exc:
            raise DataError(f"unknown feature id {exc.args[0]!r}") from None


@dataclass(frozen=True)
class SampleAnnotations:
    """Per-sample factor levels.

    ``levels`` maps factor name to ``{sample_id: level}``. The reserved
    factors ``replicate_group`` and ``truth_label`` carry the replicate
    structure and the held-out ground truth.
    """

    levels: dict = field(default_factory=dict)

    def factor(self, name, sample_ids):
        """Levels of ``name`` for ``sample_ids``, in order."""
        if name not in self.levels:
            raise DataError(f"unknown factor {name!r}")
        col = self.levels[name]
        missing = [s for s in sample_ids if s not in col]
        if missing:
            raise DataError(f"factor {name!r} not annotated for sample {missing[0]!r}")
        return [col[s] for s in sample_ids]

    def has(self, name):
        return name in self.levels

    def replicate_groups(self, sample_ids):
        """``{group: [sample_id, ...]}`` restricted to ``sample_ids``."""
        col = self.levels.get(REPLICATE_FACTOR, {})
        groups = {}
        for s in sample_ids:
            g = col.get(s)
            if g is not None and g != "":
                groups.setdefault(g, []).append(s)
        return groups

    def validate(self, y):
        known = set(y.sample_ids)
        for name, col in self.levels.items():
            for s in col:
                if s not in known:
                    raise DataError(f"annotated sample {s!r} ({name}) not in matrix")


@dataclass(frozen=True)
class ControlGeneSet:
    indices: tuple

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise DataError("control gene set is empty")
        if len(set(idx)) != len(idx):
            raise DataError("control gene set has duplicate indices")
        object.__setattr__(self, "indices", idx)

    def check(self, n):
        bad = [i for i in self.indices if not 0 <= i < n]
        if bad:
            raise DataError(f"control index {bad[0]} out of range for {n} features")
        return np.asarray(self.indices, dtype=int)

    @classmethod
    def from_ids(cls, y, ids):
        return cls(y.feature_indices(ids))

    def __len__(self):
        return len(self.indices)


SCHEMES = ("all-pairs", "vs-group-mean")


@dataclass(frozen=True)
class ReplicateDifferenceSet:
    d_rows: np.ndarray
    scheme: str
    provenance: tuple

    def __len__(self):
        return self.d_rows.shape[0]


# -- ingestion ---------------------------------------------------------------


def _delimiter(format_spec, path):
    if format_spec in (None, "auto"):
        return "\t" if str(path).endswith((".tsv", ".txt")) else ","
    return {"tsv": "\t", "tab": "\t", "\t": "\t", "csv": ",", "comma": ",", ",": ","}[
        format_spec
    ]


def load_matrix(path, format_spec="auto"):
    """Read a samples x features table.

    The header row holds feature ids (its first cell is ignored), the
    first column holds sample ids. Missing values are rejected.
    """
    delim = _delimiter(format_spec, path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delim))
    rows = [r for r in rows if r]
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one data row")
    header = rows[0]
    feature_ids = header[1:]
    sample_ids, values = [], []
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(
                f"{path}: line {i} has {len(row)} fields, expected {len(header)}"
            )
        sample_ids.append(row[0])
        vals = []
        for j, cell in enumerate(row[1:]):
            try:
                v = float(cell)
            except ValueError:
                v = float("nan")
            if not np.isfinite(v):
                raise DataError(
                    f"{path}: non-numeric value {cell!r} at line {i}, column {j + 2} "
                    f"(sample {row[0]!r}, feature {feature_ids[j]!r})"
                )
            vals.append(v)
        values.append(vals)
    return ExpressionMatrix(np.array(values, dtype=np.float64), sample_ids, feature_ids)


def atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_matrix(y, path, format_spec="auto", corner="sample_id"):
    """Write ``y`` so that :func:`load_matrix` restores identical floats."""
    delim = _delimiter(format_spec, path)
    lines = [delim.join([corner, *y.feature_ids])]
    for sid, row in zip(y.sample_ids, y.values):
        lines.append(delim.join([sid, *map(repr, row.tolist())]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_annotations(path):
    """Long-format CSV with columns ``sample_id, factor, level``."""
    levels = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"sample_id", "factor", "level"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns sample_id, factor, level")
        for row in reader:
            col = levels.setdefault(row["factor"], {})
            if row["sample_id"] in col and col[row["sample_id"]] != row["level"]:
                raise DataError(
                    f"{path}: conflicting {row['factor']!r} levels for {row['sample_id']!r}"
                )
            col[row["sample_id"]] = row["level"]
    return SampleAnnotations(levels)


def write_annotations(ann, path):
    lines = ["sample_id,factor,level"]
    for name in sorted(ann.levels):
        for sid, level in ann.levels[name].items():
            lines.append(f"{sid},{name},{level}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_controls(path, y):
    """Control feature ids, one per line."""
    with open(path, encoding="utf-8") as fh:
        ids = [line.strip() for line in fh if line.strip()]
    return ControlGeneSet.from_ids(y, ids)


def write_controls(y, controls, path):
    atomic_write_text(path, "".join(y.feature_ids[i] + "\n" for i in controls.indices))


# -- replicate differences and centering -------------------------------------


def build_differences(y, ann, scheme="all-pairs"):
    """Difference profiles of replicate samples.

    ``all-pairs`` emits ``y_a - y_b`` for every unordered pair ``a < b``
    (lexicographic ids) within a group; ``vs-group-mean`` emits each member
    minus the mean of the other members. Groups are visited in sorted order.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown difference scheme {scheme!r}")
    row_of = {s: i for i, s in enumerate(y.sample_ids)}
    groups = ann.replicate_groups(y.sample_ids)
    rows, prov = [], []
    for g in sorted(groups):
        members = sorted(groups[g])
        if len(members) < 2:
            continue
        idx = [row_of[s] for s in members]
        if scheme == "all-pairs":
            for a, b in itertools.combinations(range(len(members)), 2):
                rows.append(y.values[idx[a]] - y.values[idx[b]])
                prov.append((members[a], members[b]))
        else:
            block = y.values[idx]
            total = block.sum(axis=0)
            for a, s in enumerate(members):
                others = (total - block[a]) / (len(members) - 1)
                rows.append(block[a] - others)
                prov.append((s, g))
    if not rows:
        raise DataError("no replicate group with at least two samples")
    return ReplicateDifferenceSet(np.vstack(rows), scheme, tuple(prov))


def _cell_keys(ann, factors, sample_ids):
    if not factors:
        raise DataError("at least one factor is required")
    cols = [ann.factor(f, sample_ids) for f in factors]
    return list(zip(*cols))


def subtract_group_means(values, keys, reference=None):
    """Subtract, within each key, the mean of the reference rows."""
    out = values.copy()
    if reference is None:
        reference = [True] * len(keys)
    for key in sorted(set(keys)):
        rows = [i for i, k in enumerate(keys) if k == key]
        ref = [i for i in rows if reference[i]]
        if not ref:
            raise DataError(f"group {key!r} has no reference sample")
        out[rows] -= values[ref].mean(axis=0)
    return out


def center_by_factor(y, ann, factors):
    """Center each cell of the cross-classification of ``factors``."""
    keys = _cell_keys(ann, list(factors), y.sample_ids)
    return y.with_values(subtract_group_means(y.values, keys))
