"""UCI-Adult ingestion, encoding, domain splits and attack datasets."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import format_array, parse_array

ATTRIBUTES = (
    "age",
    "workclass",
    "fnlwgt",
    "education",
    "education-num",
    "marital-status",
    "occupation",
    "relationship",
    "race",
    "sex",
    "capital-gain",
    "capital-loss",
    "hours-per-week",
    "native-country",
)
CONTINUOUS = ("age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week")
CATEGORICAL = tuple(a for a in ATTRIBUTES if a not in CONTINUOUS)
MISSING = "?"
DOMAIN_ATTR = "native-country"
SOURCE_COUNTRY = "United-States"

BATCH_RULES = {
    # rule name -> (attribute, value that makes a row "property-bearing")
    "any_non_white": ("race", "White", False),
    "any_female": ("sex", "Female", True),
}


class AdultParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class RawDataset:
    """Columns of raw attribute values plus the income string."""

    columns: dict[str, np.ndarray]
    income: np.ndarray
    source_file: np.ndarray
    line: np.ndarray
    n_dropped: int = 0

    def __len__(self) -> int:
        return len(self.income)

    @property
    def row_ids(self) -> np.ndarray:
        return np.array([f"{f}:{n}" for f, n in zip(self.source_file, self.line)])

    def take(self, idx) -> "RawDataset":
        return RawDataset(
            {k: v[idx] for k, v in self.columns.items()},
            self.income[idx],
            self.source_file[idx],
            self.line[idx],
        )


def _parse_file(path: Path) -> list[tuple[list[str], int]]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh, skipinitialspace=True), start=1):
            if not rec or (len(rec) == 1 and (not rec[0].strip() or rec[0].startswith("|"))):
                continue
            if len(rec) != len(ATTRIBUTES) + 1:
                raise AdultParseError(f"{path}:{lineno}: expected {len(ATTRIBUTES) + 1} fields, got {len(rec)}")
            rows.append(([v.strip() for v in rec], lineno))
    return rows


def load_adult(train_path: str | Path, test_path: str | Path, drop_missing: bool = True) -> RawDataset:
    """Parse ``adult.data`` and ``adult.test``.

    Test labels lose their trailing period. Rows with a ``?`` are dropped by
    default; with ``drop_missing=False`` they are kept and ``?`` becomes its
    own category.
    """
    records = []
    for path, tag in ((Path(train_path), "train"), (Path(test_path), "test")):
        for values, lineno in _parse_file(path):
            records.append((values, tag, lineno))
    keep = [r for r in records if not (drop_missing and MISSING in r[0][:-1])]
    columns = {}
    for j, name in enumerate(ATTRIBUTES):
        vals = [r[0][j] for r in keep]
        if name in CONTINUOUS:
            columns[name] = np.array(vals, dtype=np.float64)
        else:
            columns[name] = np.array(vals, dtype=object)
    income = np.array([r[0][-1].rstrip(".") for r in keep], dtype=object)
    return RawDataset(
        columns,
        income,
        np.array([r[1] for r in keep], dtype=object),
        np.array([r[2] for r in keep], dtype=np.int64),
        n_dropped=len(records) - len(keep),
    )


def vocabulary(raw: RawDataset) -> dict[str, list[str]]:
    """Sorted category list per categorical attribute."""
    return {a: sorted(set(raw.columns[a])) for a in CATEGORICAL}


@dataclass
class LabeledDataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str]
    feature_sources: list[str]  # attribute each column was derived from
    stats: dict[str, tuple[float, float]]
    prop: np.ndarray | None = None
    raw: RawDataset | None = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("feature rows and labels differ in length")
        if self.prop is not None:
            self.prop = np.asarray(self.prop, dtype=np.int64)
            if self.prop.shape != self.y.shape:
                raise ValueError("property labels do not align with rows")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            X=self.X[idx],
            y=self.y[idx],
            prop=None if self.prop is None else self.prop[idx],
            raw=None if self.raw is None else self.raw.take(idx),
        )

    def attribute(self, name: str) -> np.ndarray:
        if self.raw is None or name not in self.raw.columns:
            raise ConfigError(f"attribute {name!r} not available on this dataset")
        return self.raw.columns[name]


def preprocess(
    raw: RawDataset,
    drop_attrs: Sequence[str] = (),
    vocab: dict[str, list[str]] | None = None,
    stats: dict[str, tuple[float, float]] | None = None,
    positive_income: str = "<=50K",
) -> LabeledDataset:
    """Z-score continuous attributes, one-hot categorical ones.

    ``stats``/``vocab`` default to those of the rows being encoded. The task
    label is 1 for ``positive_income``.
    """
    unknown = set(drop_attrs) - set(ATTRIBUTES)
    if unknown:
        raise ConfigError(f"unknown attribute(s) {sorted(unknown)}")
    vocab = vocab or vocabulary(raw)
    if stats is None:
        stats = {}
        for a in CONTINUOUS:
            col = raw.columns[a]
            std = float(col.std())
            stats[a] = (float(col.mean()), std if std > 0 else 1.0)
    blocks, names, sources = [], [], []
    for a in ATTRIBUTES:
        if a in drop_attrs:
            continue
        col = raw.columns[a]
        if a in CONTINUOUS:
            mean, std = stats[a]
            blocks.append(((col - mean) / std)[:, None])
            names.append(a)
            sources.append(a)
        else:
            cats = vocab[a]
            onehot = (col[:, None] == np.array(cats, dtype=object)[None, :]).astype(np.float64)
            blocks.append(onehot)
            names += [f"{a}={c}" for c in cats]
            sources += [a] * len(cats)
    X = np.hstack(blocks) if blocks else np.zeros((len(raw), 0))
    y = (raw.income == positive_income).astype(np.int64)
    return LabeledDataset(X, y, names, sources, dict(stats), raw=raw)


@dataclass
class Split:
    train: LabeledDataset
    test: LabeledDataset


@dataclass
class DomainPair:
    source: Split
    target: Split


def split_domains(
    raw: RawDataset,
    drop_attrs: Sequence[str] = (),
    positive_income: str = "<=50K",
) -> DomainPair:
    """US rows form the source domain, every other row the target.

    Train/test follow the original file boundary. Each domain is encoded with
    its own train-split statistics over a shared category vocabulary; the
    country attribute is removed from the features.
    """
    vocab = vocabulary(raw)
    drop = tuple(dict.fromkeys([*drop_attrs, DOMAIN_ATTR]))
    is_source = raw.columns[DOMAIN_ATTR] == SOURCE_COUNTRY
    is_train = raw.source_file == "train"
    splits = []
    for dom in (is_source, ~is_source):
        train_raw = raw.take(np.flatnonzero(dom & is_train))
        test_raw = raw.take(np.flatnonzero(dom & ~is_train))
        train = preprocess(train_raw, drop, vocab, positive_income=positive_income)
        test = preprocess(test_raw, drop, vocab, stats=train.stats, positive_income=positive_income)
        splits.append(Split(train, test))
    return DomainPair(*splits)


def make_property_dataset(ds: LabeledDataset, property_attr: str, positive_value: str) -> LabeledDataset:
    """Remove ``property_attr`` from the features and expose it as a 0/1 label."""
    values = ds.attribute(property_attr)
    keep = [j for j, s in enumerate(ds.feature_sources) if s != property_attr]
    return replace(
        ds,
        X=ds.X[:, keep],
        feature_names=[ds.feature_names[j] for j in keep],
        feature_sources=[ds.feature_sources[j] for j in keep],
        prop=(values == positive_value).astype(np.int64),
    )


def row_has_property(ds: LabeledDataset, rule: str) -> np.ndarray:
    """Per-row indicator of the property a batch rule looks for."""
    if rule not in BATCH_RULES:
        raise ConfigError(f"unknown batch rule {rule!r}; expected one of {sorted(BATCH_RULES)}")
    attr, value, equal = BATCH_RULES[rule]
    col = ds.attribute(attr)
    return (col == value) if equal else (col != value)


def batch_label(ds: LabeledDataset, rule: str, idx) -> int:
    return int(np.any(row_has_property(ds, rule)[np.asarray(idx)]))


@dataclass
class BatchedDataset:
    data: LabeledDataset
    batches: np.ndarray  # (n_batches, B) row indices
    labels: np.ndarray
    rule: str

    @property
    def batch_size(self) -> int:
        return self.batches.shape[1]

    def counts(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        return pos, len(self.labels) - pos


def make_batch_property_dataset(ds: LabeledDataset, B: int, rule: str, seed: int) -> BatchedDataset:
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    if B > len(ds):
        raise ValueError(f"batch size {B} exceeds dataset size {len(ds)}")
    has = row_has_property(ds, rule)
    order = np.random.default_rng(seed).permutation(len(ds))
    n_batches = len(ds) // B
    batches = order[: n_batches * B].reshape(n_batches, B)
    labels = has[batches].any(axis=1).astype(np.int64)
    return BatchedDataset(ds, batches, labels, rule)


@dataclass
class ShadowSplit:
    pool: LabeledDataset
    partitions: list[tuple[np.ndarray, np.ndarray]]  # (train idx, out idx) into pool

    def __len__(self) -> int:
        return len(self.partitions)

    def datasets(self, k: int) -> tuple[LabeledDataset, LabeledDataset]:
        tr, out = self.partitions[k]
        return self.pool.subset(tr), self.pool.subset(out)


def shadow_split(pool: LabeledDataset, n_shadow: int, seed: int) -> ShadowSplit:
    if len(pool) < 2:
        raise ValueError("shadow pool needs at least 2 rows")
    if n_shadow < 1:
        raise ValueError("n_shadow must be >= 1")
    parts = []
    for k in range(n_shadow):
        perm = np.random.default_rng([seed, k]).permutation(len(pool))
        half = len(pool) // 2
        parts.append((np.sort(perm[:half]), np.sort(perm[half:])))
    return ShadowSplit(pool, parts)


def synth_gaussian(n: int, d: int, class_separation: float, seed: int, prop_separation: float = 0.0) -> LabeledDataset:
    """Two unit-variance blobs whose means differ by ``class_separation`` on the first axis.

    A second binary label (``prop``) shifts the last axis by ``prop_separation``.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    prop = rng.integers(0, 2, size=n)
    X = rng.normal(size=(n, d))
    X[:, 0] += class_separation * (y - 0.5)
    X[:, -1] += prop_separation * (prop - 0.5)
    names = [f"x{j}" for j in range(d)]
    return LabeledDataset(X, y, names, names, {}, prop=prop)


# -- persistence ---------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path: str | Path) -> None:
    """Write features/labels in the numeric text format, names to a JSON manifest."""
    path = Path(path)
    lines = ["tlleak-dataset 1"]
    lines += format_array("X", ds.X)
    lines += format_array("y", ds.y.astype(np.float64))
    if ds.prop is not None:
        lines += format_array("prop", ds.prop.astype(np.float64))
    path.write_text("\n".join(lines) + "\n")
    manifest = {"feature_names": ds.feature_names, "feature_sources": ds.feature_sources, "stats": ds.stats}
    path.with_suffix(".features.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path: str | Path) -> LabeledDataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if lines[0] != "tlleak-dataset 1":
        raise ValueError(f"{path} is not a saved dataset")
    arrays, pos = {}, 1
    while pos < len(lines) and lines[pos].strip():
        name, arr, pos = parse_array(lines, pos)
        arrays[name] = arr
    manifest = json.loads(path.with_suffix(".features.json").read_text())
    X = arrays["X"].reshape(-1, len(manifest["feature_names"]))
    return LabeledDataset(
        X,
        arrays["y"].ravel().astype(np.int64),
        manifest["feature_names"],
        manifest["feature_sources"],
        {k: tuple(v) for k, v in manifest["stats"].items()},
        prop=arrays["prop"].ravel().astype(np.int64) if "prop" in arrays else None,
    )
