"""Party data handling: schemas, CSV loading, splits and experiment partitioners."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import FormatError, IoError, PartitionError
from .seeding import derive_rng

NUMERIC = "numeric"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = NUMERIC
    domain: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in (NUMERIC, CATEGORICAL):
            raise FormatError(f"feature {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == CATEGORICAL and not self.domain:
            raise FormatError(f"feature {self.name!r}: categorical domain must be nonempty")
        if len(set(self.domain)) != len(self.domain):
            raise FormatError(f"feature {self.name!r}: duplicate domain values")


@dataclass(frozen=True)
class Schema:
    """Feature layout and label domain shared by every party of a session.

    Categorical values and labels are identified by their position in the
    configured domain lists, never by discovery order in the data.
    """

    features: tuple[FeatureSpec, ...]
    labels: tuple[str, ...]
    label_column: str = "label"

    def __post_init__(self) -> None:
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise FormatError("feature names must be unique")
        if self.label_column in names:
            raise FormatError(f"label column {self.label_column!r} is also a feature")
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise FormatError("label domain must be nonempty and unique")

    @property
    def n_features(self) -> int:
        return len(self.features)

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    @property
    def is_categorical(self) -> bool:
        return all(f.kind == CATEGORICAL for f in self.features)

    def domain_size(self, feature: int) -> int:
        return len(self.features[feature].domain)

    def to_dict(self) -> dict[str, Any]:
        feats = []
        for f in self.features:
            entry: dict[str, Any] = {"name": f.name, "kind": f.kind}
            if f.kind == CATEGORICAL:
                entry["domain"] = list(f.domain)
            feats.append(entry)
        return {"features": feats, "labels": list(self.labels), "label": self.label_column}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Schema":
        try:
            feats = tuple(
                FeatureSpec(str(f["name"]), str(f.get("kind", NUMERIC)), tuple(str(v) for v in f.get("domain") or ()))
                for f in d["features"]
            )
            return cls(feats, tuple(str(v) for v in d["labels"]), str(d.get("label", "label")))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed schema: {exc}") from exc

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def numeric_schema(n_features: int, n_classes: int) -> Schema:
    return Schema(
        tuple(FeatureSpec(f"x{i}") for i in range(n_features)),
        tuple(str(c) for c in range(n_classes)),
    )


@dataclass(frozen=True)
class Dataset:
    """Immutable table of feature rows and class ids.

    ``X`` is float64 throughout; categorical columns hold value ids.
    """

    X: np.ndarray
    y: np.ndarray
    schema: Schema = field(compare=False)

    def __post_init__(self) -> None:
        X = np.asarray(self.X, dtype=np.float64).reshape(-1, self.schema.n_features)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if len(X) != len(y):
            raise FormatError(f"{len(X)} feature rows but {len(y)} labels")
        if len(y) and (y.min() < 0 or y.max() >= self.schema.n_classes):
            raise FormatError("label id outside label domain")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.schema)

    def rows(self) -> Iterable[tuple[tuple[float, ...], int]]:
        for x, label in zip(self.X, self.y):
            yield tuple(float(v) for v in x), int(label)


def concat(parts: Sequence[Dataset]) -> Dataset:
    if not parts:
        raise ValueError("nothing to concatenate")
    schema = parts[0].schema
    return Dataset(np.concatenate([p.X for p in parts]), np.concatenate([p.y for p in parts]), schema)


def load_csv(path: str | Path, schema: Schema) -> Dataset:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            records = list(reader)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise FormatError(f"{path}: missing header row")
    header = [h.strip() for h in header]
    cols = {}
    for name in [f.name for f in schema.features] + [schema.label_column]:
        if name not in header:
            raise FormatError(f"{path}: missing column {name!r}")
        cols[name] = header.index(name)

    label_ids = {v: i for i, v in enumerate(schema.labels)}
    X = np.empty((len(records), schema.n_features))
    y = np.empty(len(records), dtype=np.int64)
    for r, rec in enumerate(records):
        if len(rec) != len(header):
            raise FormatError(f"{path}: row {r}: expected {len(header)} fields, got {len(rec)}")
        for j, spec in enumerate(schema.features):
            raw = rec[cols[spec.name]].strip()
            if spec.kind == CATEGORICAL:
                try:
                    X[r, j] = spec.domain.index(raw)
                except ValueError:
                    raise FormatError(
                        f"{path}: row {r}: value {raw!r} not in domain of {spec.name!r}"
                    ) from None
            else:
                try:
                    X[r, j] = float(raw)
                except ValueError:
                    raise FormatError(f"{path}: row {r}: {spec.name!r} is not numeric: {raw!r}") from None
        raw_label = rec[cols[schema.label_column]].strip()
        if raw_label not in label_ids:
            raise FormatError(f"{path}: row {r}: label {raw_label!r} not in label domain")
        y[r] = label_ids[raw_label]
    return Dataset(X, y, schema)


def save_csv(ds: Dataset, path: str | Path) -> None:
    schema = ds.schema
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f.name for f in schema.features] + [schema.label_column])
            for x, label in zip(ds.X, ds.y):
                row = []
                for spec, v in zip(schema.features, x):
                    row.append(spec.domain[int(v)] if spec.kind == CATEGORICAL else repr(float(v)))
                row.append(schema.labels[int(label)])
                w.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    n = len(ds)
    # guard against 0.7 * 10 == 7.000000000000001
    n_test = math.ceil(round(n * test_fraction, 9))
    perm = derive_rng(seed, "split").permutation(n)
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def partition(
    ds: Dataset,
    n_parties: int,
    strategy: str = "iid",
    *,
    alpha: float = 0.5,
    seed: int = 0,
) -> list[Dataset]:
    """Split ``ds`` into ``n_parties`` disjoint parts covering every row.

    ``iid`` deals shuffled rows round-robin. ``label_skew`` draws, per class,
    party proportions from a symmetric Dirichlet(alpha).
    """
    n = len(ds)
    if n_parties < 1:
        raise PartitionError("n_parties must be >= 1")
    if n_parties > n:
        raise PartitionError(f"{n_parties} parties but only {n} rows")
    rng = derive_rng(seed, "partition", strategy)
    if strategy == "iid":
        perm = rng.permutation(n)
        return [ds.subset(perm[i::n_parties]) for i in range(n_parties)]
    if strategy == "label_skew":
        if alpha <= 0:
            raise PartitionError("alpha must be > 0")
        buckets: list[list[int]] = [[] for _ in range(n_parties)]
        for c in range(ds.schema.n_classes):
            idx = rng.permutation(np.flatnonzero(ds.y == c))
            props = rng.dirichlet(np.full(n_parties, alpha))
            cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
            for p, chunk in enumerate(np.split(idx, cuts)):
                buckets[p].extend(int(i) for i in chunk)
        return [ds.subset(sorted(b)) for b in buckets]
    raise PartitionError(f"unknown partition strategy {strategy!r}")


def synth_blobs(
    n_per_class: int,
    n_classes: int,
    dim: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Unit-variance Gaussian clusters whose means are ``separation`` apart.

    Class c is centred on ``separation / sqrt(2)`` along axis ``c % dim``
    (sign flipped on wrap-around), so any two classes on distinct axes sit
    exactly ``separation`` apart.
    """
    rng = derive_rng(seed, "blobs")
    scale = separation / math.sqrt(2.0)
    X_parts, y_parts = [], []
    for c in range(n_classes):
        mean = np.zeros(dim)
        mean[c % dim] = scale if (c // dim) % 2 == 0 else -scale
        X_parts.append(rng.standard_normal((n_per_class, dim)) + mean)
        y_parts.append(np.full(n_per_class, c))
    X = np.concatenate(X_parts)
    y = np.concatenate(y_parts)
    perm = rng.permutation(len(y))
    return Dataset(X[perm], y[perm], numeric_schema(dim, n_classes))


PLAY_TENNIS_SCHEMA = Schema(
    (
        FeatureSpec("Outlook", CATEGORICAL, ("Sunny", "Overcast", "Rain")),
        FeatureSpec("Temperature", CATEGORICAL, ("Hot", "Mild", "Cool")),
        FeatureSpec("Humidity", CATEGORICAL, ("High", "Normal")),
        FeatureSpec("Wind", CATEGORICAL, ("Weak", "Strong")),
    ),
    ("Yes", "No"),
    "PlayTennis",
)

_PLAY_TENNIS_ROWS = [
    ("Sunny", "Hot", "High", "Weak", "No"),
    ("Sunny", "Hot", "High", "Strong", "No"),
    ("Overcast", "Hot", "High", "Weak", "Yes"),
    ("Rain", "Mild", "High", "Weak", "Yes"),
    ("Rain", "Cool", "Normal", "Weak", "Yes"),
    ("Rain", "Cool", "Normal", "Strong", "No"),
    ("Overcast", "Cool", "Normal", "Strong", "Yes"),
    ("Sunny", "Mild", "High", "Weak", "No"),
    ("Sunny", "Cool", "Normal", "Weak", "Yes"),
    ("Rain", "Mild", "Normal", "Weak", "Yes"),
    ("Sunny", "Mild", "Normal", "Strong", "Yes"),
    ("Overcast", "Mild", "High", "Strong", "Yes"),
    ("Overcast", "Hot", "Normal", "Weak", "Yes"),
    ("Rain", "Mild", "High", "Strong", "No"),
]


def play_tennis() -> Dataset:
    """Quinlan's 14-row weather dataset."""
    s = PLAY_TENNIS_SCHEMA
    X = [[s.features[j].domain.index(v) for j, v in enumerate(row[:4])] for row in _PLAY_TENNIS_ROWS]
    y = [s.labels.index(row[4]) for row in _PLAY_TENNIS_ROWS]
    return Dataset(np.array(X, dtype=np.float64), np.array(y), s)
