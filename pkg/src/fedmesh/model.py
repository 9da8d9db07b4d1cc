"""Uniform model interface plus the two native models: linear classifier and ID3 tree."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Union

import numpy as np

from .data import Dataset, Schema
from .errors import FormatError, IoError, NumericError, ShapeError
from .seeding import derive_rng

if TYPE_CHECKING:
    from .fusion import CountsTable

FORMAT_VERSION = 1
LOSSES = ("logistic", "squared")

WeightMap = dict[str, np.ndarray]


def as_weight_map(raw: Mapping[str, Any]) -> WeightMap:
    """Copy ``raw`` into a WeightMap of flat float64 vectors, rejecting NaN/Inf."""
    out: WeightMap = {}
    for key in sorted(raw):
        vec = np.array(raw[key], dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise NumericError(f"weight group {key!r} contains non-finite values")
        out[str(key)] = vec
    return out


def shape_compatible(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return set(a) == set(b) and all(len(a[k]) == len(b[k]) for k in a)


def copy_weights(w: Mapping[str, np.ndarray]) -> WeightMap:
    return {k: np.array(v, dtype=np.float64, copy=True) for k, v in w.items()}


def weights_to_json(w: Mapping[str, np.ndarray]) -> dict[str, list[float]]:
    return {k: [float(x) for x in w[k]] for k in sorted(w)}


def weights_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    return shape_compatible(a, b) and all(np.array_equal(a[k], b[k]) for k in a)


@dataclass
class LinearModel:
    """Multiclass linear classifier.

    ``coef`` is stored row-major as (n_features, n_classes); scores are
    ``x @ coef + bias``.
    """

    n_features: int
    n_classes: int
    loss: str = "logistic"
    weights: WeightMap = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_features < 1 or self.n_classes < 2:
            raise ShapeError("need n_features >= 1 and n_classes >= 2")
        if self.loss not in LOSSES:
            raise FormatError(f"unknown loss {self.loss!r}")
        if not self.weights:
            self.weights = {
                "bias": np.zeros(self.n_classes),
                "coef": np.zeros(self.n_features * self.n_classes),
            }
        self.weights = as_weight_map(self.weights)
        if not shape_compatible(self.weights, self.expected_shapes()):
            raise ShapeError(f"weights do not match ({self.n_features}, {self.n_classes})")

    def expected_shapes(self) -> dict[str, np.ndarray]:
        return {"bias": np.empty(self.n_classes), "coef": np.empty(self.n_features * self.n_classes)}

    @property
    def coef(self) -> np.ndarray:
        return self.weights["coef"].reshape(self.n_features, self.n_classes)

    @property
    def bias(self) -> np.ndarray:
        return self.weights["bias"]

    def scores(self, X: np.ndarray) -> np.ndarray:
        return X @ self.coef + self.bias


@dataclass
class TreeNode:
    kind: str
    feature: int | None = None
    children: dict[int, "TreeNode"] = field(default_factory=dict)
    label: int | None = None
    # majority class of the training counts at this node; the fallback label
    # when a row carries a value with no matching child
    majority: int | None = None

    @classmethod
    def leaf(cls, label: int) -> "TreeNode":
        return cls("leaf", label=label, majority=label)

    @property
    def is_leaf(self) -> bool:
        return self.kind == "leaf"

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(child.depth() for child in self.children.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "feature": self.feature,
            "children": {str(v): c.to_dict() for v, c in sorted(self.children.items())},
            "label": self.label,
            "majority": self.majority,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TreeNode":
        try:
            kind = d["kind"]
            if kind == "leaf":
                if d.get("children"):
                    raise FormatError("leaf node with children")
                return cls("leaf", label=int(d["label"]), majority=_opt_int(d.get("majority")))
            if kind != "internal":
                raise FormatError(f"unknown node kind {kind!r}")
            children = {int(v): cls.from_dict(c) for v, c in d["children"].items()}
            if not children:
                raise FormatError("internal node without children")
            return cls("internal", int(d["feature"]), children, None, _opt_int(d.get("majority")))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed tree node: {exc}") from exc


def _opt_int(v: Any) -> int | None:
    return None if v is None else int(v)


@dataclass
class DecisionTree:
    schema: Schema
    max_depth: int = 8
    root: TreeNode = field(default_factory=lambda: TreeNode.leaf(0))

    def depth(self) -> int:
        return self.root.depth()

    def structure(self) -> dict[str, Any]:
        return self.root.to_dict()


Model = Union[LinearModel, DecisionTree]


@dataclass
class ModelUpdate:
    """A party's reply for one round.

    Behaves like the reply dictionary the aggregator inspects: ``weights``
    and ``nsamples`` for averaging fusions, ``counts`` for ID3.
    """

    weights: WeightMap | None = None
    nsamples: int | None = None
    counts: "CountsTable | None" = None
    extras: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.weights is None and self.counts is None:
            raise ShapeError("a model update carries weights or counts")
        if self.nsamples is not None and self.nsamples < 0:
            raise ShapeError("nsamples must be non-negative")

    def keys(self) -> list[str]:
        out = [k for k in ("weights", "nsamples", "counts") if getattr(self, k) is not None]
        return out + sorted(self.extras)

    def __contains__(self, key: str) -> bool:
        return key in self.keys()


@dataclass
class TrainReport:
    loss_trace: list[float]
    epochs_run: int


@dataclass
class Metrics:
    accuracy: float
    n: int


def loss_and_grad(model: LinearModel, X: np.ndarray, y: np.ndarray) -> tuple[float, WeightMap]:
    """Mean loss over the batch and its gradient w.r.t. each weight group."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    s = model.scores(X)
    onehot = np.zeros_like(s)
    onehot[np.arange(n), y] = 1.0
    if model.loss == "logistic":
        shifted = s - s.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -float(logp[np.arange(n), y].sum()) / n
        g = (np.exp(logp) - onehot) / n
    else:
        diff = s - onehot
        loss = 0.5 * float((diff * diff).sum()) / n
        g = diff / n
    return loss, {"bias": g.sum(axis=0), "coef": (X.T @ g).reshape(-1)}


def _check_dims(model: Model, dataset: Dataset) -> None:
    if isinstance(model, LinearModel):
        if dataset.X.shape[1] != model.n_features:
            raise ShapeError(f"dataset has {dataset.X.shape[1]} features, model expects {model.n_features}")
        if dataset.schema.n_classes != model.n_classes:
            raise ShapeError(f"dataset has {dataset.schema.n_classes} classes, model expects {model.n_classes}")
    elif dataset.schema != model.schema:
        raise ShapeError("dataset schema does not match the tree schema")


def fit_model(
    model: Model,
    dataset: Dataset,
    hyperparams: Mapping[str, Any],
    *,
    seed: int = 0,
    party_id: str = "",
    round: int = 0,
) -> TrainReport:
    """Train ``model`` in place.

    Linear models run mini-batch gradient descent, reshuffling each epoch
    from ``(seed, party_id, round, epoch)``. Trees are grown centrally by ID3.
    """
    if len(dataset) == 0:
        raise ShapeError("cannot fit on an empty dataset")
    _check_dims(model, dataset)
    if isinstance(model, DecisionTree):
        from .fusion import grow_tree_centralized

        model.root = grow_tree_centralized(dataset, model.max_depth).root
        return TrainReport([], 0)

    epochs = int(hyperparams["epochs"])
    lr = float(hyperparams["learning_rate"])
    batch = int(hyperparams["batch_size"])
    if epochs < 1 or batch < 1 or lr < 0:
        raise ValueError("need epochs >= 1, batch_size >= 1, learning_rate >= 0")

    X, y = dataset.X, dataset.y
    n = len(y)
    trace: list[float] = []
    # divergence is detected through the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(epochs):
            order = derive_rng(seed, party_id, round, epoch).permutation(n)
            for start in range(0, n, batch):
                idx = order[start : start + batch]
                loss, grad = loss_and_grad(model, X[idx], y[idx])
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite loss in epoch {epoch}")
                for k in model.weights:
                    model.weights[k] = model.weights[k] - lr * grad[k]
            loss, _ = loss_and_grad(model, X, y)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(v)) for v in model.weights.values()):
                raise NumericError(f"training diverged in epoch {epoch}")
            trace.append(loss)
    return TrainReport(trace, epochs)


def _descend(tree: DecisionTree, row: np.ndarray) -> int:
    node = tree.root
    while not node.is_leaf:
        value = row[node.feature]
        child = node.children.get(int(value)) if float(value).is_integer() else None
        if child is None:
            return int(node.majority if node.majority is not None else 0)
        node = child
    return int(node.label)


def predict(model: Model, feature_row: Any) -> int:
    row = np.asarray(feature_row, dtype=np.float64).reshape(-1)
    expected = model.n_features if isinstance(model, LinearModel) else model.schema.n_features
    if len(row) != expected:
        raise ShapeError(f"row has {len(row)} features, model expects {expected}")
    if isinstance(model, LinearModel):
        return int(np.argmax(model.scores(row[None, :])[0]))
    return _descend(model, row)


def predict_batch(model: Model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, LinearModel):
        return np.argmax(model.scores(np.asarray(X, dtype=np.float64)), axis=1)
    return np.array([_descend(model, row) for row in X], dtype=np.int64)


def evaluate_model(model: Model, dataset: Dataset) -> Metrics:
    if len(dataset) == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    _check_dims(model, dataset)
    correct = int((predict_batch(model, dataset.X) == dataset.y).sum())
    return Metrics(correct / len(dataset), len(dataset))


def get_model_update(model: Model, include_nsamples: bool = False, n: int = 0) -> ModelUpdate:
    if isinstance(model, DecisionTree):
        raise ShapeError("tree models reply with counts, not weight updates")
    return ModelUpdate(copy_weights(model.weights), nsamples=int(n) if include_nsamples else None)


def update_model(model: Model, update: ModelUpdate | Mapping[str, Any]) -> None:
    weights = update.weights if isinstance(update, ModelUpdate) else update
    if not isinstance(model, LinearModel):
        raise ShapeError("weight updates apply to linear models only")
    if weights is None:
        raise ShapeError("update carries no weights")
    new = as_weight_map(weights)
    if not shape_compatible(new, model.weights):
        raise ShapeError(
            f"update groups {sorted((k, len(v)) for k, v in new.items())} do not match "
            f"model groups {sorted((k, len(v)) for k, v in model.weights.items())}"
        )
    model.weights = new


def model_to_dict(model: Model) -> dict[str, Any]:
    if isinstance(model, LinearModel):
        return {
            "format_version": FORMAT_VERSION,
            "kind": "linear",
            "n_features": model.n_features,
            "n_classes": model.n_classes,
            "loss": model.loss,
            "weights": weights_to_json(model.weights),
        }
    return {
        "format_version": FORMAT_VERSION,
        "kind": "id3",
        "schema": model.schema.to_dict(),
        "max_depth": model.max_depth,
        "root": model.root.to_dict(),
    }


def model_from_dict(d: Mapping[str, Any]) -> Model:
    if not isinstance(d, Mapping):
        raise FormatError("model document must be a JSON object")
    if d.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {d.get('format_version')!r}")
    kind = d.get("kind")
    try:
        if kind == "linear":
            return LinearModel(int(d["n_features"]), int(d["n_classes"]), str(d["loss"]), dict(d["weights"]))
        if kind == "id3":
            tree = DecisionTree(Schema.from_dict(d["schema"]), int(d["max_depth"]), TreeNode.from_dict(d["root"]))
            if tree.depth() > tree.max_depth:
                raise FormatError("tree deeper than its max_depth")
            return tree
    except (KeyError, TypeError, ValueError, ShapeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed {kind} model: {exc}") from exc
    raise FormatError(f"unknown model kind {kind!r}")


def dumps_model(model: Model) -> str:
    return json.dumps(model_to_dict(model), indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_model(model: Model, path: str | Path) -> None:
    text = dumps_model(model)
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write model to {path}: {exc}") from exc


def load_model(path: str | Path) -> Model:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read model from {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    return model_from_dict(doc)


def clone(model: Model) -> Model:
    return copy.deepcopy(model)
