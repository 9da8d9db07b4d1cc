"""Aggregator-side query generation and fusion.

Weight fusions (iterative average, FedAvg, coordinate-wise median) share one
query generator. Federated ID3 grows a tree at the aggregator, asking the
parties for class counts one node at a time.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .data import Dataset, Schema
from .errors import FusionError, TerminationSignal
from .model import (
    DecisionTree,
    LinearModel,
    Model,
    ModelUpdate,
    TreeNode,
    WeightMap,
    copy_weights,
    model_to_dict,
    shape_compatible,
)

TRAIN_WEIGHTS = "train_weights"
COUNTS_REQUEST = "counts_request"
SYNC = "sync"
EVAL = "eval"
QUERY_KINDS = (TRAIN_WEIGHTS, COUNTS_REQUEST, SYNC, EVAL)

WEIGHT_FUSIONS = ("iter_avg", "fedavg", "coord_median")
FUSION_KINDS = WEIGHT_FUSIONS + ("id3",)

# information gains closer than this are ties, resolved to the lowest feature index
IG_TIE_TOL = 1e-12


@dataclass(frozen=True)
class SplitCandidates:
    path: tuple[tuple[int, int], ...]
    candidate_features: tuple[int, ...]
    schema: Schema

    def __post_init__(self) -> None:
        on_path = {f for f, _ in self.path}
        if on_path & set(self.candidate_features):
            raise FusionError("candidate features overlap the node path")


@dataclass
class Query:
    round: int
    kind: str
    payload: Any = None
    hyperparams: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.kind!r}")
        if self.kind == COUNTS_REQUEST and not isinstance(self.payload, SplitCandidates):
            raise ValueError("counts_request queries carry SplitCandidates")
        if self.kind == TRAIN_WEIGHTS and not isinstance(self.payload, dict):
            raise ValueError("train_weights queries carry a weight map")


@dataclass
class CountsTable:
    """Class counts at a node, overall and broken down by each candidate split.

    ``node_total[c]`` counts class c; ``per_split[f][v, c]`` counts rows with
    feature f equal to value v and class c.
    """

    node_total: np.ndarray
    per_split: dict[int, np.ndarray]

    def __post_init__(self) -> None:
        self.node_total = np.asarray(self.node_total, dtype=np.int64).reshape(-1)
        self.per_split = {
            int(f): np.asarray(t, dtype=np.int64).reshape(-1, len(self.node_total))
            for f, t in sorted(self.per_split.items())
        }

    @classmethod
    def zeros(cls, schema: Schema, features: Sequence[int]) -> "CountsTable":
        return cls(
            np.zeros(schema.n_classes, dtype=np.int64),
            {f: np.zeros((schema.domain_size(f), schema.n_classes), dtype=np.int64) for f in features},
        )

    def layout(self) -> tuple[int, tuple[tuple[int, tuple[int, ...]], ...]]:
        return len(self.node_total), tuple((f, t.shape) for f, t in self.per_split.items())

    def __add__(self, other: "CountsTable") -> "CountsTable":
        if self.layout() != other.layout():
            raise FusionError("counts tables have different layouts")
        return CountsTable(
            self.node_total + other.node_total,
            {f: self.per_split[f] + other.per_split[f] for f in self.per_split},
        )

    def is_consistent(self) -> bool:
        if (self.node_total < 0).any():
            return False
        total = int(self.node_total.sum())
        for t in self.per_split.values():
            if (t < 0).any() or int(t.sum()) != total:
                return False
            if not np.array_equal(t.sum(axis=0), self.node_total):
                return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return {
            "node_total": [int(c) for c in self.node_total],
            "per_split": {str(f): t.tolist() for f, t in self.per_split.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CountsTable":
        table = cls(np.array(d["node_total"], dtype=np.int64), {int(f): np.array(t) for f, t in d["per_split"].items()})
        if not table.is_consistent():
            raise ValueError("counts table is negative or its splits disagree with node_total")
        return table

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CountsTable):
            return NotImplemented
        return self.layout() == other.layout() and np.array_equal(self.node_total, other.node_total) and all(
            np.array_equal(self.per_split[f], other.per_split[f]) for f in self.per_split
        )


@dataclass
class ReplySet:
    round: int
    replies: dict[str, ModelUpdate]

    def sorted_items(self) -> list[tuple[str, ModelUpdate]]:
        return sorted(self.replies.items())

    def __len__(self) -> int:
        return len(self.replies)


@dataclass
class RoundSummary:
    round: int
    participants: list[str]
    seconds: float
    detail: dict[str, Any] = field(default_factory=dict)


@dataclass
class GlobalModelState:
    model: Model
    max_rounds: int
    t: int = 0
    history: list[RoundSummary] = field(default_factory=list)
    termination: str | None = None


def tabulate_counts(dataset: Dataset, candidates: SplitCandidates) -> CountsTable:
    """Counts for the rows of ``dataset`` that satisfy the candidates' path."""
    schema = candidates.schema
    mask = np.ones(len(dataset), dtype=bool)
    for f, v in candidates.path:
        mask &= dataset.X[:, f] == v
    X = dataset.X[mask].astype(np.int64)
    y = dataset.y[mask]
    C = schema.n_classes
    per_split = {}
    for f in candidates.candidate_features:
        V = schema.domain_size(f)
        per_split[f] = np.bincount(X[:, f] * C + y, minlength=V * C).reshape(V, C)
    return CountsTable(np.bincount(y, minlength=C), per_split)


def entropy(counts: Sequence[int] | np.ndarray) -> float:
    """Base-2 entropy of a count vector, with 0 log 0 = 0."""
    counts = np.asarray(counts, dtype=np.float64)
    n = counts.sum()
    if n <= 0:
        return 0.0
    h = 0.0
    for c in counts:
        if c > 0:
            p = c / n
            h -= p * math.log2(p)
    return h


def information_gain(node_total: np.ndarray, split: np.ndarray) -> float:
    n = float(np.sum(node_total))
    if n <= 0:
        return 0.0
    remainder = 0.0
    for row in split:
        nv = float(row.sum())
        if nv > 0:
            remainder += (nv / n) * entropy(row)
    return entropy(node_total) - remainder


def majority(counts: np.ndarray) -> int:
    """Most frequent class; ties go to the lowest class id."""
    return int(np.argmax(counts))


def _check_weight_replies(replies: ReplySet) -> list[tuple[str, ModelUpdate]]:
    items = replies.sorted_items()
    if not items:
        raise FusionError("cannot fuse an empty reply set")
    ref = items[0][1].weights
    for pid, upd in items:
        if upd.weights is None:
            raise FusionError(f"reply from {pid} carries no weights")
        if not shape_compatible(upd.weights, ref):
            raise FusionError(f"reply from {pid} is not shape-compatible with {items[0][0]}")
    return items


def iter_avg_fuse(replies: ReplySet) -> WeightMap:
    """Per-coordinate arithmetic mean of the replies' weights.

    Accumulated as ``base + sum(w_i - base) / n`` over party-id order, so
    identical replies reproduce the input bit for bit.
    """
    items = _check_weight_replies(replies)
    n = len(items)
    base = items[0][1].weights
    out: WeightMap = {}
    for key in sorted(base):
        acc = np.zeros_like(base[key])
        for _, upd in items:
            acc = acc + (upd.weights[key] - base[key])
        out[key] = base[key] + acc / n
    return out


def fedavg_fuse(replies: ReplySet) -> WeightMap:
    items = _check_weight_replies(replies)
    for pid, upd in items:
        if upd.nsamples is None:
            raise FusionError(f"FedAvg requires nsamples (missing from {pid})")
        if upd.nsamples < 0:
            raise FusionError(f"negative nsamples from {pid}")
    total = float(sum(upd.nsamples for _, upd in items))
    if total <= 0:
        raise FusionError("FedAvg requires a positive total of nsamples")
    # anchor on the largest contributor so a lone nonzero party is returned exactly
    top = max(upd.nsamples for _, upd in items)
    anchor = next(upd.weights for _, upd in items if upd.nsamples == top)
    out: WeightMap = {}
    for key in sorted(anchor):
        acc = np.zeros_like(anchor[key])
        for _, upd in items:
            if upd.nsamples:
                acc = acc + upd.nsamples * (upd.weights[key] - anchor[key])
        out[key] = anchor[key] + acc / total
    return out


def coord_median_fuse(replies: ReplySet) -> WeightMap:
    items = _check_weight_replies(replies)
    out: WeightMap = {}
    for key in sorted(items[0][1].weights):
        stacked = np.stack([upd.weights[key] for _, upd in items])
        out[key] = np.median(stacked, axis=0)
    return out


WEIGHT_FUSERS: dict[str, Callable[[ReplySet], WeightMap]] = {
    "iter_avg": iter_avg_fuse,
    "fedavg": fedavg_fuse,
    "coord_median": coord_median_fuse,
}


def query_hyperparams(hyperparams: Mapping[str, Any]) -> dict[str, Any]:
    return {k: hyperparams[k] for k in ("epochs", "learning_rate", "batch_size") if k in hyperparams}


def next_query_avg(state: GlobalModelState, hyperparams: Mapping[str, Any]) -> Query:
    if state.t >= state.max_rounds:
        raise TerminationSignal("max_rounds")
    assert isinstance(state.model, LinearModel)
    return Query(state.t + 1, TRAIN_WEIGHTS, copy_weights(state.model.weights), query_hyperparams(hyperparams))


class WeightFusion:
    """Query generator and fusion for the averaging family."""

    reply_policies = ("weights_only", "weights_and_nsamples")

    def __init__(self, kind: str, hyperparams: Mapping[str, Any]):
        if kind not in WEIGHT_FUSERS:
            raise FusionError(f"unknown weight fusion {kind!r}")
        self.kind = kind
        self.hyperparams = dict(hyperparams)
        self._fuse = WEIGHT_FUSERS[kind]
        if kind == "fedavg":
            self.reply_policies = ("weights_and_nsamples",)

    def next_query(self, state: GlobalModelState) -> Query:
        return next_query_avg(state, self.hyperparams)

    def fuse(self, state: GlobalModelState, replies: ReplySet) -> dict[str, Any]:
        fused = self._fuse(replies)
        if not shape_compatible(fused, state.model.weights):
            raise FusionError("fused weights do not match the global model")
        state.model.weights = fused
        return {"kind": self.kind}

    def finalize(self, state: GlobalModelState) -> None:
        pass


@dataclass
class _Pending:
    node: TreeNode
    path: tuple[tuple[int, int], ...]
    candidates: tuple[int, ...]
    depth: int
    counts: np.ndarray | None  # class counts known from the parent split; None at the root


@dataclass
class GrowResult:
    split: int | None
    new_leaves: list[tuple[int | None, int]]


class Id3Fusion:
    """Federated ID3: the tree is grown here from counts summed over parties.

    Nodes are expanded breadth-first, one counts query per node. Children
    that are empty, pure, at ``max_depth`` or out of candidate features become
    leaves straight away without a query.
    """

    kind = "id3"
    reply_policies = ("counts",)

    def __init__(self, tree: DecisionTree):
        self.tree = tree
        self.schema = tree.schema
        root = TreeNode("pending")
        tree.root = root
        self.pending: deque[_Pending] = deque(
            [_Pending(root, (), tuple(range(self.schema.n_features)), 0, None)]
        )

    @property
    def cursor(self) -> _Pending | None:
        return self.pending[0] if self.pending else None

    def next_query(self, state: GlobalModelState) -> Query:
        cur = self.cursor
        if cur is None:
            raise TerminationSignal("tree_complete")
        if state.t >= state.max_rounds:
            self.finalize(state)
            raise TerminationSignal("max_rounds")
        return Query(state.t + 1, COUNTS_REQUEST, SplitCandidates(cur.path, cur.candidates, self.schema))

    def aggregate(self, replies: ReplySet) -> CountsTable:
        cur = self.cursor
        if cur is None:
            raise FusionError("no node awaiting counts")
        total = CountsTable.zeros(self.schema, cur.candidates)
        for pid, upd in replies.sorted_items():
            if upd.counts is None:
                raise FusionError(f"reply from {pid} carries no counts")
            if upd.counts.layout() != total.layout():
                raise FusionError(f"counts from {pid} do not match the queried schema/candidates")
            total = total + upd.counts
        if not total.is_consistent():
            raise FusionError("aggregated counts table is inconsistent")
        return total

    def fuse(self, state: GlobalModelState, replies: ReplySet) -> dict[str, Any]:
        res = self.grow(self.aggregate(replies))
        return {"kind": "id3", "split": res.split, "leaves": len(res.new_leaves)}

    def grow(self, counts: CountsTable) -> GrowResult:
        cur = self.pending.popleft()
        node = cur.node
        total = counts.node_total
        if total.sum() == 0:
            # only reachable at the root: children with zero rows are settled at split time
            _make_leaf(node, 0)
            return GrowResult(None, [(None, 0)])
        if np.count_nonzero(total) == 1 or cur.depth >= self.tree.max_depth or not cur.candidates:
            label = majority(total)
            _make_leaf(node, label)
            return GrowResult(None, [(None, label)])

        best, best_gain = None, -math.inf
        for f in cur.candidates:
            gain = information_gain(total, counts.per_split[f])
            if best is None or gain > best_gain + IG_TIE_TOL or (abs(gain - best_gain) <= IG_TIE_TOL and f < best):
                best, best_gain = f, gain
        node.kind = "internal"
        node.feature = best
        node.majority = majority(total)
        node.label = None
        remaining = tuple(f for f in cur.candidates if f != best)
        leaves: list[tuple[int | None, int]] = []
        for v, child_counts in enumerate(counts.per_split[best]):
            child = TreeNode("pending")
            node.children[v] = child
            n_v = int(child_counts.sum())
            if n_v == 0:
                label = node.majority
            elif np.count_nonzero(child_counts) == 1 or cur.depth + 1 >= self.tree.max_depth or not remaining:
                label = majority(child_counts)
            else:
                self.pending.append(_Pending(child, cur.path + ((best, v),), remaining, cur.depth + 1, child_counts))
                continue
            _make_leaf(child, label)
            leaves.append((v, label))
        return GrowResult(best, leaves)

    def finalize(self, state: GlobalModelState) -> None:
        """Turn every still-unexpanded node into a majority leaf."""
        while self.pending:
            cur = self.pending.popleft()
            _make_leaf(cur.node, majority(cur.counts) if cur.counts is not None else 0)


def _make_leaf(node: TreeNode, label: int) -> None:
    node.kind = "leaf"
    node.feature = None
    node.children = {}
    node.label = int(label)
    node.majority = int(label)


def id3_next_query(handler: Id3Fusion, state: GlobalModelState) -> Query:
    return handler.next_query(state)


def id3_fuse_and_grow(handler: Id3Fusion, state: GlobalModelState, replies: ReplySet) -> GrowResult:
    return handler.grow(handler.aggregate(replies))


FusionHandler = WeightFusion | Id3Fusion


def make_fusion(kind: str, model: Model, hyperparams: Mapping[str, Any]) -> FusionHandler:
    if kind == "id3":
        if not isinstance(model, DecisionTree):
            raise FusionError("id3 fusion needs a DecisionTree model")
        return Id3Fusion(model)
    if not isinstance(model, LinearModel):
        raise FusionError(f"{kind} fusion needs a linear model")
    return WeightFusion(kind, hyperparams)


def sync_query(state: GlobalModelState) -> Query:
    model = state.model
    payload = copy_weights(model.weights) if isinstance(model, LinearModel) else model_to_dict(model)
    return Query(max(state.t, 1), SYNC, payload)


class RoundGate:
    """Hook consulted before each round; raise TerminationSignal to stop."""

    def before_round(self, state: GlobalModelState) -> None:
        pass

    def after_round(self, state: GlobalModelState) -> None:
        pass


def run_fusion_session(
    handler: FusionHandler,
    exchange: Callable[[Query], ReplySet],
    state: GlobalModelState,
    *,
    gates: Sequence[RoundGate] = (),
    on_round: Callable[[GlobalModelState, RoundSummary], None] | None = None,
) -> GlobalModelState:
    """Loop query -> exchange -> fuse until a TerminationSignal.

    ``exchange`` broadcasts a query and returns the collected reply set; it
    is the only point where this loop touches the network. Errors raised by
    ``exchange`` or fusion propagate to the caller.
    """
    while True:
        try:
            for gate in gates:
                gate.before_round(state)
            q = handler.next_query(state)
        except TerminationSignal as sig:
            handler.finalize(state)
            state.termination = sig.reason
            return state
        started = time.perf_counter()
        replies = exchange(q)
        if replies.round != q.round:
            raise FusionError(f"reply set for round {replies.round} answers query {q.round}")
        detail = handler.fuse(state, replies)
        state.t = q.round
        summary = RoundSummary(q.round, sorted(replies.replies), time.perf_counter() - started, detail)
        state.history.append(summary)
        for gate in gates:
            gate.after_round(state)
        if on_round is not None:
            on_round(state, summary)


def grow_tree_centralized(dataset: Dataset, max_depth: int) -> DecisionTree:
    """Grow a tree on one local dataset through the same engine the aggregator uses."""
    tree = DecisionTree(dataset.schema, max_depth)
    handler = Id3Fusion(tree)

    def exchange(q: Query) -> ReplySet:
        return ReplySet(q.round, {"local": ModelUpdate(counts=tabulate_counts(dataset, q.payload))})

    run_fusion_session(handler, exchange, GlobalModelState(tree, max_rounds=10**9))
    return tree
