"""Party-side local training: turns a query plus the local data into a reply."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from .data import Dataset
from .errors import ShapeError, TerminationSignal
from .fusion import (
    COUNTS_REQUEST,
    EVAL,
    SYNC,
    TRAIN_WEIGHTS,
    GlobalModelState,
    Query,
    RoundGate,
    tabulate_counts,
)
from .model import (
    DecisionTree,
    LinearModel,
    Metrics,
    Model,
    ModelUpdate,
    WeightMap,
    evaluate_model,
    fit_model,
    get_model_update,
    model_from_dict,
    update_model,
)
from .seeding import derive_rng

log = logging.getLogger(__name__)

REPLY_POLICIES = ("weights_only", "weights_and_nsamples", "counts")


@dataclass(frozen=True)
class DpConfig:
    sigma: float = 0.0
    epsilon_per_round: float = 1.0
    clip_norm: float = 1.0
    # False draws noise from fresh OS entropy instead of the session seed
    seeded: bool = True

    def __post_init__(self) -> None:
        if self.sigma < 0:
            raise ValueError("dp.sigma must be >= 0")
        if self.epsilon_per_round <= 0:
            raise ValueError("dp.epsilon_per_round must be > 0")
        if self.clip_norm <= 0:
            raise ValueError("dp.clip_norm must be > 0")


def clip_groups(weights: Mapping[str, np.ndarray], clip_norm: float) -> WeightMap:
    """Scale each weight group independently down to L2 norm ``clip_norm``."""
    out: WeightMap = {}
    for key in sorted(weights):
        vec = np.asarray(weights[key], dtype=np.float64)
        norm = float(np.linalg.norm(vec))
        out[key] = vec * (clip_norm / norm) if norm > clip_norm else vec.copy()
    return out


def gaussian_mechanism(
    weights: Mapping[str, np.ndarray], dp: DpConfig, rng: np.random.Generator
) -> WeightMap:
    if dp.sigma == 0:
        return {k: np.array(v, dtype=np.float64) for k, v in weights.items()}
    clipped = clip_groups(weights, dp.clip_norm)
    return {k: clipped[k] + rng.normal(0.0, dp.sigma, size=clipped[k].shape) for k in sorted(clipped)}


class DpAccountant(RoundGate):
    """Aggregator-side privacy budget under basic (linear) composition."""

    def __init__(self, epsilon_per_round: float = 0.0, budget: float | None = None):
        self.epsilon_per_round = float(epsilon_per_round)
        self.budget = budget
        self.rounds = 0

    @property
    def enabled(self) -> bool:
        return self.epsilon_per_round > 0

    @property
    def total_epsilon(self) -> float:
        return self.rounds * self.epsilon_per_round if self.enabled else 0.0

    def record_round(self) -> float:
        if self.enabled:
            self.rounds += 1
        return self.total_epsilon

    def would_exceed(self) -> bool:
        if not self.enabled or self.budget is None:
            return False
        return (self.rounds + 1) * self.epsilon_per_round > self.budget

    def before_round(self, state: GlobalModelState) -> None:
        if self.would_exceed():
            raise TerminationSignal("dp_budget")

    def after_round(self, state: GlobalModelState) -> None:
        self.record_round()


def dp_account(accountant: DpAccountant, epsilon_per_round: float | None = None) -> float:
    if epsilon_per_round is not None and accountant.epsilon_per_round != epsilon_per_round:
        raise ValueError("accountant was configured with a different per-round epsilon")
    if accountant.would_exceed():
        raise TerminationSignal("dp_budget")
    return accountant.record_round()


class LocalTrainer:
    """Answers the aggregator's queries from one party's private data."""

    def __init__(
        self,
        model: Model,
        train: Dataset,
        test: Dataset | None = None,
        *,
        reply_policy: str = "weights_only",
        dp: DpConfig | None = None,
        party_id: str = "party",
        seed: int = 0,
    ):
        if reply_policy not in REPLY_POLICIES:
            raise ValueError(f"unknown reply policy {reply_policy!r}")
        if (reply_policy == "counts") != isinstance(model, DecisionTree):
            raise ValueError(f"reply policy {reply_policy!r} does not fit a {type(model).__name__}")
        self.model = model
        self.train = train
        self.test = test
        self.reply_policy = reply_policy
        self.dp = dp
        self.party_id = party_id
        self.seed = seed

    def handle(self, q: Query) -> ModelUpdate | Metrics | None:
        if q.kind == TRAIN_WEIGHTS:
            return self.handle_train_query(q)
        if q.kind == COUNTS_REQUEST:
            return self.handle_counts_query(q)
        if q.kind == SYNC:
            return self.handle_sync(q)
        if q.kind == EVAL:
            return self.handle_eval(q)
        raise ShapeError(f"unexpected query kind {q.kind!r}")

    def handle_train_query(self, q: Query) -> ModelUpdate:
        if q.kind != TRAIN_WEIGHTS:
            raise ShapeError(f"expected a train_weights query, got {q.kind}")
        if not isinstance(self.model, LinearModel):
            raise ShapeError("weight queries need a linear model")
        update_model(self.model, q.payload)
        n = len(self.train)
        if n:
            fit_model(self.model, self.train, q.hyperparams, seed=self.seed, party_id=self.party_id, round=q.round)
        else:
            log.warning("party %s has no training rows; echoing the global weights", self.party_id)
        upd = get_model_update(self.model, self.reply_policy == "weights_and_nsamples", n)
        if self.dp is not None and self.dp.sigma > 0:
            rng = derive_rng(self.seed, self.party_id, q.round, "dp") if self.dp.seeded else np.random.default_rng()
            upd.weights = gaussian_mechanism(upd.weights, self.dp, rng)
        return upd

    def handle_counts_query(self, q: Query) -> ModelUpdate:
        if q.kind != COUNTS_REQUEST:
            raise ShapeError(f"expected a counts_request query, got {q.kind}")
        cand = q.payload
        schema = self.train.schema
        if cand.schema != schema:
            raise ShapeError("queried schema does not match the local data schema")
        for f, v in cand.path:
            if not 0 <= f < schema.n_features or not 0 <= v < schema.domain_size(f):
                raise ShapeError(f"unknown feature/value ({f}, {v}) in query path")
        for f in cand.candidate_features:
            if not 0 <= f < schema.n_features:
                raise ShapeError(f"unknown candidate feature {f}")
        return ModelUpdate(counts=tabulate_counts(self.train, cand))

    def handle_sync(self, q: Query) -> None:
        if q.kind != SYNC:
            raise ShapeError(f"expected a sync query, got {q.kind}")
        payload: Any = q.payload
        if isinstance(self.model, LinearModel):
            update_model(self.model, payload)
            return
        tree = model_from_dict(payload)
        if not isinstance(tree, DecisionTree) or tree.schema != self.model.schema:
            raise ShapeError("synced tree does not match the local schema")
        self.model = tree

    def handle_eval(self, q: Query | None = None) -> Metrics:
        if self.test is None or len(self.test) == 0:
            raise ShapeError("no test split configured")
        return evaluate_model(self.model, self.test)
