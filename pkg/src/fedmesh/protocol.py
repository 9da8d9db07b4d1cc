"""Message vocabulary, aggregator phase machine, party registry and reply collection."""

from __future__ import annotations

import enum
import hashlib
import logging
import queue
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from .data import Schema
from .errors import DecodeError, FedMeshError, ProtocolError, QuorumError, TransportError
from .fusion import (
    COUNTS_REQUEST,
    EVAL,
    SYNC,
    TRAIN_WEIGHTS,
    CountsTable,
    Query,
    ReplySet,
    SplitCandidates,
)
from .model import ModelUpdate, as_weight_map, weights_to_json

log = logging.getLogger(__name__)


class MessageType(str, enum.Enum):
    REGISTER = "REGISTER"
    REGISTER_ACK = "REGISTER_ACK"
    TRAIN_QUERY = "TRAIN_QUERY"
    MODEL_UPDATE = "MODEL_UPDATE"
    SYNC = "SYNC"
    EVAL_REQUEST = "EVAL_REQUEST"
    EVAL_REPLY = "EVAL_REPLY"
    STOP = "STOP"
    ERROR = "ERROR"


ROUND_ZERO_TYPES = {MessageType.REGISTER, MessageType.REGISTER_ACK, MessageType.STOP, MessageType.ERROR}


@dataclass
class Envelope:
    type: MessageType
    sender: str
    round: int
    payload: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"type": self.type.value, "sender": self.sender, "round": self.round, "payload": self.payload}

    @classmethod
    def from_dict(cls, d: Any) -> "Envelope":
        if not isinstance(d, dict):
            raise DecodeError("envelope must be a JSON object")
        for key in ("type", "sender", "round", "payload"):
            if key not in d:
                raise DecodeError(f"envelope missing {key!r}")
        try:
            mtype = MessageType(d["type"])
        except ValueError:
            raise DecodeError(f"unknown message type {d['type']!r}") from None
        sender, rnd, payload = d["sender"], d["round"], d["payload"]
        if not isinstance(sender, str):
            raise DecodeError("sender must be a string")
        if not _is_int(rnd) or rnd < 0:
            raise DecodeError("round must be a non-negative integer")
        if rnd == 0 and mtype not in ROUND_ZERO_TYPES:
            raise DecodeError(f"{mtype.value} needs round >= 1")
        if not isinstance(payload, dict):
            raise DecodeError("payload must be an object")
        _validate_payload(mtype, payload)
        return cls(mtype, sender, rnd, payload)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _need(payload: Mapping[str, Any], key: str, check: Callable[[Any], bool], what: str, mtype: MessageType) -> None:
    if key not in payload or not check(payload[key]):
        raise DecodeError(f"{mtype.value} payload needs {key!r} ({what})")


def _is_weight_obj(v: Any) -> bool:
    return isinstance(v, dict) and all(
        isinstance(k, str) and isinstance(vec, list) and all(_is_num(x) for x in vec) for k, vec in v.items()
    )


def _validate_payload(mtype: MessageType, p: Mapping[str, Any]) -> None:
    T = MessageType
    if mtype == T.REGISTER:
        _need(p, "model_kind", lambda v: isinstance(v, str), "string", mtype)
        _need(p, "reply_policy", lambda v: isinstance(v, str), "string", mtype)
        _need(p, "schema_hash", lambda v: isinstance(v, str), "string", mtype)
    elif mtype == T.REGISTER_ACK:
        _need(p, "session_id", lambda v: isinstance(v, str), "string", mtype)
        _need(p, "seed", _is_int, "integer", mtype)
    elif mtype == T.TRAIN_QUERY:
        _need(p, "kind", lambda v: v in (TRAIN_WEIGHTS, COUNTS_REQUEST), "query kind", mtype)
        _need(p, "hyperparams", lambda v: isinstance(v, dict), "object", mtype)
        if p["kind"] == TRAIN_WEIGHTS:
            _need(p, "weights", _is_weight_obj, "weight map", mtype)
        else:
            _need(p, "candidates", lambda v: isinstance(v, dict), "object", mtype)
    elif mtype == T.MODEL_UPDATE:
        if "weights" not in p and "counts" not in p:
            raise DecodeError("MODEL_UPDATE payload needs 'weights' or 'counts'")
        if "weights" in p:
            _need(p, "weights", _is_weight_obj, "weight map", mtype)
        if "nsamples" in p:
            _need(p, "nsamples", lambda v: _is_int(v) and v >= 0, "non-negative integer", mtype)
        if "counts" in p:
            _need(p, "counts", lambda v: isinstance(v, dict), "object", mtype)
    elif mtype == T.SYNC:
        if not any(k in p for k in ("weights", "model", "ack")):
            raise DecodeError("SYNC payload needs 'weights', 'model' or 'ack'")
        if "weights" in p:
            _need(p, "weights", _is_weight_obj, "weight map", mtype)
    elif mtype == T.EVAL_REPLY:
        _need(p, "accuracy", _is_num, "number", mtype)
        _need(p, "n", _is_int, "integer", mtype)
    elif mtype == T.ERROR:
        _need(p, "message", lambda v: isinstance(v, str), "string", mtype)


# -- query / reply payload conversion ---------------------------------------


def query_to_envelope(q: Query, sender: str) -> Envelope:
    if q.kind == TRAIN_WEIGHTS:
        return Envelope(
            MessageType.TRAIN_QUERY,
            sender,
            q.round,
            {"kind": q.kind, "weights": weights_to_json(q.payload), "hyperparams": dict(q.hyperparams)},
        )
    if q.kind == COUNTS_REQUEST:
        cand: SplitCandidates = q.payload
        body = {
            "path": [[f, v] for f, v in cand.path],
            "candidate_features": list(cand.candidate_features),
            "schema": cand.schema.to_dict(),
        }
        return Envelope(MessageType.TRAIN_QUERY, sender, q.round, {"kind": q.kind, "candidates": body, "hyperparams": {}})
    if q.kind == SYNC:
        if isinstance(q.payload, dict) and "format_version" in q.payload:
            return Envelope(MessageType.SYNC, sender, q.round, {"model": q.payload})
        return Envelope(MessageType.SYNC, sender, q.round, {"weights": weights_to_json(q.payload)})
    return Envelope(MessageType.EVAL_REQUEST, sender, q.round, {})


def envelope_to_query(env: Envelope) -> Query:
    p = env.payload
    try:
        if env.type == MessageType.TRAIN_QUERY and p["kind"] == TRAIN_WEIGHTS:
            return Query(env.round, TRAIN_WEIGHTS, as_weight_map(p["weights"]), dict(p["hyperparams"]))
        if env.type == MessageType.TRAIN_QUERY:
            c = p["candidates"]
            cand = SplitCandidates(
                tuple((int(f), int(v)) for f, v in c["path"]),
                tuple(int(f) for f in c["candidate_features"]),
                Schema.from_dict(c["schema"]),
            )
            return Query(env.round, COUNTS_REQUEST, cand, dict(p["hyperparams"]))
        if env.type == MessageType.SYNC:
            payload = p["model"] if "model" in p else as_weight_map(p["weights"])
            return Query(env.round, SYNC, payload)
        if env.type == MessageType.EVAL_REQUEST:
            return Query(env.round, EVAL)
    except (KeyError, TypeError, ValueError) as exc:
        raise DecodeError(f"malformed {env.type.value} payload: {exc}") from exc
    raise DecodeError(f"{env.type.value} is not a query")


def update_to_payload(upd: ModelUpdate) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if upd.weights is not None:
        out["weights"] = weights_to_json(upd.weights)
    if upd.nsamples is not None:
        out["nsamples"] = int(upd.nsamples)
    if upd.counts is not None:
        out["counts"] = upd.counts.to_dict()
    return out


def payload_to_update(p: Mapping[str, Any]) -> ModelUpdate:
    try:
        return ModelUpdate(
            weights=as_weight_map(p["weights"]) if "weights" in p else None,
            nsamples=p.get("nsamples"),
            counts=CountsTable.from_dict(p["counts"]) if "counts" in p else None,
        )
    except (KeyError, TypeError, ValueError, ArithmeticError, FedMeshError) as exc:
        raise DecodeError(f"malformed model update: {exc}") from exc


# -- aggregator phases ------------------------------------------------------


class AggregatorPhase(str, enum.Enum):
    REGISTERING = "REGISTERING"
    TRAINING = "TRAINING"
    SYNCING = "SYNCING"
    EVALUATING = "EVALUATING"
    STOPPING = "STOPPING"
    PROCESSING_ERROR = "PROCESSING_ERROR"


class Event(str, enum.Enum):
    TRAIN_CMD = "train_cmd"
    TERMINATED = "terminated"
    SYNC_ACKED = "sync_acked"
    EVALS_DONE = "evals_done"
    STOP_CMD = "stop_cmd"
    ERROR = "error"
    RECOVER = "recover"


P = AggregatorPhase
LEGAL_TRANSITIONS: dict[tuple[AggregatorPhase, Event], AggregatorPhase] = {
    (P.REGISTERING, Event.TRAIN_CMD): P.TRAINING,
    (P.REGISTERING, Event.STOP_CMD): P.STOPPING,
    (P.TRAINING, Event.TERMINATED): P.SYNCING,
    (P.SYNCING, Event.SYNC_ACKED): P.EVALUATING,
    (P.EVALUATING, Event.EVALS_DONE): P.STOPPING,
    (P.EVALUATING, Event.STOP_CMD): P.STOPPING,
    **{(phase, Event.ERROR): P.PROCESSING_ERROR for phase in AggregatorPhase},
}


def next_phase(
    current: AggregatorPhase,
    event: Event | str,
    *,
    quorum: bool = True,
    previous: AggregatorPhase | None = None,
) -> AggregatorPhase:
    """Apply ``event`` to ``current``; illegal pairs raise ProtocolError.

    ``previous`` is the last valid phase before PROCESSING_ERROR and is the
    target of ``recover``.
    """
    event = Event(event)
    if current == P.PROCESSING_ERROR and event == Event.RECOVER:
        if previous is None or previous == P.PROCESSING_ERROR:
            raise ProtocolError("recover from PROCESSING_ERROR needs a previous valid phase")
        return previous
    target = LEGAL_TRANSITIONS.get((current, event))
    if target is None:
        raise ProtocolError(f"event {event.value} is not allowed in phase {current.value}")
    if event == Event.TRAIN_CMD and not quorum:
        raise ProtocolError(f"event {event.value} in phase {current.value} requires a quorum of parties")
    return target


class PhaseMachine:
    def __init__(self) -> None:
        self.phase = P.REGISTERING
        self.previous: AggregatorPhase | None = None

    def fire(self, event: Event | str, *, quorum: bool = True) -> AggregatorPhase:
        new = next_phase(self.phase, event, quorum=quorum, previous=self.previous)
        if new == P.PROCESSING_ERROR:
            if self.phase != P.PROCESSING_ERROR:
                self.previous = self.phase
        elif self.phase == P.PROCESSING_ERROR:
            self.previous = None
        self.phase = new
        return new


# -- registry ---------------------------------------------------------------


@dataclass(frozen=True)
class QuorumPolicy:
    kind: str = "all"
    m: int = 0

    @classmethod
    def parse(cls, raw: Any) -> "QuorumPolicy":
        if raw is None or raw == "all":
            return cls("all")
        if isinstance(raw, Mapping) and set(raw) == {"min_n"}:
            m = raw["min_n"]
        elif isinstance(raw, str) and raw.startswith("min_n"):
            text = raw[len("min_n") :].strip().strip("()").strip()
            try:
                m = int(text)
            except ValueError:
                raise ValueError(f"cannot parse quorum {raw!r}") from None
        else:
            raise ValueError(f"quorum must be 'all' or min_n(m), got {raw!r}")
        if not _is_int(m) or m < 1:
            raise ValueError("min_n quorum needs m >= 1")
        return cls("min_n", m)

    def satisfied(self, n_alive: int, n_total: int) -> bool:
        if self.kind == "all":
            return n_total > 0 and n_alive == n_total
        return n_alive >= self.m

    def __str__(self) -> str:
        return "all" if self.kind == "all" else f"min_n({self.m})"


@dataclass
class PartyRecord:
    party_id: str
    address: str
    conn: Any = None
    registered_at: float = field(default_factory=time.time)
    alive: bool = True
    outstanding: int | None = None
    info: dict[str, Any] = field(default_factory=dict)


class PartyRegistry:
    def __init__(self, quorum: QuorumPolicy | None = None):
        self.quorum = quorum or QuorumPolicy()
        self.parties: dict[str, PartyRecord] = {}

    def add(self, record: PartyRecord) -> None:
        if record.party_id in self.parties:
            raise ProtocolError("duplicate party id")
        self.parties[record.party_id] = record

    def alive_ids(self) -> list[str]:
        return sorted(pid for pid, r in self.parties.items() if r.alive)

    def mark_dead(self, party_id: str) -> None:
        if party_id in self.parties:
            rec = self.parties[party_id]
            rec.alive = False
            rec.outstanding = None

    def quorum_satisfied(self) -> bool:
        return self.quorum.satisfied(len(self.alive_ids()), len(self.parties))

    def by_conn(self, conn: Any) -> str | None:
        for pid, rec in self.parties.items():
            if rec.conn is conn:
                return pid
        return None


@dataclass(frozen=True)
class Hyperparameters:
    max_rounds: int = 10
    epochs: int = 1
    learning_rate: float = 0.1
    batch_size: int = 16
    reply_timeout_ms: int = 30_000

    def __post_init__(self) -> None:
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.reply_timeout_ms < 1:
            raise ValueError("reply_timeout_ms must be > 0")

    def query_params(self) -> dict[str, Any]:
        return {"epochs": self.epochs, "learning_rate": self.learning_rate, "batch_size": self.batch_size}


# -- inbox-driven exchange --------------------------------------------------


@dataclass
class Inbound:
    """An item on the aggregator inbox: a decoded envelope, or ``None`` when the connection closed."""

    conn: Any
    envelope: Envelope | None
    error: str | None = None


def broadcast_query(
    registry: PartyRegistry,
    env: Envelope,
    *,
    on_drop: Callable[[str, str], None] | None = None,
) -> list[str]:
    """Send ``env`` to every alive party; unreachable parties are marked dead.

    Raises QuorumError when the survivors no longer satisfy the quorum.
    """
    if not registry.quorum_satisfied():
        raise QuorumError(f"quorum {registry.quorum} not satisfied before broadcast")
    delivered = []
    for pid in registry.alive_ids():
        rec = registry.parties[pid]
        if rec.outstanding is not None:
            raise ProtocolError(f"party {pid} still has query {rec.outstanding} outstanding")
        try:
            rec.conn.send(env)
        except TransportError as exc:
            registry.mark_dead(pid)
            if on_drop is not None:
                on_drop(pid, str(exc))
            continue
        rec.outstanding = env.round
        delivered.append(pid)
    if not registry.quorum_satisfied():
        raise QuorumError(f"quorum {registry.quorum} broken during broadcast ({len(delivered)} delivered)")
    return delivered


def collect(
    registry: PartyRegistry,
    inbox: "queue.Queue[Inbound]",
    round: int,
    accept: Iterable[MessageType],
    timeout_ms: int,
    *,
    on_other: Callable[[Inbound], None] | None = None,
    on_stale: Callable[[str, Envelope], None] | None = None,
    on_drop: Callable[[str, str], None] | None = None,
) -> dict[str, Envelope]:
    """Gather one reply of an accepted type per alive party for ``round``.

    Stale rounds are discarded. ERROR replies and closed connections drop the
    party from the round. Raises QuorumError if the repliers fall short of the
    quorum when every alive party has answered or the deadline passes.
    """
    accept = set(accept)
    deadline = time.monotonic() + timeout_ms / 1000.0
    got: dict[str, Envelope] = {}

    def waiting() -> list[str]:
        return [pid for pid in registry.alive_ids() if registry.parties[pid].outstanding == round and pid not in got]

    while waiting():
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            item = inbox.get(timeout=remaining)
        except queue.Empty:
            break
        pid = registry.by_conn(item.conn)
        if pid is None:
            if on_other is not None:
                on_other(item)
            continue
        env = item.envelope
        if env is None:
            registry.mark_dead(pid)
            if on_drop is not None:
                on_drop(pid, item.error or "connection closed")
            continue
        if env.type == MessageType.ERROR and env.round == round:
            registry.mark_dead(pid)
            if on_drop is not None:
                on_drop(pid, env.payload.get("message", "error reply"))
            continue
        if env.type in accept and env.round == round:
            if env.sender != pid:
                log.warning("reply from %s claims sender %s", pid, env.sender)
            got[pid] = env
            registry.parties[pid].outstanding = None
            continue
        if env.type in accept or env.type == MessageType.ERROR:
            if on_stale is not None:
                on_stale(pid, env)
            continue
        if on_other is not None:
            on_other(item)

    silent = waiting()
    for pid in silent:
        # a party that missed the deadline is dropped from the session
        registry.mark_dead(pid)
        if on_drop is not None:
            on_drop(pid, "reply timeout")
    for rec in registry.parties.values():
        if rec.outstanding == round:
            rec.outstanding = None
    if not registry.quorum.satisfied(len(got), len(registry.parties)):
        raise QuorumError(f"{len(got)} replies for round {round} do not meet quorum {registry.quorum}")
    return got


def collect_replies(
    registry: PartyRegistry,
    inbox: "queue.Queue[Inbound]",
    round: int,
    timeout_ms: int,
    **hooks: Any,
) -> ReplySet:
    envs = collect(registry, inbox, round, [MessageType.MODEL_UPDATE], timeout_ms, **hooks)
    return ReplySet(round, {pid: payload_to_update(env.payload) for pid, env in sorted(envs.items())})


@dataclass(frozen=True)
class RegistrationRules:
    """What the aggregator expects from a registering party."""

    session_id: str
    seed: int
    fusion_kind: str
    model_kind: str
    reply_policies: tuple[str, ...]
    schema_hash: str | None = None
    n_features: int | None = None
    n_classes: int | None = None


def register_party(
    registry: PartyRegistry,
    env: Envelope,
    conn: Any,
    phase: AggregatorPhase,
    rules: RegistrationRules,
) -> Envelope:
    """Validate a REGISTER and record the party; returns the ACK or ERROR to send back."""
    me = "aggregator"
    pid = env.sender
    p = env.payload
    if phase != AggregatorPhase.REGISTERING:
        return error_envelope(me, "registration closed")
    if not pid:
        return error_envelope(me, "empty party id")
    if pid in registry.parties:
        return error_envelope(me, "duplicate party id")
    if p["model_kind"] != rules.model_kind:
        return error_envelope(
            me, f"ConfigError: model.kind={p['model_kind']} but the aggregator trains model.kind={rules.model_kind}"
        )
    if p["reply_policy"] not in rules.reply_policies:
        return error_envelope(
            me,
            f"ConfigError: fusion.kind={rules.fusion_kind} requires local_training.reply_policy in "
            f"{list(rules.reply_policies)}, got {p['reply_policy']}",
        )
    expected_hash = rules.schema_hash
    if expected_hash is None and registry.parties:
        expected_hash = next(iter(registry.parties.values())).info.get("schema_hash")
    if expected_hash is not None and p["schema_hash"] != expected_hash:
        return error_envelope(me, "ConfigError: data.schema does not match the session schema (hash mismatch)")
    for key in ("n_features", "n_classes"):
        want = getattr(rules, key)
        if want is not None and p.get(key) is not None and p[key] != want:
            return error_envelope(me, f"ConfigError: party {key}={p[key]} but the global model has {key}={want}")
    registry.add(PartyRecord(pid, getattr(conn, "peer", ""), conn, info=dict(p)))
    return Envelope(
        MessageType.REGISTER_ACK,
        me,
        0,
        {"session_id": rules.session_id, "schema_hash": expected_hash or p["schema_hash"], "seed": rules.seed},
    )


# -- party side -------------------------------------------------------------


class PartyState(str, enum.Enum):
    IDLE = "IDLE"
    CONNECTED = "CONNECTED"
    REGISTERED = "REGISTERED"
    SYNCED = "SYNCED"
    STOPPED = "STOPPED"


def error_envelope(sender: str, message: str, round: int = 0) -> Envelope:
    return Envelope(MessageType.ERROR, sender, round, {"message": message})


def weights_digest(w: Mapping[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(w):
        h.update(k.encode())
        h.update(np.ascontiguousarray(w[k], dtype=np.float64).tobytes())
    return h.hexdigest()[:16]
