"""Aggregator runtime: one coordination thread owning phase, registry and global model."""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from concurrent.futures import Future
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .config import AggregatorConfig
from .errors import (
    FedMeshError,
    FusionError,
    NumericError,
    ProtocolError,
    QuorumError,
    ShapeError,
    TransportError,
)
from .events import EventLog
from .fusion import (
    EVAL,
    GlobalModelState,
    Id3Fusion,
    Query,
    ReplySet,
    RoundSummary,
    WeightFusion,
    make_fusion,
    run_fusion_session,
    sync_query,
)
from .localtrain import DpAccountant
from .model import DecisionTree, LinearModel, Model, clone, load_model, save_model
from .protocol import (
    AggregatorPhase,
    Envelope,
    Event,
    Inbound,
    MessageType,
    PartyRegistry,
    PhaseMachine,
    RegistrationRules,
    broadcast_query,
    collect,
    collect_replies,
    query_to_envelope,
    register_party,
    weights_digest,
)
from .transport import Connection, Endpoint, Listener, serve, start_reader

log = logging.getLogger(__name__)

ME = "aggregator"


@dataclass
class CommandResult:
    ok: bool
    message: str = ""


def initial_model(cfg: AggregatorConfig) -> Model:
    m = cfg.model
    if m.kind == "id3":
        return DecisionTree(cfg.schema, m.max_depth or 8)
    n_features, n_classes = cfg.model_dims()
    if m.init:
        model = load_model(m.init)
        if not isinstance(model, LinearModel) or (model.n_features, model.n_classes) != (n_features, n_classes):
            raise ShapeError(f"model.init {m.init} does not match ({n_features}, {n_classes})")
        return model
    return LinearModel(n_features, n_classes, m.loss)


class Aggregator:
    """Runs the FL session.

    Commands are queued to the coordination thread and executed in order;
    reader threads only deposit decoded envelopes on ``inbox``.
    """

    def __init__(self, cfg: AggregatorConfig, *, seed: int = 0, events: EventLog | None = None):
        self.cfg = cfg
        self.seed = seed
        self.events = events or EventLog(None, "agg")
        self.machine = PhaseMachine()
        self.registry = PartyRegistry(cfg.quorum)
        self.inbox: queue.Queue[Inbound] = queue.Queue()
        self.model: Model = initial_model(cfg)
        self.state: GlobalModelState | None = None
        self.accountant: DpAccountant | None = None
        self.session_id = uuid.uuid4().hex[:12]
        self.listener: Listener | None = None
        self.started = False
        self.stopped = False
        self.clean_stop = False
        self.last_error: str | None = None
        self.eval_results: dict[str, dict[str, Any]] = {}
        self._conns: list[Connection] = []
        self._conns_lock = threading.Lock()
        self._cmds: queue.Queue[tuple[str, Any, Future]] = queue.Queue()
        self._thread = threading.Thread(target=self._run, name="agg-coordination", daemon=True)
        self._thread.start()
        self._sync_phase_to_log()

    # -- public API (any thread) ----------------------------------------

    @property
    def phase(self) -> AggregatorPhase:
        return self.machine.phase

    @property
    def address(self) -> str | None:
        return self.listener.address if self.listener else None

    def submit(self, name: str, arg: Any = None) -> Future:
        fut: Future = Future()
        self._cmds.put((name, arg, fut))
        return fut

    def command(self, name: str, arg: Any = None, timeout: float | None = None) -> CommandResult:
        return self.submit(name, arg).result(timeout)

    def join(self, timeout: float | None = None) -> None:
        self._thread.join(timeout)

    # -- coordination thread -------------------------------------------

    def _run(self) -> None:
        while not self.stopped:
            try:
                name, arg, fut = self._cmds.get_nowait()
            except queue.Empty:
                try:
                    item = self.inbox.get(timeout=0.02)
                except queue.Empty:
                    continue
                self._handle_idle(item)
                continue
            try:
                fut.set_result(self._dispatch(name, arg))
            except Exception as exc:  # surfaced to the caller, loop keeps running
                log.exception("command %s failed", name)
                fut.set_exception(exc)
        # fail anything still queued after STOP
        while True:
            try:
                _, _, fut = self._cmds.get_nowait()
            except queue.Empty:
                break
            fut.set_result(CommandResult(False, "aggregator stopped"))

    def _dispatch(self, name: str, arg: Any) -> CommandResult:
        handler: dict[str, Callable[[Any], CommandResult]] = {
            "START": self._cmd_start,
            "TRAIN": self._cmd_train,
            "SYNC": self._cmd_sync,
            "STOP": self._cmd_stop,
            "SAVE": self._cmd_save,
            "RECOVER": self._cmd_recover,
            "WAIT_QUORUM": self._cmd_wait_quorum,
        }
        if name not in handler:
            return CommandResult(False, f"unknown aggregator command {name}")
        if name not in ("START", "STOP") and not self.started:
            return CommandResult(False, f"{name} before START")
        return handler[name](arg)

    def _sync_phase_to_log(self) -> None:
        self.events.phase = self.machine.phase.value
        self.events.round = self.state.t if self.state else 0

    def _fire(self, event: Event, **kw: Any) -> None:
        before = self.machine.phase
        self.machine.fire(event, **kw)
        self._sync_phase_to_log()
        self.events("phase_changed", trigger=event.value, **{"from": before.value, "to": self.machine.phase.value})

    def _error(self, message: str) -> CommandResult:
        self.last_error = message
        self.events("error", message=message)
        self._fire(Event.ERROR)
        return CommandResult(False, message)

    # -- connections ----------------------------------------------------

    def _on_connect(self, conn: Connection) -> None:
        with self._conns_lock:
            self._conns.append(conn)
        start_reader(conn, lambda c, env, err: self.inbox.put(Inbound(c, env, err)), name=f"agg-reader-{conn.peer}")

    def _send(self, conn: Connection, env: Envelope) -> None:
        try:
            conn.send(env)
        except TransportError as exc:
            log.warning("send to %s failed: %s", conn.peer, exc)

    def _handle_idle(self, item: Inbound) -> None:
        """Inbox item arriving outside reply collection."""
        pid = self.registry.by_conn(item.conn)
        env = item.envelope
        if env is None:
            if pid is not None and self.machine.phase == AggregatorPhase.REGISTERING:
                # leaving before training starts is an unregistration, not a failure
                del self.registry.parties[pid]
                self.events("unregistered", party=pid, reason=item.error or "closed")
            elif pid is not None and self.registry.parties[pid].alive:
                self.registry.mark_dead(pid)
                self.events("party_dropped", party=pid, reason=item.error or "closed")
            return
        if env.type == MessageType.REGISTER:
            reply = register_party(self.registry, env, item.conn, self.machine.phase, self._rules())
            if reply.type == MessageType.REGISTER_ACK:
                self.events(
                    "registered",
                    party=env.sender,
                    parties=len(self.registry.parties),
                    quorum=self.registry.quorum_satisfied(),
                )
            else:
                self.events("register_rejected", party=env.sender, reason=reply.payload["message"])
            self._send(item.conn, reply)
            return
        if env.type in (MessageType.MODEL_UPDATE, MessageType.SYNC, MessageType.EVAL_REPLY, MessageType.ERROR):
            self._stale(pid or env.sender, env)
            return
        log.info("ignoring %s from %s", env.type.value, pid or item.conn.peer)

    def _stale(self, pid: str, env: Envelope) -> None:
        self.events(
            "stale_reply_discarded",
            party=pid,
            type=env.type.value,
            reply_round=env.round,
            current_round=self.state.t if self.state else 0,
        )

    def _drop(self, pid: str, reason: str) -> None:
        self.events("party_dropped", party=pid, reason=reason)

    def _rules(self) -> RegistrationRules:
        cfg = self.cfg
        kind = cfg.fusion.kind
        if kind == "id3":
            policies: tuple[str, ...] = ("counts",)
        elif kind == "fedavg":
            policies = ("weights_and_nsamples",)
        else:
            policies = ("weights_only", "weights_and_nsamples")
        schema = cfg.schema
        dims: tuple[int | None, int | None] = (None, None)
        if isinstance(self.model, LinearModel):
            dims = (self.model.n_features, self.model.n_classes)
        return RegistrationRules(
            session_id=self.session_id,
            seed=self.seed,
            fusion_kind=kind,
            model_kind=cfg.model.kind,
            reply_policies=policies,
            schema_hash=schema.digest() if schema is not None else None,
            n_features=dims[0],
            n_classes=dims[1],
        )

    def _exchange(self, q: Query) -> ReplySet:
        self.events.round = q.round
        env = query_to_envelope(q, ME)
        delivered = broadcast_query(self.registry, env, on_drop=self._drop)
        self.events("query_sent", kind=q.kind, parties=len(delivered))
        return collect_replies(
            self.registry,
            self.inbox,
            q.round,
            self.cfg.protocol.reply_timeout_ms,
            on_other=self._handle_idle,
            on_stale=self._stale,
            on_drop=self._drop,
        )

    def _broadcast_collect(self, env: Envelope, accept: MessageType) -> dict[str, Envelope]:
        broadcast_query(self.registry, env, on_drop=self._drop)
        return collect(
            self.registry,
            self.inbox,
            env.round,
            [accept],
            self.cfg.protocol.reply_timeout_ms,
            on_other=self._handle_idle,
            on_stale=self._stale,
            on_drop=self._drop,
        )

    # -- commands -------------------------------------------------------

    def _cmd_start(self, arg: Any) -> CommandResult:
        if self.started:
            return CommandResult(False, "already started")
        c = self.cfg.connection
        self.listener = serve(Endpoint(ME, c.listen, c.transport), self._on_connect)
        self.started = True
        self.events("started", transport=c.transport, address=self.listener.address)
        return CommandResult(True, f"listening on {self.listener.address}")

    def _cmd_wait_quorum(self, timeout_ms: Any) -> CommandResult:
        deadline = time.monotonic() + (timeout_ms or self.cfg.protocol.quorum_wait_ms) / 1000.0
        expected = self.cfg.protocol.expected_parties or 0
        while not (self.registry.quorum_satisfied() and len(self.registry.parties) >= expected):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return CommandResult(False, f"quorum {self.registry.quorum} not reached in time")
            try:
                item = self.inbox.get(timeout=min(remaining, 0.05))
            except queue.Empty:
                continue
            self._handle_idle(item)
        return CommandResult(True, f"quorum reached with {len(self.registry.alive_ids())} parties")

    def _cmd_train(self, arg: Any) -> CommandResult:
        # drain registrations that arrived before the command
        while True:
            try:
                self._handle_idle(self.inbox.get_nowait())
            except queue.Empty:
                break
        try:
            self._fire(Event.TRAIN_CMD, quorum=self.registry.quorum_satisfied())
        except ProtocolError as exc:
            return CommandResult(False, f"ProtocolError: {exc}")
        hp = self.cfg.hyperparameters
        model = clone(self.model)
        self.state = GlobalModelState(model, hp.max_rounds)
        handler = make_fusion(self.cfg.fusion.kind, model, hp.query_params())
        eps = [
            float(self.registry.parties[pid].info.get("epsilon_per_round") or 0.0)
            for pid in self.registry.alive_ids()
        ]
        self.accountant = DpAccountant(max(eps, default=0.0), self.cfg.fusion.dp_budget)
        self.events("train_started", kind=self.cfg.fusion.kind, parties=len(self.registry.alive_ids()), max_rounds=hp.max_rounds)

        def on_round(state: GlobalModelState, summary: RoundSummary) -> None:
            self.events.round = state.t
            detail = {k: v for k, v in summary.detail.items() if k != "kind" and v is not None}
            self.events(
                "fused",
                parties=len(summary.participants),
                kind=self.cfg.fusion.kind,
                seconds=f"{summary.seconds:.4f}",
                **detail,
            )
            if self.accountant is not None and self.accountant.enabled:
                self.events("dp_spent", total_epsilon=f"{self.accountant.total_epsilon:g}")

        try:
            run_session(handler, self._exchange, self.state, self.accountant, on_round)
        except (QuorumError, FusionError, TransportError, ProtocolError, NumericError, ShapeError) as exc:
            return self._error(f"{type(exc).__name__}: {exc}")
        self.model = self.state.model
        self.events.round = self.state.t
        self.events("terminated", reason=self.state.termination, rounds=self.state.t)
        self._fire(Event.TERMINATED)
        self._log_final_model()
        return CommandResult(True, f"training finished after {self.state.t} rounds ({self.state.termination})")

    def _log_final_model(self) -> None:
        if isinstance(self.model, LinearModel):
            self.events("final_model", kind="linear", digest=weights_digest(self.model.weights))
        else:
            self.events("final_model", kind="id3", depth=self.model.depth())

    def _cmd_sync(self, arg: Any) -> CommandResult:
        if self.machine.phase != AggregatorPhase.SYNCING or self.state is None:
            return CommandResult(False, f"ProtocolError: SYNC is not allowed in phase {self.machine.phase.value}")
        q = sync_query(self.state)
        try:
            acks = self._broadcast_collect(query_to_envelope(q, ME), MessageType.SYNC)
        except (QuorumError, TransportError, ProtocolError) as exc:
            return self._error(f"{type(exc).__name__}: {exc}")
        self.events("synced", parties=len(acks))
        self._fire(Event.SYNC_ACKED)
        if not self.cfg.fusion.run_eval:
            return CommandResult(True, f"model synchronized to {len(acks)} parties")
        env = query_to_envelope(Query(q.round, EVAL), ME)
        try:
            replies = self._broadcast_collect(env, MessageType.EVAL_REPLY)
        except (QuorumError, TransportError, ProtocolError) as exc:
            return self._error(f"{type(exc).__name__}: {exc}")
        for pid, rep in sorted(replies.items()):
            self.eval_results[pid] = dict(rep.payload)
            self.events("party_eval", party=pid, accuracy=f"{rep.payload['accuracy']:.4f}", n=rep.payload["n"])
        self._fire(Event.EVALS_DONE)
        return CommandResult(True, f"model synchronized and evaluated by {len(replies)} parties")

    def _cmd_recover(self, arg: Any) -> CommandResult:
        try:
            self._fire(Event.RECOVER)
        except ProtocolError as exc:
            return CommandResult(False, f"ProtocolError: {exc}")
        return CommandResult(True, f"recovered to {self.machine.phase.value}")

    def _cmd_save(self, path: Any) -> CommandResult:
        if not path:
            return CommandResult(False, "SAVE needs a path")
        try:
            save_model(self.model, path)
        except FedMeshError as exc:
            return CommandResult(False, str(exc))
        self.events("saved", path=str(Path(path)))
        return CommandResult(True, f"model saved to {path}")

    def _cmd_stop(self, arg: Any) -> CommandResult:
        msg = "stopped"
        if self.machine.phase != AggregatorPhase.STOPPING:
            try:
                self._fire(Event.STOP_CMD)
            except ProtocolError as exc:
                msg = f"stopped with ProtocolError: {exc}"
        self.clean_stop = self.machine.phase == AggregatorPhase.STOPPING
        reason = "session_end" if self.clean_stop else "error"
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            self._send(conn, Envelope(MessageType.STOP, ME, 0, {"reason": reason}))
            conn.close()
        if self.listener is not None:
            self.listener.close()
        self.stopped = True
        self.events("stopped", clean=self.clean_stop)
        return CommandResult(self.clean_stop, msg)


def run_session(
    handler: WeightFusion | Id3Fusion,
    exchange: Callable[[Query], ReplySet],
    state: GlobalModelState,
    accountant: DpAccountant | None = None,
    on_round: Callable[[GlobalModelState, RoundSummary], None] | None = None,
) -> GlobalModelState:
    gates = [accountant] if accountant is not None and accountant.enabled else []
    return run_fusion_session(handler, exchange, state, gates=gates, on_round=on_round)

