"""Party runtime: connects out to the aggregator and answers its queries."""

from __future__ import annotations

import logging
import threading
from pathlib import Path

from .config import PartyConfig
from .data import Dataset, load_csv, train_test_split
from .errors import ConfigError, DecodeError, FedMeshError, ProtocolError, TransportError
from .events import EventLog
from .localtrain import LocalTrainer
from .model import DecisionTree, LinearModel, Metrics, Model, ModelUpdate, save_model
from .protocol import (
    Envelope,
    MessageType,
    PartyState,
    envelope_to_query,
    error_envelope,
    update_to_payload,
)
from .transport import Connection, connect

log = logging.getLogger(__name__)


def build_model(cfg: PartyConfig) -> Model:
    schema = cfg.schema
    if cfg.model.kind == "id3":
        return DecisionTree(schema, cfg.model.max_depth)
    return LinearModel(schema.n_features, schema.n_classes, cfg.model.loss)


class Party:
    """One data party.

    The receive loop runs on its own thread once registered and handles
    queries strictly in arrival order; operator commands (EVAL, SAVE) share
    the model under a lock.
    """

    def __init__(
        self,
        cfg: PartyConfig,
        *,
        data: Dataset | None = None,
        events: EventLog | None = None,
        seed: int | None = None,
    ):
        self.cfg = cfg
        self.party_id = cfg.connection.party_id
        self.events = events or EventLog(None, "party")
        schema = cfg.schema
        if data is None:
            data = load_csv(cfg.data.path, schema)
        split_seed = cfg.data.seed if seed is None else seed
        train, test = train_test_split(data, cfg.data.test_fraction, split_seed)
        dp = cfg.local_training.dp.build() if cfg.local_training.dp is not None else None
        self.trainer = LocalTrainer(
            build_model(cfg),
            train,
            test,
            reply_policy=cfg.local_training.reply_policy,
            dp=dp,
            party_id=self.party_id,
        )
        self.state = PartyState.IDLE
        self.conn: Connection | None = None
        self.session_id: str | None = None
        self.last_round = 0
        self.stop_reason: str | None = None
        self._lock = threading.RLock()
        self._changed = threading.Condition(self._lock)
        self._thread: threading.Thread | None = None
        self._set_state(PartyState.IDLE)

    @property
    def model(self) -> Model:
        return self.trainer.model

    def _set_state(self, state: PartyState) -> None:
        with self._changed:
            self.state = state
            self.events.phase = state.value
            self._changed.notify_all()

    def wait_for(self, states: set[PartyState], timeout: float | None = None) -> bool:
        with self._changed:
            return self._changed.wait_for(lambda: self.state in states, timeout)

    # -- commands -------------------------------------------------------

    def start(self) -> None:
        if self.state != PartyState.IDLE:
            raise ProtocolError("START: already started")
        c = self.cfg.connection
        self.conn = connect(c.transport, c.aggregator, client_name=self.party_id)
        self._set_state(PartyState.CONNECTED)
        self.events("connected", aggregator=c.aggregator)

    def register(self, timeout: float = 30.0) -> None:
        if self.state != PartyState.CONNECTED or self.conn is None:
            raise ProtocolError(f"REGISTER needs a connected party (state {self.state.value}); issue START first")
        schema = self.trainer.train.schema
        payload = {
            "model_kind": self.cfg.model.kind,
            "reply_policy": self.trainer.reply_policy,
            "schema_hash": schema.digest(),
            "n_features": schema.n_features,
            "n_classes": schema.n_classes,
        }
        if self.trainer.dp is not None:
            payload["epsilon_per_round"] = self.trainer.dp.epsilon_per_round
        self.conn.send(Envelope(MessageType.REGISTER, self.party_id, 0, payload))
        try:
            reply = self.conn.recv(timeout=timeout)
        except TimeoutError:
            raise TransportError(f"no registration reply within {timeout}s") from None
        if reply.type == MessageType.ERROR:
            message = reply.payload["message"]
            self.events("register_rejected", reason=message)
            if message.startswith("ConfigError"):
                raise ConfigError(message)
            raise ProtocolError(message)
        if reply.type != MessageType.REGISTER_ACK:
            raise ProtocolError(f"expected REGISTER_ACK, got {reply.type.value}")
        self.session_id = reply.payload["session_id"]
        self.trainer.seed = int(reply.payload["seed"])
        self._set_state(PartyState.REGISTERED)
        self.events("registered", session=self.session_id)
        self._thread = threading.Thread(target=self._serve, name=f"party-{self.party_id}", daemon=True)
        self._thread.start()

    def evaluate(self) -> Metrics:
        with self._lock:
            return self.trainer.handle_eval()

    def save(self, path: str | Path) -> None:
        with self._lock:
            save_model(self.trainer.model, path)
        self.events("saved", path=str(path))

    def stop(self) -> None:
        if self.conn is not None:
            self.conn.close()
        if self._thread is not None and self._thread is not threading.current_thread():
            self._thread.join(5)
        if self.state != PartyState.STOPPED:
            self.stop_reason = self.stop_reason or "local_stop"
            self._set_state(PartyState.STOPPED)

    def kill(self) -> None:
        """Drop the connection abruptly, as a crashed process would."""
        if self.conn is not None:
            self.conn.close()

    # -- receive loop ---------------------------------------------------

    def _reply(self, env: Envelope) -> None:
        assert self.conn is not None
        self.conn.send(env)

    def _serve(self) -> None:
        assert self.conn is not None
        while True:
            try:
                env = self.conn.recv()
            except DecodeError as exc:
                log.warning("party %s dropping malformed frame: %s", self.party_id, exc)
                self.stop_reason = f"decode error: {exc}"
                break
            except TransportError as exc:
                self.stop_reason = self.stop_reason or f"connection lost: {exc}"
                break
            if env.type == MessageType.STOP:
                self.stop_reason = env.payload.get("reason", "stop")
                self.events("stop_received", reason=self.stop_reason)
                break
            try:
                self._handle(env)
            except TransportError as exc:
                self.stop_reason = f"connection lost: {exc}"
                break
        if self.conn is not None:
            self.conn.close()
        self._set_state(PartyState.STOPPED)

    def _handle(self, env: Envelope) -> None:
        self.events.round = env.round
        if env.type == MessageType.TRAIN_QUERY:
            if env.round <= self.last_round:
                self._reply(error_envelope(self.party_id, f"out-of-sequence query round {env.round}", env.round))
                return
            self.last_round = env.round
        elif env.type not in (MessageType.SYNC, MessageType.EVAL_REQUEST):
            log.info("party %s ignoring %s", self.party_id, env.type.value)
            return
        try:
            q = envelope_to_query(env)
            with self._lock:
                result = self.trainer.handle(q)
        except (FedMeshError, ValueError, KeyError) as exc:
            self.events("query_failed", type=env.type.value, error=str(exc))
            self._reply(error_envelope(self.party_id, f"{type(exc).__name__}: {exc}", env.round))
            return
        if isinstance(result, ModelUpdate):
            self._reply(Envelope(MessageType.MODEL_UPDATE, self.party_id, env.round, update_to_payload(result)))
            self.events("update_sent", nsamples=result.nsamples if result.nsamples is not None else "-")
        elif isinstance(result, Metrics):
            self._reply(
                Envelope(MessageType.EVAL_REPLY, self.party_id, env.round, {"accuracy": result.accuracy, "n": result.n})
            )
            self.events("eval_sent", accuracy=f"{result.accuracy:.4f}", n=result.n)
        else:
            self._reply(Envelope(MessageType.SYNC, self.party_id, env.round, {"ack": True}))
            self._set_state(PartyState.SYNCED)
            self.events("synced")
