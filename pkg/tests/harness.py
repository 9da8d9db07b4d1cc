"""Run a scripted aggregator plus scripted parties in one process."""

from __future__ import annotations

import io
import itertools
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from fedmesh.aggregator import Aggregator
from fedmesh.cli import parse_command, run_aggregator, run_party
from fedmesh.config import parse_config
from fedmesh.data import Dataset, save_csv
from fedmesh.events import EventLog
from fedmesh.fusion import GlobalModelState, Id3Fusion, Query, ReplySet, run_fusion_session
from fedmesh.localtrain import LocalTrainer
from fedmesh.model import DecisionTree
from fedmesh.party import Party
from fedmesh.protocol import (
    Envelope,
    MessageType,
    envelope_to_query,
    payload_to_update,
    query_to_envelope,
    update_to_payload,
)
from fedmesh.transport import decode_frame, encode_frame

_keys = itertools.count()


def commands(*lines: str):
    return [parse_command(line) for line in lines]


def schema_cfg(ds: Dataset) -> dict[str, Any]:
    s = ds.schema
    return {
        "label": s.label_column,
        "labels": list(s.labels),
        "features": [
            {"name": f.name, "kind": f.kind, **({"domain": list(f.domain)} if f.kind == "categorical" else {})}
            for f in s.features
        ],
    }


@dataclass
class FederationResult:
    agg_code: int
    party_codes: dict[str, int]
    agg_out: str
    party_out: dict[str, str]
    agg_events: list[str]
    party_events: dict[str, list[str]]
    agg: Aggregator | None
    parties: dict[str, Party] = field(default_factory=dict)
    seconds: float = 0.0


def run_federation(
    workdir: Path,
    parts: Sequence[Dataset],
    *,
    fusion: str = "fedavg",
    transport: str = "in_process",
    rounds: int = 30,
    epochs: int = 1,
    learning_rate: float = 0.1,
    batch_size: int = 16,
    quorum: Any = "all",
    run_eval: bool = False,
    dp: dict[str, Any] | None = None,
    dp_budget: float | None = None,
    reply_timeout_ms: int = 30_000,
    test_fraction: float = 0.0,
    seed: int = 0,
    max_depth: int | None = None,
    agg_script: Sequence[str] | None = None,
    party_script: Callable[[str], Sequence[str]] | None = None,
    party_factory: Callable[[str], Callable[..., Party] | None] | None = None,
    timeout: float = 60.0,
) -> FederationResult:
    """Write each part to CSV, then run ``fedmesh-agg`` and one ``fedmesh-party`` per part."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    schema = parts[0].schema
    id3 = fusion == "id3"
    model: dict[str, Any] = {"kind": "id3" if id3 else "linear"}
    if id3:
        model["schema"] = schema_cfg(parts[0])
        if max_depth is not None:
            model["max_depth"] = max_depth
    else:
        model.update(n_features=schema.n_features, n_classes=schema.n_classes)
    listen = f"fed-{next(_keys)}" if transport == "in_process" else "127.0.0.1:0"
    agg_cfg = parse_config(
        {
            "connection": {"transport": transport, "listen": listen},
            "fusion": {
                "kind": fusion,
                "hyperparams": {
                    "max_rounds": rounds,
                    "epochs": epochs,
                    "learning_rate": learning_rate,
                    "batch_size": batch_size,
                },
                "quorum": quorum,
                "run_eval": run_eval,
                "dp_budget": dp_budget,
            },
            "model": model,
            "protocol": {"reply_timeout_ms": reply_timeout_ms, "expected_parties": len(parts)},
        },
        "aggregator",
    )
    agg_script = agg_script or ("START", "TRAIN", "SYNC", f"SAVE {workdir / 'global.json'}", "STOP")
    party_script = party_script or (lambda pid: ("START", "REGISTER", f"SAVE {workdir / (pid + '.json')}", "STOP"))
    policy = "counts" if id3 else ("weights_and_nsamples" if fusion == "fedavg" else "weights_only")

    ready = threading.Event()
    holder: dict[str, Aggregator] = {}

    def on_agg_ready(agg: Aggregator) -> None:
        holder["agg"] = agg
        ready.set()

    agg_out, agg_events = io.StringIO(), io.StringIO()
    codes: dict[str, int] = {}
    outs = {f"p{i}": io.StringIO() for i in range(len(parts))}
    pevents = {pid: io.StringIO() for pid in outs}
    parties: dict[str, Party] = {}

    def agg_main() -> None:
        codes["agg"] = run_aggregator(
            agg_cfg, commands(*agg_script), seed=seed, out=agg_out, event_stream=agg_events, on_ready=on_agg_ready
        )
        ready.set()

    def party_main(i: int) -> None:
        pid = f"p{i}"
        path = workdir / f"{pid}.csv"
        save_csv(parts[i], path)
        ready.wait(timeout)
        agg = holder.get("agg")
        deadline = time.monotonic() + timeout
        while agg is not None and agg.address is None and time.monotonic() < deadline:
            time.sleep(0.005)
        address = agg.address if agg is not None and agg.address else listen
        pcfg = parse_config(
            {
                "connection": {"transport": transport, "aggregator": address, "party_id": pid},
                "data": {"path": str(path), "schema": schema_cfg(parts[i]), "test_fraction": test_fraction, "seed": 0},
                "local_training": {"reply_policy": policy, "dp": dp},
                "model": {"kind": model["kind"]},
            },
            "party",
        )
        factory = party_factory(pid) if party_factory else None
        codes[pid] = run_party(
            pcfg,
            commands(*party_script(pid)),
            out=outs[pid],
            event_stream=pevents[pid],
            party_factory=factory,
            on_ready=lambda p: parties.__setitem__(pid, p),
        )

    started = time.perf_counter()
    threads = [threading.Thread(target=agg_main, daemon=True)]
    threads += [threading.Thread(target=party_main, args=(i,), daemon=True) for i in range(len(parts))]
    for t in threads:
        t.start()
    for t in threads:
        t.join(timeout)
        if t.is_alive():
            raise TimeoutError(f"federation did not finish within {timeout}s; agg output:\n{agg_out.getvalue()}")
    return FederationResult(
        agg_code=codes["agg"],
        party_codes={pid: codes[pid] for pid in outs},
        agg_out=agg_out.getvalue(),
        party_out={pid: o.getvalue() for pid, o in outs.items()},
        agg_events=agg_events.getvalue().splitlines(),
        party_events={pid: e.getvalue().splitlines() for pid, e in pevents.items()},
        agg=holder.get("agg"),
        parties=parties,
        seconds=time.perf_counter() - started,
    )


def killing_party(at_round: int) -> Callable[..., Party]:
    """Factory for a party that drops its connection when the query for ``at_round`` arrives."""

    class _Killed(Party):
        def _handle(self, env):  # type: ignore[override]
            if env.round >= at_round and env.type.value == "TRAIN_QUERY":
                self.kill()
                return
            super()._handle(env)

    def make(cfg, events: EventLog) -> Party:
        return _Killed(cfg, events=events)

    return make


def wire_exchange(trainers: dict[str, LocalTrainer]):
    """Exchange function that pushes each query and reply through the frame codec."""

    def exchange(q: Query) -> ReplySet:
        frame = encode_frame(query_to_envelope(q, "aggregator"))
        replies = {}
        for pid, trainer in sorted(trainers.items()):
            upd = trainer.handle(envelope_to_query(decode_frame(frame)))
            back = decode_frame(encode_frame(Envelope(MessageType.MODEL_UPDATE, pid, q.round, update_to_payload(upd))))
            replies[pid] = payload_to_update(back.payload)
        return ReplySet(q.round, replies)

    return exchange


def federated_id3(parts: Sequence[Dataset], max_depth: int = 8, max_rounds: int = 10_000):
    schema = parts[0].schema
    trainers = {
        f"p{i}": LocalTrainer(DecisionTree(schema, max_depth), part, reply_policy="counts", party_id=f"p{i}")
        for i, part in enumerate(parts)
    }
    tree = DecisionTree(schema, max_depth)
    state = GlobalModelState(tree, max_rounds)
    run_fusion_session(Id3Fusion(tree), wire_exchange(trainers), state)
    return tree, state
