"""``fedmesh-agg`` and ``fedmesh-party``: the operator command set, interactive or scripted."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TextIO

from .aggregator import Aggregator
from .config import AggregatorConfig, PartyConfig, generate_default, load_config
from .errors import ConfigError, FedMeshError, FormatError, IoError, ProtocolError, TransportError
from .events import EventLog
from .party import Party
from .protocol import PartyState

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRANSPORT = 3
EXIT_PROTOCOL = 4

COMMANDS = ("START", "REGISTER", "TRAIN", "SYNC", "STOP", "EVAL", "SAVE")
COMMAND_ROLES: dict[str, frozenset[str]] = {
    "START": frozenset({"aggregator", "party"}),
    "REGISTER": frozenset({"party"}),
    "TRAIN": frozenset({"aggregator"}),
    "SYNC": frozenset({"aggregator"}),
    "STOP": frozenset({"aggregator", "party"}),
    "EVAL": frozenset({"party"}),
    "SAVE": frozenset({"aggregator", "party"}),
}

# scripted parties wait this long for the session to reach SYNC / STOP
SCRIPT_WAIT_S = 600.0


@dataclass(frozen=True)
class Command:
    name: str
    arg: str | None = None


def parse_command(line: str) -> Command | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    name, _, arg = text.partition(" ")
    name = name.upper()
    if name not in COMMANDS:
        raise ValueError(f"unknown command {name!r}; expected one of {', '.join(COMMANDS)}")
    arg = arg.strip() or None
    if name == "SAVE" and arg is None:
        raise ValueError("SAVE needs a path")
    if name != "SAVE" and arg is not None:
        raise ValueError(f"{name} takes no argument")
    return Command(name, arg)


def is_legal(cmd: str, role: str) -> bool:
    return role in COMMAND_ROLES.get(cmd, frozenset())


def read_script(path: str | Path) -> list[Command]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoError(f"cannot read script {path}: {exc}") from exc
    out = []
    for n, line in enumerate(lines, 1):
        try:
            cmd = parse_command(line)
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: {exc}") from None
        if cmd is not None:
            out.append(cmd)
    return out


def _interactive(stdin: TextIO, out: TextIO, prompt: str) -> Iterator[Command]:
    while True:
        out.write(prompt)
        out.flush()
        line = stdin.readline()
        if not line:
            return
        try:
            cmd = parse_command(line)
        except ValueError as exc:
            out.write(f"error: {exc}\n")
            continue
        if cmd is not None:
            yield cmd


def _command_source(
    script: Sequence[Command] | None, stdin: TextIO | None, out: TextIO, prompt: str
) -> tuple[Iterable[Command], bool]:
    if script is not None:
        return list(script), True
    return _interactive(stdin or sys.stdin, out, prompt), False


def run_aggregator(
    config: str | Path | AggregatorConfig,
    script: Sequence[Command] | None = None,
    *,
    seed: int = 0,
    stdin: TextIO | None = None,
    out: TextIO | None = None,
    event_stream: TextIO | None = None,
    on_ready: Callable[[Aggregator], None] | None = None,
) -> int:
    out = out or sys.stdout
    try:
        cfg = config if isinstance(config, AggregatorConfig) else load_config(config, "aggregator")
        agg = Aggregator(cfg, seed=seed, events=EventLog(event_stream, "agg"))
    except (ConfigError, FormatError, IoError) as exc:
        out.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    if on_ready is not None:
        on_ready(agg)
    commands, scripted = _command_source(script, stdin, out, "fedmesh-agg> ")
    exit_code: int | None = None
    for cmd in commands:
        if not is_legal(cmd.name, "aggregator"):
            out.write(f"error: {cmd.name} is not an aggregator command\n")
            continue
        if cmd.name == "TRAIN" and scripted and agg.started:
            res = agg.command("WAIT_QUORUM")
            if not res.ok:
                out.write(f"error: {res.message}\n")
        try:
            res = agg.command(cmd.name, cmd.arg)
        except TransportError as exc:
            out.write(f"transport error: {exc}\n")
            if cmd.name == "START":
                exit_code = EXIT_TRANSPORT
                break
            continue
        except Exception as exc:
            # an internal failure still ends the session so parties are released
            out.write(f"error: {type(exc).__name__}: {exc}\n")
            exit_code = EXIT_PROTOCOL
            break
        out.write(("ok: " if res.ok else "error: ") + res.message + "\n")
        out.flush()
        if cmd.name == "STOP":
            break
    if not agg.stopped:
        agg.command("STOP")
    agg.join(5)
    if exit_code is not None:
        return exit_code
    if agg.clean_stop:
        return EXIT_OK
    return EXIT_PROTOCOL


def _party_wait(party: Party, states: set[PartyState], scripted: bool) -> None:
    if scripted and party.state not in (PartyState.IDLE, PartyState.CONNECTED):
        party.wait_for(states, SCRIPT_WAIT_S)


def run_party(
    config: str | Path | PartyConfig,
    script: Sequence[Command] | None = None,
    *,
    seed: int | None = None,
    stdin: TextIO | None = None,
    out: TextIO | None = None,
    event_stream: TextIO | None = None,
    party_factory: Callable[[PartyConfig, EventLog], Party] | None = None,
    on_ready: Callable[[Party], None] | None = None,
) -> int:
    out = out or sys.stdout
    try:
        cfg = config if isinstance(config, PartyConfig) else load_config(config, "party")
        events = EventLog(event_stream, "party")
        party = party_factory(cfg, events) if party_factory else Party(cfg, events=events, seed=seed)
    except (ConfigError, FormatError, IoError) as exc:
        out.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    if on_ready is not None:
        on_ready(party)
    commands, scripted = _command_source(script, stdin, out, "fedmesh-party> ")
    settled = {PartyState.SYNCED, PartyState.STOPPED}
    exit_code = EXIT_OK
    for cmd in commands:
        if not is_legal(cmd.name, "party"):
            out.write(f"error: {cmd.name} is not a party command\n")
            continue
        try:
            if cmd.name == "START":
                party.start()
                out.write(f"ok: connected to {cfg.connection.aggregator}\n")
            elif cmd.name == "REGISTER":
                party.register()
                out.write(f"ok: registered in session {party.session_id}\n")
            elif cmd.name == "EVAL":
                _party_wait(party, settled, scripted)
                m = party.evaluate()
                out.write(f"ok: accuracy={m.accuracy:.4f} n={m.n}\n")
            elif cmd.name == "SAVE":
                _party_wait(party, settled, scripted)
                party.save(cmd.arg)
                out.write(f"ok: model saved to {cmd.arg}\n")
            elif cmd.name == "STOP":
                # a scripted party leaves only once the aggregator ends the session
                _party_wait(party, {PartyState.STOPPED}, scripted)
                party.stop()
                out.write(f"ok: stopped ({party.stop_reason})\n")
                break
        except ConfigError as exc:
            out.write(f"config error: {exc}\n")
            exit_code = EXIT_CONFIG
            break
        except TransportError as exc:
            out.write(f"transport error: {exc}\n")
            if cmd.name in ("START", "REGISTER"):
                exit_code = EXIT_TRANSPORT
                break
        except (ProtocolError, FedMeshError) as exc:
            out.write(f"error: {exc}\n")
        out.flush()
    party.stop()
    return exit_code


def _parser(prog: str, role: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog=prog, description=f"fedmesh {role}")
    p.add_argument("--config", help="YAML configuration file")
    p.add_argument("--script", help="file with one command per line; omit for an interactive prompt")
    p.add_argument("--log-level", default="WARNING", help="python logging level (default WARNING)")
    p.add_argument("--seed", type=int, default=None, help="global seed (u64)")
    p.add_argument("--init-config", metavar="PATH", help="write a default configuration template and exit")
    return p


def _setup(args: argparse.Namespace) -> None:
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def _main(role: str, argv: Sequence[str] | None) -> int:
    prog = "fedmesh-agg" if role == "aggregator" else "fedmesh-party"
    args = _parser(prog, role).parse_args(argv)
    _setup(args)
    if args.init_config:
        try:
            generate_default(role, args.init_config)
        except IoError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"wrote {role} template to {args.init_config}")
        return EXIT_OK
    if not args.config:
        print("error: --config is required", file=sys.stderr)
        return EXIT_CONFIG
    script = None
    if args.script:
        try:
            script = read_script(args.script)
        except (IoError, FormatError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    if role == "aggregator":
        return run_aggregator(args.config, script, seed=args.seed or 0, event_stream=sys.stderr)
    return run_party(args.config, script, seed=args.seed, event_stream=sys.stderr)


def agg_main(argv: Sequence[str] | None = None) -> int:
    return _main("aggregator", argv)


def party_main(argv: Sequence[str] | None = None) -> int:
    return _main("party", argv)


def main(argv: Sequence[str] | None = None) -> int:
    """``python -m fedmesh {agg,party} ...``"""
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in ("agg", "party"):
        print("usage: python -m fedmesh {agg,party} [options]", file=sys.stderr)
        return EXIT_CONFIG
    return agg_main(argv[1:]) if argv[0] == "agg" else party_main(argv[1:])
