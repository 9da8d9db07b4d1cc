"""One-line, machine-parseable event log for the FL process."""

from __future__ import annotations

import threading
from datetime import datetime, timezone
from typing import Any, TextIO

_write_lock = threading.Lock()


def _fmt(value: Any) -> str:
    text = str(value.value if hasattr(value, "value") else value)
    text = text.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")
    if not text or any(ch in text for ch in ' "='):
        text = '"' + text.replace('"', '\\"') + '"'
    return text


def format_event(role: str, phase: Any, round: int, event: str, **details: Any) -> str:
    stamp = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
    fields = [f"role={_fmt(role)}", f"phase={_fmt(phase)}", f"round={int(round)}", f"event={_fmt(event)}"]
    fields += [f"{k}={_fmt(v)}" for k, v in details.items()]
    return stamp + " " + " ".join(fields)


def log_event(stream: TextIO | None, role: str, phase: Any, round: int, event: str, **details: Any) -> str:
    line = format_event(role, phase, round, event, **details)
    if stream is not None:
        with _write_lock:
            stream.write(line + "\n")
            stream.flush()
    return line


_ESCAPES = {"n": "\n", "r": "\r"}


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            i += 1
            ch = _ESCAPES.get(text[i], text[i])
        out.append(ch)
        i += 1
    return "".join(out)


def parse_event(line: str) -> dict[str, str]:
    """Inverse of ``format_event`` for the key=value part; the timestamp is under ``ts``."""
    stamp, _, rest = line.partition(" ")
    out = {"ts": stamp}
    i = 0
    while i < len(rest):
        eq = rest.index("=", i)
        key = rest[i:eq]
        i = eq + 1
        if i < len(rest) and rest[i] == '"':
            j = i + 1
            while rest[j] != '"':
                j += 2 if rest[j] == "\\" else 1
            raw = rest[i + 1 : j]
            i = j + 1
        else:
            end = rest.find(" ", i)
            end = len(rest) if end < 0 else end
            raw = rest[i:end]
            i = end
        out[key] = _unescape(raw)
        i += 1
    return out


class EventLog:
    """Binds role plus the owner's current phase and round to ``log_event``."""

    def __init__(self, stream: TextIO | None, role: str):
        self.stream = stream
        self.role = role
        self.phase: Any = "-"
        self.round = 0
        self.lines: list[str] = []

    def __call__(self, event: str, **details: Any) -> str:
        line = log_event(self.stream, self.role, self.phase, self.round, event, **details)
        self.lines.append(line)
        return line
