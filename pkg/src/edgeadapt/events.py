"""Timestamped event log shared by devices, cloud and metrics."""
from __future__ import annotations

import json
from typing import Iterable, Iterator


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if hasattr(value, "item"):      # numpy scalars
        return value.item()
    return value


class EventLog:
    """Append-only list of flat dict records ``{"t", "kind", ...}``."""

    def __init__(self, clock=None):
        self.clock = clock
        self.records: list[dict] = []

    def emit(self, kind: str, **info) -> dict:
        rec = {"t": float(self.clock.now) if self.clock is not None else 0.0, "kind": kind}
        for key, value in info.items():
            rec[key] = _plain(value)
        self.records.append(rec)
        return rec

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of(self, *kinds: str) -> list[dict]:
        return [r for r in self.records if r["kind"] in kinds]

    def dumps(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def write_log(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_log(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{n}: bad event record ({exc})") from None
            if "t" not in rec or "kind" not in rec:
                raise ValueError(f"{path}:{n}: event record lacks t/kind")
            out.append(rec)
    return out
