"""JSONL ledger snapshots: one transaction per line, genesis first."""

from __future__ import annotations

import json
from pathlib import Path
from typing import IO

from ..errors import SnapshotError
from .tangle import DEFAULT_K, Mode, Tangle
from .transaction import Transaction


def dump(tangle: Tangle, fp: IO[str]) -> None:
    for obj in tangle.to_jsonl():
        fp.write(json.dumps(obj, sort_keys=True, separators=(",", ":")))
        fp.write("\n")


def save(tangle: Tangle, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fp:
        dump(tangle, fp)


def parse(lines, *, difficulty: int, mode: Mode | str = Mode.COORDINATOR, k: int = DEFAULT_K,
          coordinator_address: bytes | None = None) -> Tangle:
    txs = []
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            txs.append(Transaction.from_json(json.loads(line)))
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise SnapshotError(f"line {n}: malformed transaction ({exc})") from exc
    return Tangle.from_transactions(txs, difficulty=difficulty, mode=mode, k=k,
                                    coordinator_address=coordinator_address)


def load(path: str | Path, **kwargs) -> Tangle:
    with open(path, encoding="utf-8") as fp:
        return parse(fp, **kwargs)
