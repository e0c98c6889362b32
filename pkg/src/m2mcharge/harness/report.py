"""Run summary written to ``report.json``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

# excluded from byte-identity comparisons: it is the only non-deterministic field
VOLATILE_FIELDS = ("runtime_s",)


@dataclass
class SessionRecord:
    channel_id: str
    vehicle: int
    station: int
    tariff: int
    deposit_each: int
    target_j: int
    power_max: int
    open_tick: int
    vehicle_address: str
    station_address: str
    escrow_address: str
    open_bundle: str
    opened_tick: Optional[int] = None
    close_tick: Optional[int] = None
    close_bundle: Optional[str] = None
    close_reason: str = ""
    initiator: str = ""
    forced: bool = False
    energy_j: int = 0
    owed_tokens: int = 0
    tokens_settled: int = 0
    final_seq: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def completed(self) -> bool:
        return self.close_bundle is not None


@dataclass
class LedgerStats:
    tx_count: int = 0
    bundle_count: int = 0
    confirmed_count: int = 0
    conflicting_bundles: int = 0
    milestones: int = 0
    supply: int = 0
    confirmed_total: int = 0


@dataclass
class ConservationResult:
    ok: bool = True
    checks: int = 0
    failures: list[dict] = field(default_factory=list)


@dataclass
class RunReport:
    scenario: str
    seed: int
    ticks: int
    mode: str
    difficulty: int
    k: int
    coordinator_address: str
    treasury_address: str
    sessions: list[SessionRecord] = field(default_factory=list)
    ledger: LedgerStats = field(default_factory=LedgerStats)
    conservation: ConservationResult = field(default_factory=ConservationResult)
    violations: int = 0
    attack: Optional[dict] = None
    runtime_s: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, obj: dict) -> RunReport:
        obj = dict(obj)
        obj["sessions"] = [SessionRecord(**s) for s in obj.get("sessions", [])]
        obj["ledger"] = LedgerStats(**obj.get("ledger", {}))
        obj["conservation"] = ConservationResult(**obj.get("conservation", {}))
        return cls(**obj)

    @classmethod
    def load(cls, path: str | Path) -> RunReport:
        return cls.from_json(json.loads(Path(path).read_text()))

    def stable_json(self) -> str:
        """The report minus volatile fields, for determinism checks."""
        obj = self.to_json()
        for k in VOLATILE_FIELDS:
            obj.pop(k, None)
        return json.dumps(obj, sort_keys=True)
