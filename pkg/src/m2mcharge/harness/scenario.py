"""Scenario files: YAML (or JSON) validated against a pydantic schema."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..adversary import AttackSpec
from ..errors import ConfigInvalid
from ..ledger import Mode


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FeederSpec(_Strict):
    id: int = Field(ge=0)
    cap: int = Field(gt=0, description="feeder capacity in watts")


class StationSpec(_Strict):
    id: int = Field(ge=0)
    location: tuple[float, float] = (0.0, 0.0)
    tariff: int = Field(2_000_000, ge=0, description="tokens per megajoule")
    tariff_schedule: list[tuple[int, int]] = Field(default_factory=list,
                                                   description="(start tick, tariff) steps")
    power_max: int = Field(7000, gt=0, description="watts")
    feeder: int = Field(0, ge=0)
    funds: int = Field(10_000_000, ge=0)
    payment_grace: int = Field(3, ge=0)


class VehicleSpec(_Strict):
    id: int = Field(ge=0)
    location: tuple[float, float] = (0.0, 0.0)
    battery_capacity: int = Field(1_000_000, gt=0, description="joules")
    battery_level: int = Field(100_000, ge=0, description="joules")
    bms_threshold: float = Field(0.2, ge=0.0, le=1.0)
    charge_to: float = Field(1.0, gt=0.0, le=1.0)
    drain_w: int = Field(0, ge=0, description="energy drawn per idle tick (J)")
    accept_tariff_max: Optional[int] = Field(None, ge=0)
    funds: int = Field(10_000_000, ge=0)

    @model_validator(mode="after")
    def _level(self) -> "VehicleSpec":
        if self.battery_level > self.battery_capacity:
            raise ValueError("battery_level exceeds battery_capacity")
        return self


class BusSpec(_Strict):
    latency: int = Field(0, ge=0, description="ticks")
    drop: float = Field(0.0, ge=0.0, le=1.0)


class LedgerSpec(_Strict):
    difficulty: int = Field(8, ge=0, le=24)
    mode: Mode = Mode.COORDINATOR
    k: int = Field(5, ge=1)
    milestone_interval: int = Field(10, ge=1)
    open_timeout: int = Field(200, ge=1)


class StopEvent(_Strict):
    """Scripted manual stop of whatever session the party is in."""

    tick: int = Field(ge=0)
    party: str = Field(pattern="^(vehicle|station)$")
    id: int = Field(ge=0)


class Scenario(_Strict):
    name: str = "scenario"
    seed: int = Field(0, ge=0, lt=2**64)
    ticks: int = Field(1000, ge=0)
    payments_per_tick: Optional[int] = Field(
        None, ge=0, description="honest background ledger transactions per tick "
                                "(default 0 with a coordinator, 1 without)")
    bus: BusSpec = Field(default_factory=BusSpec)
    ledger: LedgerSpec = Field(default_factory=LedgerSpec)
    feeders: list[FeederSpec] = Field(default_factory=lambda: [FeederSpec(id=0, cap=1_000_000)])
    stations: list[StationSpec] = Field(default_factory=list)
    vehicles: list[VehicleSpec] = Field(default_factory=list)
    stops: list[StopEvent] = Field(default_factory=list)
    attack: Optional[AttackSpec] = None

    @model_validator(mode="after")
    def _references(self) -> "Scenario":
        for label, items in (("feeders", self.feeders), ("stations", self.stations), ("vehicles", self.vehicles)):
            ids = [x.id for x in items]
            if len(ids) != len(set(ids)):
                raise ValueError(f"{label}: ids must be unique")
        feeders = {f.id for f in self.feeders}
        for n, s in enumerate(self.stations):
            if s.feeder not in feeders:
                raise ValueError(f"stations.{n}.feeder: unknown feeder {s.feeder}")
        if self.attack is not None:
            self.attack.check_horizon(max(self.ticks, 1))
        return self

    @property
    def background_rate(self) -> int:
        if self.payments_per_tick is not None:
            return self.payments_per_tick
        return 0 if self.ledger.mode is Mode.COORDINATOR else 1


def _field_path(err: ValidationError) -> tuple[str, str]:
    first = err.errors()[0]
    path = ".".join(str(p) for p in first["loc"]) or "<root>"
    return path, first["msg"]


def parse_scenario(data: dict, **overrides) -> Scenario:
    """Validate ``data``; ``overrides`` are top-level fields applied first (``None`` skipped)."""
    if not isinstance(data, dict):
        raise ConfigInvalid("<root>", "scenario must be a mapping")
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return Scenario.model_validate(merged)
    except ValidationError as exc:
        raise ConfigInvalid(*_field_path(exc)) from None


def read_scenario_data(path: str | Path) -> dict:
    """Raw mapping from a YAML or JSON scenario file, not yet validated."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigInvalid("<file>", str(exc)) from None
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigInvalid("<file>", f"cannot parse {path.name}: {exc}") from None
    return data if data is not None else {}


def load_scenario(path: str | Path, **overrides) -> Scenario:
    return parse_scenario(read_scenario_data(path), **overrides)


def scenario_schema() -> dict:
    return Scenario.model_json_schema()
