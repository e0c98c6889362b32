"""What the simulation world offers to station and vehicle agents."""

from __future__ import annotations

from typing import Protocol

from .channel import FlashChannel
from .netbus import Bus


class Services(Protocol):
    bus: Bus

    def log(self, kind: str, tick: int, **fields) -> None: ...

    def open_channel(self, vehicle_id: int, station_id: int, deposit_each: int, tick: int,
                     tariff: int, target_j: int) -> FlashChannel: ...

    def close_channel(self, channel: FlashChannel, initiator: str, tick: int, *, forced: bool,
                      reason: str) -> None: ...

    def channel(self, channel_id: str) -> FlashChannel | None: ...
