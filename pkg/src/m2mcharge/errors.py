"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class M2MError(Exception):
    """Base class for all library errors."""


# wallet
class IdenticalMembers(M2MError):
    pass


# ledger
class LedgerError(M2MError):
    pass


class InvalidBundle(LedgerError):
    pass


class InvalidSignature(LedgerError):
    pass


class InsufficientBalance(LedgerError):
    def __init__(self, address: str, needed: int, available: int):
        super().__init__(f"address {address[:12]}.. needs {needed}, has {available}")
        self.address = address
        self.needed = needed
        self.available = available


class Conflict(LedgerError):
    pass


class WrongMode(LedgerError):
    pass


class UnknownTransaction(LedgerError, KeyError):
    pass


class SearchExhausted(LedgerError):
    pass


class SnapshotError(LedgerError):
    pass


# channel
class ChannelError(M2MError):
    pass


class ChannelClosed(ChannelError):
    pass


class InsufficientChannelBalance(ChannelError):
    pass


class BadSignature(ChannelError):
    pass


class StaleSeq(ChannelError):
    pass


class ConfirmationTimeout(ChannelError):
    pass


# netbus
class InvalidTopic(M2MError, ValueError):
    pass


class InvalidFilter(M2MError, ValueError):
    pass


# agents
class NotCharging(M2MError):
    pass


class NoneAvailable(M2MError):
    pass


class ConfigInvalid(M2MError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
