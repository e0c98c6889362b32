"""Bidirectional Flash-style payment channels.

Only the opening deposit bundle and the settlement bundle touch the ledger.
In between, balances move through a chain of states: the payer signs a new
state, the payee countersigns it, and only dually signed states count at
settlement.
"""

from __future__ import annotations

import enum
import hashlib
import random
import struct
from dataclasses import dataclass, field, replace

from . import wallet
from .errors import (
    BadSignature,
    ChannelClosed,
    ConfirmationTimeout,
    InsufficientBalance,
    InsufficientChannelBalance,
    StaleSeq,
)
from .ledger import Bundle, Status, Tangle, transfer

DEFAULT_OPEN_TIMEOUT = 60


class ChannelStatus(str, enum.Enum):
    OPENING = "opening"
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class ChannelState:
    seq: int
    balance_a: int
    balance_b: int
    sig_a: bytes | None = None
    sig_b: bytes | None = None
    tick: int = 0

    @property
    def dually_signed(self) -> bool:
        return self.sig_a is not None and self.sig_b is not None

    def audit_record(self, channel_id: str) -> dict:
        return {"channel_id": channel_id, "seq": self.seq, "balance_a": self.balance_a,
                "balance_b": self.balance_b, "tick": self.tick}


def state_message(channel_id: str, seq: int, balance_a: int, balance_b: int) -> bytes:
    return b"m2m-state" + bytes.fromhex(channel_id) + struct.pack(">QQQ", seq, balance_a, balance_b)


@dataclass(eq=False)
class FlashChannel:
    id: str
    party_a: bytes
    party_b: bytes
    escrow: wallet.MultisigAddress
    deposit_each: int
    opening_bundle_id: bytes
    open_deadline: int
    states: list[ChannelState] = field(default_factory=list)
    pending: list[ChannelState] = field(default_factory=list)
    status: ChannelStatus = ChannelStatus.OPENING
    closing_bundle_id: bytes | None = None
    # both keys are captured at open: the settlement rule can sign the escrow spend
    _keys: tuple[wallet.KeyPair, wallet.KeyPair] | None = field(default=None, repr=False)

    @property
    def total(self) -> int:
        return 2 * self.deposit_each

    @property
    def latest(self) -> ChannelState:
        """Latest dually signed state."""
        return self.states[-1]

    @property
    def head(self) -> ChannelState:
        return self.pending[-1] if self.pending else self.states[-1]

    def side(self, public: bytes) -> str:
        if public == self.party_a:
            return "a"
        if public == self.party_b:
            return "b"
        raise BadSignature("key is not a member of this channel")

    def verify_state(self, state: ChannelState) -> bool:
        msg = state_message(self.id, state.seq, state.balance_a, state.balance_b)
        ok_a = state.sig_a is not None and wallet.verify(self.party_a, msg, state.sig_a)
        ok_b = state.sig_b is not None and wallet.verify(self.party_b, msg, state.sig_b)
        return ok_a and ok_b


def channel_id_for(escrow: wallet.MultisigAddress, tick: int, nonce: int = 0) -> str:
    return hashlib.sha256(b"m2m-channel" + escrow.address + struct.pack(">QQ", tick, nonce)).hexdigest()


def open_channel(tangle: Tangle, wallet_a: wallet.KeyPair, wallet_b: wallet.KeyPair, deposit_each: int,
                 rng: random.Random, *, tick: int = 0, timeout: int = DEFAULT_OPEN_TIMEOUT,
                 nonce: int = 0) -> FlashChannel:
    """Attach the equal-deposit opening bundle. The channel opens once it confirms.

    ``nonce`` selects a fresh escrow address, so every channel between the same
    two parties keeps its own single-use escrow.
    """
    if deposit_each <= 0:
        raise ValueError("deposit must be positive")
    for kp in (wallet_a, wallet_b):
        have = tangle.spendable(kp.address)
        if have < deposit_each:
            raise InsufficientBalance(kp.address.hex(), deposit_each, max(have, 0))
    escrow = wallet.make_multisig(wallet_a.public, wallet_b.public, nonce)
    cid = channel_id_for(escrow, tick, nonce)
    bundle = transfer(tick, {wallet_a.address: -deposit_each, wallet_b.address: -deposit_each,
                             escrow.address: 2 * deposit_each}, tag=b"open:" + bytes.fromhex(cid))
    bundle.sign_with(wallet_a).sign_with(wallet_b)
    tangle.attach_bundle(bundle, rng)
    ch = FlashChannel(id=cid, party_a=wallet_a.public, party_b=wallet_b.public, escrow=escrow,
                      deposit_each=deposit_each, opening_bundle_id=bundle.bundle_id,
                      open_deadline=tick + timeout, _keys=(wallet_a, wallet_b))
    msg = state_message(cid, 0, deposit_each, deposit_each)
    ch.states.append(ChannelState(0, deposit_each, deposit_each, wallet.sign(wallet_a, msg),
                                  wallet.sign(wallet_b, msg), tick))
    return ch


def poll_open(channel: FlashChannel, tangle: Tangle, tick: int) -> bool:
    """Advance OPENING -> OPEN once the deposits confirm."""
    if channel.status is ChannelStatus.OPEN:
        return True
    if channel.status is ChannelStatus.CLOSED:
        raise ChannelClosed(channel.id)
    if tangle.bundle_status(channel.opening_bundle_id) is Status.CONFIRMED:
        channel.status = ChannelStatus.OPEN
        return True
    if tick > channel.open_deadline:
        raise ConfirmationTimeout(f"opening bundle of {channel.id[:12]}.. unconfirmed after deadline")
    return False


def stream_payment(channel: FlashChannel, payer: wallet.KeyPair, amount: int, tick: int = 0) -> ChannelState:
    """Propose the next state moving ``amount`` from payer to payee, payer-signed only.

    Proposals chain on the newest proposal so several payments can be in flight;
    the payer can never commit more than the chain leaves it.
    """
    if channel.status is not ChannelStatus.OPEN:
        raise ChannelClosed(f"channel {channel.id[:12]}.. is {channel.status.value}")
    if amount < 0:
        raise ValueError("amount must be non-negative")
    side = channel.side(payer.public)
    base = channel.head
    if side == "a":
        if base.balance_a < amount:
            raise InsufficientChannelBalance(f"payer holds {base.balance_a}, needs {amount}")
        bal_a, bal_b = base.balance_a - amount, base.balance_b + amount
    else:
        if base.balance_b < amount:
            raise InsufficientChannelBalance(f"payer holds {base.balance_b}, needs {amount}")
        bal_a, bal_b = base.balance_a + amount, base.balance_b - amount
    seq = base.seq + 1
    sig = wallet.sign(payer, state_message(channel.id, seq, bal_a, bal_b))
    state = ChannelState(seq, bal_a, bal_b, sig if side == "a" else None, sig if side == "b" else None, tick)
    channel.pending.append(state)
    return state


def countersign(channel: FlashChannel, payee: wallet.KeyPair, state: ChannelState, tick: int | None = None) -> ChannelState:
    if channel.status is ChannelStatus.CLOSED:
        raise ChannelClosed(channel.id)
    side = channel.side(payee.public)
    latest = channel.latest
    if state.seq != latest.seq + 1:
        raise StaleSeq(f"expected seq {latest.seq + 1}, got {state.seq}")
    if state.balance_a + state.balance_b != channel.total or min(state.balance_a, state.balance_b) < 0:
        raise BadSignature("state breaks channel conservation")
    msg = state_message(channel.id, state.seq, state.balance_a, state.balance_b)
    if side == "b":
        ok = state.sig_a is not None and wallet.verify(channel.party_a, msg, state.sig_a)
        paid = state.balance_b >= latest.balance_b
    else:
        ok = state.sig_b is not None and wallet.verify(channel.party_b, msg, state.sig_b)
        paid = state.balance_a >= latest.balance_a
    if not ok or not paid:
        raise BadSignature("payer signature invalid or state moves funds away from payee")
    sig = wallet.sign(payee, msg)
    signed = replace(state, sig_b=sig, tick=state.tick if tick is None else tick) if side == "b" else \
        replace(state, sig_a=sig, tick=state.tick if tick is None else tick)
    channel.states.append(signed)
    channel.pending = [p for p in channel.pending if p.seq > signed.seq]
    return signed


def _settlement_bundle(channel: FlashChannel, tick: int) -> Bundle:
    final = channel.latest
    ka, kb = channel._keys
    moves = {channel.escrow.address: -channel.total}
    if final.balance_a:
        moves[ka.address] = final.balance_a
    if final.balance_b:
        moves[kb.address] = final.balance_b
    bundle = transfer(tick, moves, tag=b"close:" + bytes.fromhex(channel.id))
    return bundle.sign_multisig(ka, kb, channel.escrow.index)


def _settle(channel: FlashChannel, tangle: Tangle, rng: random.Random, tick: int) -> bytes:
    if channel.status is not ChannelStatus.OPEN:
        raise ChannelClosed(f"channel {channel.id[:12]}.. is {channel.status.value}")
    bundle = _settlement_bundle(channel, tick)
    tangle.attach_bundle(bundle, rng)
    channel.pending.clear()
    channel.status = ChannelStatus.CLOSED
    channel.closing_bundle_id = bundle.bundle_id
    return bundle.bundle_id


def cooperative_close(channel: FlashChannel, tangle: Tangle, rng: random.Random, tick: int = 0) -> bytes:
    """Both parties sign a payout of the latest dually signed state."""
    return _settle(channel, tangle, rng, tick)


def forced_close(channel: FlashChannel, tangle: Tangle, initiator: bytes, rng: random.Random, tick: int = 0) -> bytes:
    """Unilateral close: payer-signed-only proposals are discarded."""
    channel.side(initiator)
    return _settle(channel, tangle, rng, tick)


def settlement(channel: FlashChannel) -> tuple[int, int]:
    return channel.latest.balance_a, channel.latest.balance_b
