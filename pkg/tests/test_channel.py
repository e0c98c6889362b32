import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import replay_channel

from conftest import World, funded_tangle
from m2mcharge import channel as chan
from m2mcharge import wallet
from m2mcharge.channel import ChannelStatus
from m2mcharge.errors import (
    BadSignature,
    ChannelClosed,
    ConfirmationTimeout,
    InsufficientBalance,
    InsufficientChannelBalance,
    StaleSeq,
)
from m2mcharge.ledger import Status


def escrow_bundles(tangle, ch):
    return {tx.bundle_id for tx in tangle.txs if tx.address == ch.escrow.address}


def pay(ch, payer, payee, amount, tick=0):
    return chan.countersign(ch, payee, chan.stream_payment(ch, payer, amount, tick))


def confirm(tangle, tick):
    tangle.issue_milestone(tick=tick)


class TestOpen:
    def test_escrow_holds_both_deposits(self, world, open_channel_ab):
        ch = open_channel_ab
        assert world.tangle.balance(ch.escrow.address) == 10_000
        s0 = ch.latest
        assert (s0.seq, s0.balance_a, s0.balance_b) == (0, 5000, 5000)
        assert s0.dually_signed and ch.verify_state(s0)

    def test_insufficient_party_balance(self, alice, bob):
        t, _, rng = funded_tangle(alice, bob, amount=100)
        with pytest.raises(InsufficientBalance):
            chan.open_channel(t, alice, bob, 5000, rng)

    def test_one_bundle_after_open(self, world, open_channel_ab):
        assert escrow_bundles(world.tangle, open_channel_ab) == {open_channel_ab.opening_bundle_id}

    def test_opening_until_confirmed(self, world, alice, bob):
        ch = chan.open_channel(world.tangle, alice, bob, 1000, world.rng, tick=0, timeout=5)
        assert ch.status is ChannelStatus.OPENING
        assert not chan.poll_open(ch, world.tangle, 1)
        with pytest.raises(ChannelClosed):
            chan.stream_payment(ch, alice, 1)
        with pytest.raises(ConfirmationTimeout):
            chan.poll_open(ch, world.tangle, 6)

    def test_zero_deposit_rejected(self, world, alice, bob):
        with pytest.raises(ValueError):
            chan.open_channel(world.tangle, alice, bob, 0, world.rng)


class TestStream:
    def test_pay_moves_balance(self, open_channel_ab, alice, bob):
        s = pay(open_channel_ab, alice, bob, 120)
        assert (s.balance_a, s.balance_b, s.seq) == (4880, 5120, 1)

    def test_pay_zero_advances_seq(self, open_channel_ab, alice, bob):
        s = pay(open_channel_ab, alice, bob, 0)
        assert (s.balance_a, s.balance_b, s.seq) == (5000, 5000, 1)

    def test_overdraw(self, open_channel_ab, alice, bob):
        pay(open_channel_ab, alice, bob, 120)
        with pytest.raises(InsufficientChannelBalance):
            chan.stream_payment(open_channel_ab, alice, 6000)

    def test_payer_signed_only_until_countersigned(self, open_channel_ab, alice):
        s = chan.stream_payment(open_channel_ab, alice, 10)
        assert not s.dually_signed
        assert open_channel_ab.latest.seq == 0

    def test_payee_can_pay_back(self, open_channel_ab, alice, bob):
        s = pay(open_channel_ab, bob, alice, 50)
        assert (s.balance_a, s.balance_b) == (5050, 4950)


class TestCountersign:
    def test_valid(self, open_channel_ab, alice, bob):
        s = pay(open_channel_ab, alice, bob, 1)
        assert s.dually_signed and open_channel_ab.verify_state(s)

    def test_wrong_key(self, open_channel_ab, alice, carol):
        s = chan.stream_payment(open_channel_ab, alice, 1)
        with pytest.raises(BadSignature):
            chan.countersign(open_channel_ab, carol, s)

    def test_forged_payer_signature(self, open_channel_ab, alice, bob):
        s = chan.stream_payment(open_channel_ab, alice, 1)
        forged = chan.ChannelState(s.seq, s.balance_a - 5, s.balance_b + 5, sig_a=s.sig_a)
        with pytest.raises(BadSignature):
            chan.countersign(open_channel_ab, bob, forged)

    def test_stale_seq(self, open_channel_ab, alice, bob):
        s = chan.stream_payment(open_channel_ab, alice, 1)
        chan.countersign(open_channel_ab, bob, s)
        with pytest.raises(StaleSeq):
            chan.countersign(open_channel_ab, bob, s)


class TestClose:
    def test_cooperative_payouts(self, world, open_channel_ab, alice, bob):
        ch = open_channel_ab
        pay(ch, alice, bob, 1200)
        bid = chan.cooperative_close(ch, world.tangle, world.rng, tick=3)
        assert world.tangle.slots[bid] == {ch.escrow.address: -10_000, alice.address: 3800, bob.address: 6200}
        confirm(world.tangle, 4)
        assert world.tangle.bundle_status(bid) is Status.CONFIRMED
        assert ch.status is ChannelStatus.CLOSED

    def test_close_right_after_open(self, world, open_channel_ab, alice, bob):
        chan.cooperative_close(open_channel_ab, world.tangle, world.rng, tick=3)
        assert chan.settlement(open_channel_ab) == (5000, 5000)

    def test_footprint_two_bundles(self, world, open_channel_ab, alice, bob):
        ch = open_channel_ab
        for n in range(50):
            pay(ch, alice, bob, n)
        before = len(world.tangle)
        assert escrow_bundles(world.tangle, ch) == {ch.opening_bundle_id}
        chan.cooperative_close(ch, world.tangle, world.rng, tick=3)
        assert len(world.tangle) == before + 3
        assert escrow_bundles(world.tangle, ch) == {ch.opening_bundle_id, ch.closing_bundle_id}

    def test_forced_close_uses_last_dual_state(self, world, open_channel_ab, alice, bob):
        ch = open_channel_ab
        for _ in range(2):
            pay(ch, alice, bob, 300)
        s3 = pay(ch, alice, bob, 400)
        assert (s3.seq, s3.balance_a, s3.balance_b) == (3, 4000, 6000)
        s4 = chan.stream_payment(ch, alice, 100)
        assert (s4.seq, s4.balance_a) == (4, 3900)
        bid = chan.forced_close(ch, world.tangle, bob.public, world.rng, tick=5)
        slots = world.tangle.slots[bid]
        assert (slots[alice.address], slots[bob.address]) == (4000, 6000)

    def test_forced_close_at_seq0(self, world, open_channel_ab, alice):
        bid = chan.forced_close(open_channel_ab, world.tangle, alice.public, world.rng, tick=2)
        slots = world.tangle.slots[bid]
        assert slots[alice.address] == 5000 and sum(v for v in slots.values() if v > 0) == 10_000

    def test_outsider_cannot_force_close(self, world, open_channel_ab, carol):
        with pytest.raises(BadSignature):
            chan.forced_close(open_channel_ab, world.tangle, carol.public, world.rng)

    def test_closed_channel_rejects_payments(self, world, open_channel_ab, alice):
        chan.cooperative_close(open_channel_ab, world.tangle, world.rng)
        with pytest.raises(ChannelClosed):
            chan.stream_payment(open_channel_ab, alice, 1)
        with pytest.raises(ChannelClosed):
            chan.cooperative_close(open_channel_ab, world.tangle, world.rng)


ops = st.lists(st.tuples(st.sampled_from(["pay_a", "pay_b", "sign", "drop"]), st.integers(0, 700)), max_size=60)


@settings(max_examples=60, deadline=None)
@given(script=ops, forced=st.booleans())
def test_settlement_is_last_dual_state_for_any_interleaving(script, forced):
    alice, bob = wallet.derive(101), wallet.derive(202)
    t, _, rng = funded_tangle(alice, bob, amount=20_000)
    w = World(t, rng, {"vehicle": alice, "station": bob})
    ch = w.open_channel(0, 0, 3000, 0, 0, 0)
    confirm(t, 1)
    assert chan.poll_open(ch, t, 1)
    applied = []
    proposals = []
    for op, amount in script:
        if op in ("pay_a", "pay_b"):
            payer = alice if op == "pay_a" else bob
            try:
                proposals.append((op[-1], amount, chan.stream_payment(ch, payer, amount)))
            except InsufficientChannelBalance:
                pass
        elif op == "sign" and proposals:
            side, amount, s = proposals.pop(0)
            try:
                chan.countersign(ch, bob if side == "a" else alice, s)
                applied.append((side, amount))
            except (StaleSeq, BadSignature):
                proposals.clear()
        elif op == "drop":
            proposals.clear()
        st_ = ch.latest
        assert st_.balance_a + st_.balance_b == 6000
        assert 0 <= st_.balance_a <= 6000
    expected = replay_channel(3000, applied)
    assert chan.settlement(ch) == expected
    bid = (chan.forced_close(ch, t, alice.public, rng, 9) if forced
           else chan.cooperative_close(ch, t, rng, 9))
    slots = t.slots[bid]
    assert (slots.get(alice.address, 0), slots.get(bob.address, 0)) == expected


@settings(max_examples=20, deadline=None)
@given(amounts=st.lists(st.integers(0, 9), min_size=1, max_size=1000))
def test_replay_oracle_long_sessions(amounts):
    alice, bob = wallet.derive(101), wallet.derive(202)
    t, _, rng = funded_tangle(alice, bob, amount=20_000)
    ch = chan.open_channel(t, alice, bob, 10_000, rng)
    confirm(t, 1)
    chan.poll_open(ch, t, 1)
    for a in amounts:
        pay(ch, alice, bob, a)
    assert (ch.latest.balance_a, ch.latest.balance_b) == replay_channel(10_000, [("a", a) for a in amounts])
    assert [s.seq for s in ch.states] == list(range(len(amounts) + 1))


def test_channel_ids_unique_per_nonce(alice, bob):
    t, _, rng = funded_tangle(alice, bob, amount=20_000)
    a = chan.open_channel(t, alice, bob, 1000, rng, nonce=1)
    b = chan.open_channel(t, alice, bob, 1000, random.Random(2), nonce=2)
    assert a.id != b.id and a.escrow.address != b.escrow.address
