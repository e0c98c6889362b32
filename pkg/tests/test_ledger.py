import io
import random

import pytest
from oracles import leading_zeros, nodes_of, past_cone, pow_scan, tangle_oracle

from conftest import SUPPLY, funded_tangle
from m2mcharge import wallet
from m2mcharge.errors import (
    Conflict,
    InsufficientBalance,
    InvalidBundle,
    InvalidSignature,
    SnapshotError,
    UnknownTransaction,
    WrongMode,
)
from m2mcharge.ledger import Bundle, Entry, Mode, Status, Tangle, Transaction, data_bundle, do_pow, snapshot, transfer


@pytest.fixture
def bare():
    g = wallet.derive(1)
    return Tangle(g.address, SUPPLY, difficulty=0, coordinator=wallet.derive(2)), g


class TestTips:
    def test_genesis_only_returns_genesis_twice(self, bare):
        t, _ = bare
        assert t.select_tips(random.Random(0)) == (t.genesis.id, t.genesis.id)

    def test_single_tip_duplicated(self, bare):
        t, g = bare
        t1 = t.attach_data(g.address, 1, b"t1", random.Random(0))
        assert t.tips == [t1]
        assert t.select_tips(random.Random(5)) == (t1, t1)

    def test_two_tips_seed_42(self, bare):
        t, g = bare
        rng = random.Random(0)
        t1 = t.attach_data(g.address, 1, b"t1", rng)
        # second tx approves genesis twice so both t1 and t2 stay tips
        (t2,) = t.attach_raw(data_bundle(1, g.address, b"t2"), [(t.genesis.id, t.genesis.id)])
        assert t.tips == [t1, t2]
        # frozen from enumerating random.Random(42).randrange(2) twice over the tips in attach order
        assert t.select_tips(random.Random(42)) == (t1, t1)
        r = random.Random(42)
        assert [r.randrange(2), r.randrange(2)] == [0, 0]

    def test_tips_are_exactly_unapproved(self, bare):
        t, g = bare
        rng = random.Random(3)
        for n in range(30):
            t.attach_data(g.address, n, b"%d" % n, rng)
        approved = {p for tx in t.txs for p in tx.parents}
        assert set(t.tips) == {tx.id for tx in t.txs} - approved


class TestPow:
    def _tx(self):
        return Transaction(approves=(bytes(32), bytes(32)), address=bytes(range(32)), value=0, timestamp=3,
                           bundle_id=b"\x07" * 32, attach_order=1)

    def test_difficulty_zero_is_nonce_zero(self):
        assert do_pow(self._tx(), 0) == 0

    def test_difficulty_8_matches_scan(self):
        tx = self._tx()
        n = do_pow(tx, 8)
        assert n == pow_scan(tx, 8)
        assert tx.sealed(n).id[0] == 0

    @pytest.mark.parametrize("difficulty", [1, 4, 12])
    def test_matches_scan_other_difficulties(self, difficulty):
        tx = self._tx()
        assert do_pow(tx, difficulty) == pow_scan(tx, difficulty)

    def test_deterministic(self):
        assert do_pow(self._tx(), 10) == do_pow(self._tx(), 10)

    def test_difficulty_bound(self):
        with pytest.raises(ValueError):
            do_pow(self._tx(), 25)

    def test_attached_transactions_carry_pow(self):
        g = wallet.derive(1)
        t = Tangle(g.address, SUPPLY, difficulty=8)
        rng = random.Random(0)
        for n in range(5):
            t.attach_data(g.address, n, b"%d" % n, rng)
        assert all(leading_zeros(tx.id) >= 8 for tx in t.txs)
        assert all(t.validate_transaction(tx) is None for tx in t.txs)


class TestBundles:
    def test_empty_bundle_invalid(self):
        with pytest.raises(InvalidBundle):
            Bundle(entries=(), tick=0)

    def test_unbalanced_bundle_invalid(self):
        with pytest.raises(InvalidBundle):
            transfer(0, {b"a" * 32: -5, b"b" * 32: 4})

    def test_deposit_then_pending_balance(self, alice):
        t, _, rng = funded_tangle(alice, amount=10_000)
        escrow = wallet.make_multisig(alice.public, wallet.derive(5).public)
        t.attach_bundle(transfer(1, {alice.address: -5000, escrow.address: 5000}).sign_with(alice), rng)
        assert t.spendable(alice.address) == 5000
        assert t.balance(alice.address) == 10_000  # not confirmed yet

    def test_replay_is_conflict(self, alice, bob):
        t, _, rng = funded_tangle(alice, amount=10_000)
        b = transfer(1, {alice.address: -100, bob.address: 100}).sign_with(alice)
        t.attach_bundle(b, rng)
        again = transfer(1, {alice.address: -100, bob.address: 100}).sign_with(alice)
        with pytest.raises(Conflict):
            t.attach_bundle(again, rng)

    def test_overspend_rejected(self, alice, bob):
        t, _, rng = funded_tangle(alice, amount=100)
        with pytest.raises(InsufficientBalance):
            t.attach_bundle(transfer(1, {alice.address: -5000, bob.address: 5000}).sign_with(alice), rng)

    def test_unsigned_input_rejected(self, alice, bob):
        t, _, rng = funded_tangle(alice)
        with pytest.raises(InvalidSignature):
            t.attach_bundle(transfer(1, {alice.address: -1, bob.address: 1}), rng)

    def test_wrong_signer_rejected(self, alice, bob):
        t, _, rng = funded_tangle(alice)
        with pytest.raises(InvalidSignature):
            t.attach_bundle(transfer(1, {alice.address: -1, bob.address: 1}).sign_with(bob), rng)

    def test_multisig_needs_both(self, alice, bob, carol):
        t, _, rng = funded_tangle(alice)
        ms = wallet.make_multisig(alice.public, bob.public)
        t.attach_bundle(transfer(1, {alice.address: -500, ms.address: 500}).sign_with(alice), rng)
        t.issue_milestone(tick=2)
        spend = transfer(3, {ms.address: -500, carol.address: 500})
        spend.sign_input(ms.address, wallet.partial_multisig_fragment(alice, bob.public, spend.bundle_id))
        with pytest.raises(InvalidSignature):
            t.attach_bundle(spend, rng)
        spend.sign_multisig(alice, bob)
        t.attach_bundle(spend, rng)

    def test_ids_returned_in_bundle_order(self, alice, bob, carol):
        t, _, rng = funded_tangle(alice)
        b = transfer(1, {alice.address: -30, bob.address: 10, carol.address: 20}).sign_with(alice)
        ids = t.attach_bundle(b, rng)
        assert [t.get(i).address for i in ids] == [alice.address, bob.address, carol.address]


class TestValidation:
    def test_genesis_ok(self, bare):
        t, _ = bare
        assert t.validate_transaction(t.genesis) is None

    def test_weak_pow_flagged(self, alice):
        g = wallet.derive(1)
        t = Tangle(g.address, SUPPLY, difficulty=8)
        utx = Transaction(approves=(t.genesis.id, t.genesis.id), address=g.address, value=0, timestamp=0,
                          bundle_id=bytes(32), attach_order=1)
        bad = next(n for n in range(1000) if leading_zeros(utx.sealed(n).id) == 0)
        assert t.validate_transaction(utx.sealed(bad)).kind == "pow"

    def test_unknown_parent(self, bare):
        t, g = bare
        utx = Transaction(approves=(b"\x01" * 32, t.genesis.id), address=g.address, value=0, timestamp=0,
                          bundle_id=bytes(32), attach_order=1).sealed(0)
        assert t.validate_transaction(utx).kind == "parent"

    def test_double_spend_in_cone_is_conflict(self, alice, bob, carol):
        t, _, rng = funded_tangle(alice, amount=1000)
        pay = transfer(1, {alice.address: -1000, bob.address: 1000}, tag=b"x").sign_with(alice)
        (p1, _) = t.attach_bundle(pay, rng)
        dbl = transfer(1, {alice.address: -1000, carol.address: 1000}, tag=b"y").sign_with(alice)
        tips = t.tips
        ids = t.attach_raw(dbl, [(p1, tips[-1])] * 2)
        tx = t.get(ids[0])
        bad = t.validate_transaction(tx)
        assert bad is not None and bad.kind == "conflict"
        # oracle: the cone holds two spends of alice's single credit
        nodes = {n.id: n for n in nodes_of(t)}
        cone = past_cone(nodes, tx.id)
        spends = [i for i in cone if nodes[i].address == alice.address and nodes[i].value < 0]
        assert len(spends) == 2

    def test_validation_is_pure(self, alice):
        t, _, _ = funded_tangle(alice)
        before = (len(t), t.tips, t.confirmed_count())
        for tx in t.txs:
            t.validate_transaction(tx)
        assert (len(t), t.tips, t.confirmed_count()) == before


class TestMilestones:
    def test_first_milestone_on_genesis(self, bare):
        t, _ = bare
        ms = t.issue_milestone(tick=0)
        assert ms.index == 1
        assert t.get(ms.tx_id).approves == (t.genesis.id, t.genesis.id)
        assert t.confirmation_status(t.genesis.id) is Status.CONFIRMED

    def test_successive_milestones_chain(self, bare):
        t, g = bare
        rng = random.Random(1)
        m1 = t.issue_milestone(tick=0)
        for n in range(4):
            t.attach_data(g.address, n, b"%d" % n, rng)
        m2 = t.issue_milestone(tick=5)
        assert m2.index == 2
        assert m1.tx_id in t.past_cone(m2.tx_id)

    def test_wrong_mode(self):
        g = wallet.derive(1)
        t = Tangle(g.address, SUPPLY, difficulty=0, mode=Mode.COORDINATOR_FREE)
        with pytest.raises(WrongMode):
            t.issue_milestone(wallet.derive(2))

    def test_references_first_spend_only(self, alice, bob, carol):
        t, _, rng = funded_tangle(alice, amount=1000)
        first = transfer(1, {alice.address: -1000, bob.address: 1000}, tag=b"a").sign_with(alice)
        t.attach_bundle(first, rng)
        second = transfer(1, {alice.address: -1000, carol.address: 1000}, tag=b"b").sign_with(alice)
        fork = t.txs[-3].id  # a pre-payment transaction: the second spend sits on its own branch
        t.attach_raw(second, [(fork, fork)] * 2)
        for n in range(3):
            t.attach_data(bob.address, 2, b"%d" % n, rng)
        ms = t.issue_milestone(tick=3)
        cone = t.past_cone(ms.tx_id)
        assert all(t.txs[i].id in cone for i in t.bundle_members[first.bundle_id])
        assert not any(t.txs[i].id in cone for i in t.bundle_members[second.bundle_id])
        assert t.bundle_status(first.bundle_id) is Status.CONFIRMED
        assert t.bundle_status(second.bundle_id) is Status.CONFLICTING
        verdict = tangle_oracle(nodes_of(t), t.slots, mode="coordinator", k=t.k,
                                milestones=[m.tx_id for m in t.milestones])
        assert verdict.bundle_status[second.bundle_id] == "conflicting"


class TestStatus:
    def test_fresh_tip_pending(self, alice):
        t, g, rng = funded_tangle(alice)
        tip = t.attach_data(alice.address, 5, b"new", rng)
        assert t.confirmation_status(tip) is Status.PENDING

    def test_unknown_id(self, bare):
        t, _ = bare
        with pytest.raises(UnknownTransaction):
            t.confirmation_status(b"\x09" * 32)

    def test_monotone_in_coordinator_mode(self, alice, bob):
        t, _, rng = funded_tangle(alice)
        seen = set()
        for tick in range(1, 40):
            t.attach_data(bob.address, tick, b"%d" % tick, rng)
            if tick % 3 == 0:
                t.issue_milestone(tick=tick)
            now = {tx.id for tx in t.txs if t.confirmation_status(tx.id) is Status.CONFIRMED}
            assert seen <= now
            seen = now

    def test_coordinator_free_needs_k_referencers(self, alice):
        g = wallet.derive(1)
        t = Tangle(g.address, SUPPLY, difficulty=0, mode=Mode.COORDINATOR_FREE, k=3)
        (x,) = t.attach_raw(data_bundle(1, g.address, b"x"), [(t.genesis.id, t.genesis.id)])
        prev = x
        for n in range(3):
            assert t.confirmation_status(x) is Status.PENDING
            (prev,) = t.attach_raw(data_bundle(2, g.address, b"%d" % n), [(prev, prev)])
        assert t.confirmation_status(x) is Status.CONFIRMED


class TestBalance:
    def test_genesis_holds_supply(self, bare):
        t, g = bare
        assert t.balance(g.address) == SUPPLY

    def test_unknown_address_zero(self, bare):
        t, _ = bare
        assert t.balance(b"\x42" * 32) == 0

    def test_confirmed_transfer(self, alice):
        t, treasury, _ = funded_tangle(alice, amount=100)
        assert t.balance(alice.address) == 100
        assert t.balance(treasury.address) == SUPPLY - 100
        assert t.confirmed_total() == SUPPLY


class TestSnapshot:
    def _sample(self, alice, bob):
        t, _, rng = funded_tangle(alice, difficulty=4)
        t.attach_bundle(transfer(1, {alice.address: -10, bob.address: 10}).sign_with(alice), rng)
        t.issue_milestone(tick=2)
        return t

    def test_round_trip(self, alice, bob):
        t = self._sample(alice, bob)
        buf = io.StringIO()
        snapshot.dump(t, buf)
        lines = buf.getvalue().splitlines()
        assert '"approves":null' in lines[0]
        back = snapshot.parse(lines, difficulty=4, coordinator_address=t.coordinator.address)
        assert [tx.id for tx in back.txs] == [tx.id for tx in t.txs]
        assert back.balances() == t.balances()
        assert len(back.milestones) == len(t.milestones)

    def test_rejects_tampered_value(self, alice, bob):
        t = self._sample(alice, bob)
        buf = io.StringIO()
        snapshot.dump(t, buf)
        lines = buf.getvalue().splitlines()
        n = next(i for i, line in enumerate(lines) if '"value":-10}' in line)
        lines[n] = lines[n].replace('"value":-10}', '"value":-11}')
        with pytest.raises(SnapshotError):
            snapshot.parse(lines, difficulty=4)

    def test_rejects_out_of_order(self, alice, bob):
        t = self._sample(alice, bob)
        buf = io.StringIO()
        snapshot.dump(t, buf)
        lines = buf.getvalue().splitlines()
        lines[1], lines[2] = lines[2], lines[1]
        with pytest.raises(SnapshotError):
            snapshot.parse(lines, difficulty=4)

    def test_rejects_missing_genesis(self, alice, bob):
        t = self._sample(alice, bob)
        buf = io.StringIO()
        snapshot.dump(t, buf)
        with pytest.raises(SnapshotError):
            snapshot.parse(buf.getvalue().splitlines()[1:], difficulty=4)


def test_entry_values_signed():
    e = Entry(b"a" * 32, -5)
    assert e.value == -5
