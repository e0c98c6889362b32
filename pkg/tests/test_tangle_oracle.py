"""Random tangles checked against the brute-force confirmation oracle."""

import random

from hypothesis import HealthCheck, example, given, settings
from hypothesis import strategies as st
from oracles import nodes_of, overspends, tangle_oracle

from m2mcharge import wallet
from m2mcharge.errors import M2MError
from m2mcharge.ledger import Mode, Tangle, transfer

SUPPLY = 1000
TREASURY = wallet.derive(4001)
COORD = wallet.derive(4002)
PEOPLE = [wallet.derive(4010 + n) for n in range(3)]
ADDRS = [TREASURY] + PEOPLE

op = st.one_of(
    st.tuples(st.just("data"), st.integers(0, 3)),
    st.tuples(st.just("pay"), st.integers(0, 3), st.integers(0, 3), st.integers(1, 400)),
    st.tuples(st.just("raw"), st.integers(0, 3), st.integers(0, 3), st.integers(1, 400),
              st.integers(0, 10**6), st.integers(0, 10**6)),
    st.tuples(st.just("reattach"), st.integers(0, 10**6), st.integers(0, 10**6)),
    st.tuples(st.just("milestone")),
)


def build(mode, script, seed):
    t = Tangle(TREASURY.address, SUPPLY, difficulty=0, mode=mode, k=3,
               coordinator=COORD if mode is Mode.COORDINATOR else None, coordinator_address=COORD.address)
    rng = random.Random(seed)
    raw = []
    for n, step in enumerate(script):
        if len(t) >= 48:  # a bundle adds up to two transactions
            break
        kind = step[0]
        if kind == "data":
            t.attach_data(ADDRS[step[1]].address, n, b"d%d" % n, rng)
        elif kind == "pay" and step[1] != step[2]:
            src, dst = ADDRS[step[1]], ADDRS[step[2]]
            try:
                t.attach_bundle(transfer(n, {src.address: -step[3], dst.address: step[3]}, tag=b"p%d" % n)
                                .sign_with(src), rng)
            except M2MError:
                pass
        elif kind == "raw" and step[1] != step[2]:
            # a double-spend hung off arbitrary parents, bypassing the balance checks
            src, dst = ADDRS[step[1]], ADDRS[step[2]]
            b = transfer(n, {src.address: -step[3], dst.address: step[3]}, tag=b"r%d" % n).sign_with(src)
            ids = [tx.id for tx in t.txs]
            parents = [(ids[step[4] % len(ids)], ids[(step[5] + i) % len(ids)]) for i in range(len(b.entries))]
            t.attach_raw(b, parents)
            raw.append(b)
        elif kind == "reattach" and raw:
            b = raw[step[1] % len(raw)]
            ids = [tx.id for tx in t.txs]
            t.attach_raw(b, [(ids[step[2] % len(ids)], ids[-1])] * len(b.entries))
        elif kind == "milestone" and mode is Mode.COORDINATOR:
            t.issue_milestone(tick=n)
    return t


def check(t):
    nodes = nodes_of(t)
    v = tangle_oracle(nodes, t.slots, mode=t.mode.value, k=t.k, milestones=[m.tx_id for m in t.milestones])
    assert not overspends({n.id: n for n in nodes}, v.confirmed, t.slots)
    for tx in t.txs:
        assert t.confirmation_status(tx.id).value == v.status[tx.id], tx.id.hex()
    for bid in t.bundle_members:
        assert t.bundle_status(bid).value == v.bundle_status[bid], bid.hex()
    assert t.balances() == v.balances
    assert sum(v.balances.values()) == t.confirmed_total() == SUPPLY


# a raw spend of a credit that sits outside its own cone: the milestone must not reference it
OUT_OF_CONE_SPEND = [("data", 0)] * 14 + [("milestone",)] + [("data", 0)] * 3 + [
    ("raw", 0, 1, 1, 0, 0), ("raw", 1, 0, 1, 2, 0), ("milestone",)]


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(script=st.lists(op, min_size=10, max_size=90), seed=st.integers(0, 2**16))
@example(script=OUT_OF_CONE_SPEND, seed=0)
def test_coordinator_matches_oracle(script, seed):
    check(build(Mode.COORDINATOR, script, seed))


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(script=st.lists(op, min_size=10, max_size=90), seed=st.integers(0, 2**16))
def test_coordinator_free_matches_oracle(script, seed):
    check(build(Mode.COORDINATOR_FREE, script, seed))
