"""The tangle: a DAG ledger where every transaction approves two earlier ones.

Ledger semantics, all defined over sets of transactions:

* ``cone(t)`` is ``t`` plus everything it approves transitively.
* A bundle's effect inside a set ``T``: each input debits its address as soon
  as that input is in ``T``; outputs credit only once every slot of the
  bundle is in ``T`` (conservative view). Settled balances count complete
  bundles only.
* ``T`` is consistent iff no address ends with debits above credits.
* The accepted set is built first-seen: a transaction is accepted iff its
  parents and its earlier bundle siblings are accepted and adding it keeps
  the accepted set consistent.
  Honest tip selection and the coordinator draw only from accepted
  transactions.
* The confirmed set ``S`` is the cone of the latest milestone (coordinator
  mode) or, coordinator-free, the transactions referenced by at least ``k``
  others, admitted greedily by descending weight while consistent.
* ``conflicting`` means ``S`` plus the cones of the transaction and its bundle
  siblings is inconsistent.

Cones are stored as Python ints used as bitsets indexed by attach order.
"""

from __future__ import annotations

import enum
import random
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator

from .. import wallet
from ..errors import (
    Conflict,
    InsufficientBalance,
    InvalidBundle,
    InvalidSignature,
    SnapshotError,
    UnknownTransaction,
    WrongMode,
)
from .transaction import ZERO_ID, Bundle, Transaction, data_bundle, do_pow, leading_zero_bits

DEFAULT_DIFFICULTY = 8
DEFAULT_K = 5


class Mode(str, enum.Enum):
    COORDINATOR = "coordinator"
    COORDINATOR_FREE = "coordinator-free"


class Status(str, enum.Enum):
    PENDING = "pending"
    CONFIRMED = "confirmed"
    CONFLICTING = "conflicting"


@dataclass(frozen=True)
class Violation:
    kind: str  # hash | pow | parent | cycle | bundle | signature | conflict
    detail: str = ""


@dataclass(frozen=True)
class Milestone:
    tx_id: bytes
    index: int
    issuer: bytes


def iter_bits(bits: int) -> Iterator[int]:
    while bits:
        low = bits & -bits
        yield low.bit_length() - 1
        bits ^= low


class Effects:
    """Incremental per-address ledger effects of a growing transaction set."""

    __slots__ = ("_slots", "present", "debit", "credit", "settled", "negative")

    def __init__(self, slots: dict[bytes, dict[bytes, int]]):
        self._slots = slots
        self.present: dict[bytes, set[bytes]] = {}
        self.debit: dict[bytes, int] = defaultdict(int)
        self.credit: dict[bytes, int] = defaultdict(int)
        self.settled: dict[bytes, int] = defaultdict(int)
        self.negative: set[bytes] = set()

    def _check(self, addr: bytes) -> None:
        if self.credit[addr] < self.debit[addr]:
            self.negative.add(addr)
        else:
            self.negative.discard(addr)

    def add(self, tx: Transaction) -> None:
        slots = self._slots[tx.bundle_id]
        pres = self.present.setdefault(tx.bundle_id, set())
        if tx.address in pres:
            return
        pres.add(tx.address)
        if tx.value < 0:
            self.debit[tx.address] -= tx.value
            self._check(tx.address)
        if len(pres) == len(slots):
            for addr, v in slots.items():
                self.settled[addr] += v
                if v > 0:
                    self.credit[addr] += v
                    self._check(addr)

    @property
    def consistent(self) -> bool:
        return not self.negative

    def consistent_with(self, txs: Iterable[Transaction]) -> bool:
        """Would the set plus ``txs`` be consistent? Does not mutate."""
        added: dict[bytes, set[bytes]] = {}
        dd: dict[bytes, int] = defaultdict(int)
        dc: dict[bytes, int] = defaultdict(int)
        for tx in txs:
            base = self.present.get(tx.bundle_id, ())
            extra = added.setdefault(tx.bundle_id, set())
            if tx.address in base or tx.address in extra:
                continue
            extra.add(tx.address)
            if tx.value < 0:
                dd[tx.address] -= tx.value
            slots = self._slots[tx.bundle_id]
            if len(base) + len(extra) == len(slots):
                for addr, v in slots.items():
                    if v > 0:
                        dc[addr] += v
        for addr in self.negative | dd.keys():
            if self.credit.get(addr, 0) + dc.get(addr, 0) < self.debit.get(addr, 0) + dd.get(addr, 0):
                return False
        return True


class Tangle:
    """Single authoritative tangle instance for one simulation."""

    def __init__(self, genesis_address: bytes, supply: int, *, difficulty: int = DEFAULT_DIFFICULTY,
                 mode: Mode | str = Mode.COORDINATOR, k: int = DEFAULT_K,
                 coordinator: wallet.KeyPair | None = None, coordinator_address: bytes | None = None,
                 _genesis: Transaction | None = None):
        if not 0 < supply < 2**63:
            raise ValueError("supply must fit a signed 64-bit value")
        self.difficulty = difficulty
        self.mode = Mode(mode)
        self.k = k
        self.supply = supply
        self.coordinator = coordinator
        self.coordinator_address = coordinator.address if coordinator else coordinator_address
        self.txs: list[Transaction] = []
        self.index: dict[bytes, int] = {}
        self.approvers: list[list[int]] = []
        self.cones: list[int] = []
        self._tips: dict[int, None] = {}
        self.slots: dict[bytes, dict[bytes, int]] = {}
        self.bundle_members: dict[bytes, list[int]] = defaultdict(list)
        self.accepted: list[bool] = []
        self._accepted_fx = Effects(self.slots)
        self.milestones: list[Milestone] = []
        self._conf_bits = 0
        self._conf_fx = Effects(self.slots)
        self._free_cache: tuple[int, int, Effects] | None = None
        # txs of bundles that move value; all-zero bundles never affect balances
        self._valued = 0

        if _genesis is None:
            g = Transaction(approves=None, address=genesis_address, value=supply, timestamp=0,
                            bundle_id=ZERO_ID, attach_order=0)
            _genesis = g.sealed(do_pow(g, difficulty))
        self.slots[_genesis.bundle_id] = {_genesis.address: _genesis.value}
        self._insert(_genesis)
        self._conf_bits = 1
        self._conf_fx.add(_genesis)

    # -- structure ---------------------------------------------------------

    @property
    def genesis(self) -> Transaction:
        return self.txs[0]

    def __len__(self) -> int:
        return len(self.txs)

    def __contains__(self, tx_id: bytes) -> bool:
        return tx_id in self.index

    def get(self, tx_id: bytes) -> Transaction:
        try:
            return self.txs[self.index[tx_id]]
        except KeyError:
            raise UnknownTransaction(tx_id.hex()) from None

    @property
    def tips(self) -> list[bytes]:
        return [self.txs[i].id for i in self._tips]

    @property
    def latest_milestone(self) -> Milestone | None:
        return self.milestones[-1] if self.milestones else None

    def past_cone(self, tx_id: bytes) -> set[bytes]:
        return {self.txs[i].id for i in iter_bits(self.cones[self.index[tx_id]])}

    def _insert(self, tx: Transaction) -> int:
        i = len(self.txs)
        assert tx.attach_order == i
        cone = 1 << i
        for p in dict.fromkeys(tx.parents):
            j = self.index[p]
            cone |= self.cones[j]
            self.approvers[j].append(i)
            self._tips.pop(j, None)
        self.txs.append(tx)
        self.index[tx.id] = i
        self.approvers.append([])
        self.cones.append(cone)
        self._tips[i] = None
        if any(self.slots[tx.bundle_id].values()):
            self._valued |= 1 << i
        siblings = self.bundle_members[tx.bundle_id]
        # a bundle is accepted whole or not at all: one rejected slot taints the rest
        ok = all(self.accepted[self.index[p]] for p in tx.parents) \
            and all(self.accepted[j] for j in siblings) and self._accepted_fx.consistent_with([tx])
        siblings.append(i)
        self.accepted.append(ok)
        if ok:
            self._accepted_fx.add(tx)
        self._free_cache = None
        return i

    # -- tip selection & attachment ---------------------------------------

    def _tip_pool(self) -> list[int]:
        pool = [i for i in sorted(self._tips) if self.accepted[i]]
        if not pool:
            # every tip is a rejected branch: fall back to the accepted frontier
            pool = [i for i in range(len(self.txs)) if self.accepted[i]
                    and not any(self.accepted[c] for c in self.approvers[i])]
        return pool

    def select_tips(self, rng: random.Random) -> tuple[bytes, bytes]:
        """Two tips drawn uniformly (with replacement) from the accepted tips."""
        pool = self._tip_pool()
        a = pool[rng.randrange(len(pool))]
        b = pool[rng.randrange(len(pool))]
        return self.txs[a].id, self.txs[b].id

    def _reference(self) -> int:
        """A transaction whose cone carries the confirmed funds."""
        if self.mode is Mode.COORDINATOR:
            ms = self.latest_milestone
            return self.index[ms.tx_id] if ms else 0
        pool = self._tip_pool()
        return min(pool, key=lambda i: (-self.cones[i].bit_count(), self.txs[i].id))

    def _seal(self, tx: Transaction, trunk: bytes, branch: bytes) -> Transaction:
        tx = Transaction(approves=(trunk, branch), address=tx.address, value=tx.value,
                         timestamp=tx.timestamp, bundle_id=tx.bundle_id,
                         signature_fragment=tx.signature_fragment, attach_order=len(self.txs))
        return tx.sealed(do_pow(tx, self.difficulty))

    def _cone_txs(self, bits: int) -> list[Transaction]:
        """The value-moving transactions among ``bits`` (the only ones balance checks need)."""
        return [self.txs[i] for i in iter_bits(bits & self._valued)]

    def _cone_consistent(self, parents: Iterable[int], tx: Transaction) -> bool:
        bits = 0
        for p in parents:
            bits |= self.cones[p]
        fx = Effects(self.slots)
        return fx.consistent_with(self._cone_txs(bits) + [tx])

    def spendable(self, address: bytes) -> int:
        """Confirmed credits minus every accepted (pending or confirmed) debit."""
        conf = self._confirmed_effects()
        return conf.credit.get(address, 0) - self._accepted_fx.debit.get(address, 0)

    def _register(self, bundle: Bundle) -> bytes:
        bid = bundle.bundle_id
        slots = {e.address: e.value for e in bundle.entries}
        known = self.slots.get(bid)
        if known is not None and known != slots:
            raise InvalidBundle("bundle id reused with different slots")
        self.slots[bid] = slots
        return bid

    def attach_bundle(self, bundle: Bundle, rng: random.Random) -> list[bytes]:
        """Honest attachment with balance, signature and replay checks."""
        bad = bundle.check_signatures()
        if bad:
            raise InvalidSignature(f"invalid or missing signature for {bad[0].hex()[:12]}..")
        bid = bundle.bundle_id
        if bid in self.slots:
            raise Conflict("bundle already attached (inputs spent)")
        for e in bundle.inputs:
            have = self.spendable(e.address)
            if have < -e.value:
                raise InsufficientBalance(e.address.hex(), -e.value, max(have, 0))
        unsigned = bundle.unsigned_transactions()
        ref = 0
        self._register(bundle)
        if bundle.inputs:
            ref = self._reference()
            if not Effects(self.slots).consistent_with(self._cone_txs(self.cones[ref]) + unsigned):
                del self.slots[bid]
                first = bundle.inputs[0]
                raise InsufficientBalance(first.address.hex(), -first.value, 0)
        ids = []
        for utx in unsigned:
            trunk, branch = self.select_tips(rng)
            if utx.value < 0:
                ti, bi = self.index[trunk], self.index[branch]
                if not self._cone_consistent((ti, bi), utx):
                    trunk = self.txs[ref].id
                    if not self._cone_consistent((ref, bi), utx):
                        branch = trunk
            tx = self._seal(utx, trunk, branch)
            self._insert(tx)
            ids.append(tx.id)
        return ids

    def attach_raw(self, bundle: Bundle, parents: Iterable[tuple[bytes, bytes]]) -> list[bytes]:
        """Attach with caller-chosen parents and no balance or conflict check.

        Proof-of-work, signatures and structure are still enforced: this is what a
        misbehaving but protocol-conformant node can do.
        """
        bad = bundle.check_signatures()
        if bad:
            raise InvalidSignature(f"invalid or missing signature for {bad[0].hex()[:12]}..")
        self._register(bundle)
        ids = []
        for utx, (trunk, branch) in zip(bundle.unsigned_transactions(), parents):
            if trunk not in self.index or branch not in self.index:
                raise UnknownTransaction("parent not in tangle")
            tx = self._seal(utx, trunk, branch)
            self._insert(tx)
            ids.append(tx.id)
        return ids

    def attach_data(self, address: bytes, tick: int, message: bytes, rng: random.Random) -> bytes:
        return self.attach_bundle(data_bundle(tick, address, message), rng)[0]

    # -- validation --------------------------------------------------------

    def validate_transaction(self, tx: Transaction, *, check_conflict: bool = True) -> Violation | None:
        """``None`` when ``tx`` is valid, otherwise the first violation found.

        ``check_conflict=False`` skips the past-cone balance check, the only
        part whose cost grows with the size of the cone.
        """
        if tx.is_genesis:
            if tx.id == self.genesis.id and tx == self.genesis:
                return None
            return Violation("parent", "parentless transaction other than genesis")
        if tx.compute_id() != tx.id:
            return Violation("hash", "id does not match encoding")
        if leading_zero_bits(tx.id) < self.difficulty:
            return Violation("pow", f"fewer than {self.difficulty} leading zero bits")
        bits = 0
        for p in tx.parents:
            j = self.index.get(p)
            if j is None:
                return Violation("parent", f"unknown parent {p.hex()[:12]}..")
            if j >= tx.attach_order:
                return Violation("cycle", "parent not attached strictly earlier")
            bits |= self.cones[j]
        slots = self.slots.get(tx.bundle_id)
        if slots is None or slots.get(tx.address) != tx.value:
            return Violation("bundle", "transaction does not match its bundle")
        if tx.value < 0 and not wallet.verify_fragment(tx.address, tx.signature_fragment, tx.bundle_id):
            return Violation("signature", "input not authorised")
        if check_conflict and not Effects(self.slots).consistent_with(self._cone_txs(bits) + [tx]):
            return Violation("conflict", "past cone overspends an address")
        return None

    # -- milestones & confirmation ----------------------------------------

    def issue_milestone(self, coordinator: wallet.KeyPair | None = None, tick: int | None = None) -> Milestone:
        if self.mode is not Mode.COORDINATOR:
            raise WrongMode("milestones exist only in coordinator mode")
        coordinator = coordinator or self.coordinator
        if coordinator is None:
            raise WrongMode("no coordinator key")
        if self.coordinator_address is None:
            self.coordinator_address = coordinator.address
        prev = self.latest_milestone
        prev_i = self.index[prev.tx_id] if prev else 0
        # D5 among tips whose cone keeps the confirmed set consistent: an
        # overspending cone is never honest, so it is never referenced
        conf = self._conf_bits

        def safe(bits: int) -> bool:
            return self._conf_fx.consistent_with(self._cone_txs(bits & ~conf))

        eligible = sorted((i for i in self._tips if self.accepted[i]),
                          key=lambda i: (-self.cones[i].bit_count(), self.txs[i].id))
        a = next((i for i in eligible if safe(self.cones[i])), prev_i)
        b = next((j for j in eligible if j != a and safe(self.cones[a] | self.cones[j])), a)
        covered = self.cones[a] | self.cones[b]
        if not (covered >> prev_i) & 1:
            b = next((j for j in eligible if (self.cones[j] >> prev_i) & 1 and safe(self.cones[a] | self.cones[j])),
                     prev_i)
        index = len(self.milestones) + 1
        tick = self.txs[-1].timestamp if tick is None else tick
        bundle = data_bundle(tick, coordinator.address, b"milestone:%d" % index)
        bundle.sign_input(coordinator.address, wallet.single_fragment(coordinator, bundle.bundle_id))
        self._register(bundle)
        utx = bundle.unsigned_transactions()[0]
        tx = self._seal(utx, self.txs[a].id, self.txs[b].id)
        i = self._insert(tx)
        ms = Milestone(tx_id=tx.id, index=index, issuer=coordinator.address)
        self.milestones.append(ms)
        self._advance_confirmed(i)
        return ms

    def _advance_confirmed(self, ms_index: int) -> None:
        new = self.cones[ms_index] & ~self._conf_bits
        for tx in self._cone_txs(new):
            self._conf_fx.add(tx)
        self._conf_bits |= new

    def weights(self) -> list[int]:
        """Number of transactions approving each transaction, directly or not."""
        n = len(self.txs)
        fut = [0] * n
        for i in range(n - 1, -1, -1):
            acc = 0
            for c in self.approvers[i]:
                acc |= fut[c] | (1 << c)
            fut[i] = acc
        return [f.bit_count() for f in fut]

    def _free_confirmed(self) -> tuple[int, Effects]:
        if self._free_cache is not None and self._free_cache[0] == len(self.txs):
            return self._free_cache[1], self._free_cache[2]
        w = self.weights()
        order = sorted((i for i in range(1, len(self.txs)) if w[i] >= self.k), key=lambda i: (-w[i], i))
        bits = 1
        fx = Effects(self.slots)
        fx.add(self.genesis)
        for i in order:
            new = self.cones[i] & ~bits
            if not new:
                continue
            txs = self._cone_txs(new)
            if fx.consistent_with(txs):
                for tx in txs:
                    fx.add(tx)
                bits |= new
        self._free_cache = (len(self.txs), bits, fx)
        return bits, fx

    def _confirmed_bits(self) -> int:
        if self.mode is Mode.COORDINATOR:
            return self._conf_bits
        return self._free_confirmed()[0]

    def _confirmed_effects(self) -> Effects:
        if self.mode is Mode.COORDINATOR:
            return self._conf_fx
        return self._free_confirmed()[1]

    def _bundle_reach_status(self, bundle_id: bytes, bits: int) -> Status:
        # every unconfirmed slot of a bundle shares one reach: the union of the members' cones
        reach = 0
        for j in self.bundle_members[bundle_id]:
            reach |= self.cones[j]
        if not self._confirmed_effects().consistent_with(self._cone_txs(reach & ~bits)):
            return Status.CONFLICTING
        return Status.PENDING

    def confirmation_status(self, tx_id: bytes) -> Status:
        i = self.index.get(tx_id)
        if i is None:
            raise UnknownTransaction(tx_id.hex())
        bits = self._confirmed_bits()
        if (bits >> i) & 1:
            return Status.CONFIRMED
        return self._bundle_reach_status(self.txs[i].bundle_id, bits)

    def bundle_status(self, bundle_id: bytes) -> Status:
        """Confirmed once every slot of the bundle sits in the confirmed set."""
        members = self.bundle_members.get(bundle_id)
        if not members:
            raise UnknownTransaction(bundle_id.hex())
        bits = self._confirmed_bits()
        got = {self.txs[i].address for i in members if (bits >> i) & 1}
        if len(got) == len(self.slots[bundle_id]):
            return Status.CONFIRMED
        return self._bundle_reach_status(bundle_id, bits)

    def is_confirmed(self, tx_id: bytes) -> bool:
        i = self.index.get(tx_id)
        if i is None:
            raise UnknownTransaction(tx_id.hex())
        return bool((self._confirmed_bits() >> i) & 1)

    def balance(self, address: bytes) -> int:
        return self._confirmed_effects().settled.get(address, 0)

    def balances(self) -> dict[bytes, int]:
        return {a: v for a, v in self._confirmed_effects().settled.items() if v}

    def confirmed_total(self) -> int:
        return sum(self._confirmed_effects().settled.values())

    def confirmed_count(self) -> int:
        return self._confirmed_bits().bit_count()

    # -- snapshot ----------------------------------------------------------

    def to_jsonl(self) -> Iterator[dict]:
        for tx in self.txs:
            yield tx.to_json()

    @classmethod
    def from_transactions(cls, txs: list[Transaction], *, difficulty: int, mode: Mode | str = Mode.COORDINATOR,
                          k: int = DEFAULT_K, coordinator_address: bytes | None = None) -> Tangle:
        """Rebuild a tangle, rejecting input that breaks a transaction invariant."""
        if not txs:
            raise SnapshotError("empty snapshot")
        g = txs[0]
        if not g.is_genesis or g.attach_order != 0:
            raise SnapshotError("first transaction must be genesis")
        for n, tx in enumerate(txs):
            if tx.attach_order != n:
                raise SnapshotError(f"line {n + 1}: attach_order {tx.attach_order} out of sequence")
            if tx.compute_id() != tx.id:
                raise SnapshotError(f"line {n + 1}: id does not match encoding")
            if leading_zero_bits(tx.id) < difficulty:
                raise SnapshotError(f"line {n + 1}: insufficient proof-of-work")
            if n and tx.is_genesis:
                raise SnapshotError(f"line {n + 1}: second parentless transaction")
        slots: dict[bytes, dict[bytes, int]] = {}
        for tx in txs[1:]:
            s = slots.setdefault(tx.bundle_id, {})
            if s.setdefault(tx.address, tx.value) != tx.value:
                raise SnapshotError(f"bundle {tx.bundle_id.hex()[:12]}.. has inconsistent slots")
        for bid, s in slots.items():
            if sum(s.values()) != 0:
                raise SnapshotError(f"bundle {bid.hex()[:12]}.. does not sum to zero")
        t = cls(g.address, g.value, difficulty=difficulty, mode=mode, k=k,
                coordinator_address=coordinator_address, _genesis=g)
        t.slots.update(slots)
        for n, tx in enumerate(txs[1:], start=1):
            for p in tx.parents:
                j = t.index.get(p)
                if j is None:
                    raise SnapshotError(f"line {n + 1}: unknown parent")
            i = t._insert(tx)
            if (t.mode is Mode.COORDINATOR and coordinator_address is not None
                    and tx.address == coordinator_address and tx.value == 0):
                t.milestones.append(Milestone(tx.id, len(t.milestones) + 1, coordinator_address))
                t._advance_confirmed(i)
        return t
