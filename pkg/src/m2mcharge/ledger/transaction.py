"""Transactions, bundles and proof-of-work."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace

from .. import wallet
from ..errors import InvalidBundle, SearchExhausted

ZERO_ID = bytes(32)
MAX_DIFFICULTY = 24
NONCE_SPACE = 2**64


def leading_zero_bits(digest: bytes) -> int:
    n = int.from_bytes(digest, "big")
    return len(digest) * 8 - n.bit_length()


@dataclass(frozen=True)
class Transaction:
    """One vertex of the tangle.

    ``approves`` is ``None`` only for genesis. ``id`` is SHA-256 over every
    other field, nonce last so proof-of-work can reuse the prefix state.
    """

    approves: tuple[bytes, bytes] | None
    address: bytes
    value: int
    timestamp: int
    bundle_id: bytes
    signature_fragment: bytes = b""
    attach_order: int = 0
    nonce: int = 0
    id: bytes = field(default=ZERO_ID, compare=False)

    def prefix(self) -> bytes:
        trunk, branch = self.approves if self.approves is not None else (ZERO_ID, ZERO_ID)
        return b"".join((
            b"\x01" if self.approves is not None else b"\x00",
            trunk,
            branch,
            self.address,
            struct.pack(">qQ", self.value, self.timestamp),
            self.bundle_id,
            struct.pack(">I", len(self.signature_fragment)),
            self.signature_fragment,
            struct.pack(">Q", self.attach_order),
        ))

    def compute_id(self) -> bytes:
        return hashlib.sha256(self.prefix() + struct.pack(">Q", self.nonce)).digest()

    def sealed(self, nonce: int) -> Transaction:
        tx = replace(self, nonce=nonce)
        return replace(tx, id=tx.compute_id())

    @property
    def is_genesis(self) -> bool:
        return self.approves is None

    @property
    def parents(self) -> tuple[bytes, ...]:
        return () if self.approves is None else self.approves

    def to_json(self) -> dict:
        return {
            "id": self.id.hex(),
            "approves": None if self.approves is None else [p.hex() for p in self.approves],
            "address": self.address.hex(),
            "value": self.value,
            "timestamp": self.timestamp,
            "bundle_id": self.bundle_id.hex(),
            "signature_fragment": self.signature_fragment.hex(),
            "nonce": self.nonce,
            "attach_order": self.attach_order,
        }

    @classmethod
    def from_json(cls, obj: dict) -> Transaction:
        approves = obj["approves"]
        return cls(
            approves=None if approves is None else (bytes.fromhex(approves[0]), bytes.fromhex(approves[1])),
            address=bytes.fromhex(obj["address"]),
            value=int(obj["value"]),
            timestamp=int(obj["timestamp"]),
            bundle_id=bytes.fromhex(obj["bundle_id"]),
            signature_fragment=bytes.fromhex(obj["signature_fragment"]),
            nonce=int(obj["nonce"]),
            attach_order=int(obj["attach_order"]),
            id=bytes.fromhex(obj["id"]),
        )


def do_pow(tx: Transaction, difficulty: int) -> int:
    """Smallest nonce giving ``tx`` an id with ``difficulty`` leading zero bits."""
    if not 0 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in [0, {MAX_DIFFICULTY}]")
    base = hashlib.sha256(tx.prefix())
    limit = 1 << (256 - difficulty)
    pack = struct.Struct(">Q").pack
    for nonce in range(NONCE_SPACE):
        h = base.copy()
        h.update(pack(nonce))
        if int.from_bytes(h.digest(), "big") < limit:
            return nonce
    raise SearchExhausted("nonce space exhausted")  # pragma: no cover


@dataclass(frozen=True)
class Entry:
    address: bytes
    value: int


@dataclass
class Bundle:
    """Atomic zero-sum transfer. ``signatures`` maps input address -> fragment."""

    entries: tuple[Entry, ...]
    tick: int
    tag: bytes = b""
    signatures: dict[bytes, bytes] = field(default_factory=dict)

    def __post_init__(self):
        self.entries = tuple(self.entries)
        if not self.entries:
            raise InvalidBundle("bundle must contain at least one transaction")
        addrs = [e.address for e in self.entries]
        if len(set(addrs)) != len(addrs):
            raise InvalidBundle("bundle addresses must be unique")
        if sum(e.value for e in self.entries) != 0:
            raise InvalidBundle("bundle values must sum to zero")
        if self.tick < 0:
            raise InvalidBundle("negative tick")

    @property
    def bundle_id(self) -> bytes:
        h = hashlib.sha256(b"m2m-bundle")
        h.update(struct.pack(">QI", self.tick, len(self.tag)))
        h.update(self.tag)
        for e in self.entries:
            h.update(e.address + struct.pack(">q", e.value))
        return h.digest()

    @property
    def inputs(self) -> list[Entry]:
        return [e for e in self.entries if e.value < 0]

    def sign_input(self, address: bytes, fragment: bytes) -> Bundle:
        self.signatures[address] = fragment
        return self

    def sign_with(self, keypair: wallet.KeyPair) -> Bundle:
        return self.sign_input(keypair.address, wallet.single_fragment(keypair, self.bundle_id))

    def sign_multisig(self, ka: wallet.KeyPair, kb: wallet.KeyPair, index: int = 0) -> Bundle:
        ms = wallet.make_multisig(ka.public, kb.public, index)
        return self.sign_input(ms.address, wallet.multisig_fragment(ka, kb, self.bundle_id, index))

    def check_signatures(self) -> list[bytes]:
        """Input addresses whose signature is missing or invalid."""
        bid = self.bundle_id
        return [e.address for e in self.inputs
                if not wallet.verify_fragment(e.address, self.signatures.get(e.address, b""), bid)]

    def unsigned_transactions(self) -> list[Transaction]:
        bid = self.bundle_id
        return [Transaction(approves=None, address=e.address, value=e.value, timestamp=self.tick,
                            bundle_id=bid, signature_fragment=self.signatures.get(e.address, b""))
                for e in self.entries]


def transfer(tick: int, moves: dict[bytes, int], tag: bytes = b"") -> Bundle:
    """Build a bundle from an address -> signed-value mapping, keeping order."""
    return Bundle(entries=tuple(Entry(a, v) for a, v in moves.items()), tick=tick, tag=tag)


def data_bundle(tick: int, address: bytes, message: bytes = b"") -> Bundle:
    return Bundle(entries=(Entry(address, 0),), tick=tick, tag=message)
