"""Keys, addresses, signatures and 2-of-2 escrow addresses.

The signature scheme is simulation grade: a signature is HMAC-SHA256 of the
message under the secret key. Verification needs the secret, so derived
key pairs are recorded in a process-wide registry keyed by public key; the
registry plays the role a real asymmetric verify() would. Callers only ever
use :func:`sign` / :func:`verify`, so an Ed25519 backend can replace this
module without touching them.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass

from .errors import IdenticalMembers

SIG_LEN = 32
KEY_LEN = 32

_SECRETS: dict[bytes, bytes] = {}


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def address_of(public: bytes) -> bytes:
    """Address is the SHA-256 of the public key."""
    return sha256(public)


@dataclass(frozen=True)
class KeyPair:
    seed: int
    secret: bytes
    public: bytes
    address: bytes

    @property
    def address_hex(self) -> str:
        return self.address.hex()

    def __repr__(self) -> str:
        return f"KeyPair(seed={self.seed}, address={self.address.hex()[:12]}..)"


@dataclass(frozen=True)
class MultisigAddress:
    address: bytes
    members: tuple[bytes, bytes]
    index: int = 0

    @property
    def address_hex(self) -> str:
        return self.address.hex()


def derive(seed: int) -> KeyPair:
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    secret = sha256(b"m2m-secret" + seed.to_bytes(8, "big"))
    public = sha256(b"m2m-public" + secret)
    _SECRETS[public] = secret
    return KeyPair(seed=seed, secret=secret, public=public, address=address_of(public))


def sign(keypair: KeyPair, message: bytes) -> bytes:
    return hmac.new(keypair.secret, message, hashlib.sha256).digest()


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    secret = _SECRETS.get(public)
    if secret is None or len(signature) != SIG_LEN:
        return False
    expected = hmac.new(secret, message, hashlib.sha256).digest()
    return hmac.compare_digest(expected, signature)


def make_multisig(pub_a: bytes, pub_b: bytes, index: int = 0) -> MultisigAddress:
    """2-of-2 address; ``index`` lets one pair hold many single-use escrows."""
    if pub_a == pub_b:
        raise IdenticalMembers("multisig members must differ")
    if not 0 <= index < 2**64:
        raise ValueError("multisig index must fit 64 bits")
    lo, hi = sorted((pub_a, pub_b))
    return MultisigAddress(address=sha256(b"m2m-multisig" + lo + hi + index.to_bytes(8, "big")),
                           members=(lo, hi), index=index)


# Signature fragments carried by ledger inputs: pub||sig for a plain address,
# pub_lo||sig_lo||pub_hi||sig_hi||index for a 2-of-2 escrow.

def single_fragment(keypair: KeyPair, message: bytes) -> bytes:
    return keypair.public + sign(keypair, message)


def multisig_fragment(ka: KeyPair, kb: KeyPair, message: bytes, index: int = 0) -> bytes:
    parts = sorted((ka, kb), key=lambda k: k.public)
    return b"".join(k.public + sign(k, message) for k in parts) + index.to_bytes(8, "big")


def partial_multisig_fragment(signer: KeyPair, other_public: bytes, message: bytes, index: int = 0) -> bytes:
    """Fragment carrying one real signature and a zeroed slot for the co-signer."""
    slots = sorted([(signer.public, sign(signer, message)), (other_public, bytes(SIG_LEN))])
    return b"".join(p + s for p, s in slots) + index.to_bytes(8, "big")


def verify_fragment(address: bytes, fragment: bytes, message: bytes) -> bool:
    """True iff ``fragment`` authorises spending from ``address``."""
    unit = KEY_LEN + SIG_LEN
    if len(fragment) == unit:
        pub, sig = fragment[:KEY_LEN], fragment[KEY_LEN:]
        return address_of(pub) == address and verify(pub, message, sig)
    if len(fragment) == 2 * unit + 8:
        pa, sa = fragment[:KEY_LEN], fragment[KEY_LEN:unit]
        pb, sb = fragment[unit:unit + KEY_LEN], fragment[unit + KEY_LEN:2 * unit]
        index = int.from_bytes(fragment[2 * unit:], "big")
        if pa == pb:
            return False
        try:
            ms = make_multisig(pa, pb, index)
        except IdenticalMembers:
            return False
        return ms.address == address and verify(pa, message, sa) and verify(pb, message, sb)
    return False
