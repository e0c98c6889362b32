"""DAG ledger: transactions, bundles, tip selection, proof-of-work, confirmation."""

from .tangle import DEFAULT_DIFFICULTY, DEFAULT_K, Effects, Milestone, Mode, Status, Tangle, Violation, iter_bits
from .transaction import (
    MAX_DIFFICULTY,
    ZERO_ID,
    Bundle,
    Entry,
    Transaction,
    data_bundle,
    do_pow,
    leading_zero_bits,
    transfer,
)

__all__ = [
    "DEFAULT_DIFFICULTY", "DEFAULT_K", "MAX_DIFFICULTY", "ZERO_ID",
    "Bundle", "Effects", "Entry", "Milestone", "Mode", "Status", "Tangle", "Transaction", "Violation",
    "data_bundle", "do_pow", "iter_bits", "leading_zero_bits", "transfer",
]
