"""Machine-to-machine EV charging settlement over a DAG ledger and payment channels."""

__version__ = "0.1.0"
