"""Two-layer permissioned ledger simulator for meter-data and firmware integrity."""

__version__ = "0.1.0"
