"""Simulations and instrumented benchmarks.

``psi``        operation counts of MS-PSI against the two baselines
``messaging``  cover-traffic latency, bandwidth model, unobservability runs
``e2e``        a full deployment of journalist nodes on a virtual clock
"""
from .ledger import CostLedger
