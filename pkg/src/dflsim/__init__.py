"""Desk-scale simulator for decentralized personalized federated learning.

Modules:
    nn              pure-numpy two-part networks, gradients, momentum SGD
    representation  unit-input class profiles and divergence measures
    datagen         Gaussian mixture data plus Dirichlet/shard partitions
    protocol        the round engine, baselines, and communication ledger
    convergence     quadratic testbed for the descent bound
    harness         config files, the arm x seed matrix, metric sinks
    cli             the ``dflsim`` command
"""
from .errors import ConfigError

__all__ = ["ConfigError"]
__version__ = "0.1.0"
