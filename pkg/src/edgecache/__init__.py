"""Discrete-time edge-caching simulator with learned and classical policies.

The package simulates a single edge server and a set of user devices whose
content demand follows hidden, Markov-modulated Zipf popularity.  On top of
the simulator it provides:

* federated training of per-device popularity predictors (parameter-only
  exchange, request batches erased at the server every slot),
* a DDPG actor/critic agent trained at the server and broadcast to devices,
* LRU / LFU / FIFO / random replacement baselines,
* a seeded, fully reproducible experiment harness with capacity and
  window-length sweeps.
"""

__version__ = "0.1.0"

from .cache import CacheAction, CacheState, apply_action, hit_rate_server, hit_rate_ue
from .environment import Catalog, EdgeEnvironment, MecServer, zipf_pmf
from .harness import ExperimentConfig, run_experiment, sweep

__all__ = [
    "CacheAction",
    "CacheState",
    "Catalog",
    "EdgeEnvironment",
    "ExperimentConfig",
    "MecServer",
    "apply_action",
    "hit_rate_server",
    "hit_rate_ue",
    "run_experiment",
    "sweep",
    "zipf_pmf",
]
