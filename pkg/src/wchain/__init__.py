"""Parallel-chain weak consensus: engines, simulator, oracle and harness.

Each node appends client messages to its own chain and cross-references
its peers' latest states. Nodes agree on the relative order of states that
originate from the same chain, not on a global total order.
"""

from .codec import canonical_decode, canonical_encode, hash_bytes, keygen, sign, verify
from .config import ByzantineMode, ScenarioConfig, TargetPolicy, parse_config, parse_text
from .consensus import Engine, EngineConfig, QuorumTracker, Send, quorum_threshold
from .harness import compute_metrics, replay, run_many, run_scenario
from .ledger import ClientMessage, Coordinate, Ledger, Order, Reference, State, StateStatus
from .merkle import build_tree, prove, verify_proof
from .oracle import check_all, check_liveness, check_origin_sequence, check_relative_persistence
from .simnet import apply_adversary, inject_clients, run

__version__ = "0.1.0"
