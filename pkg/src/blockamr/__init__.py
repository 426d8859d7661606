"""Dynamic repartitioning for block-structured AMR on a simulated rank fabric.

Stages of one AMR cycle: ``refinement`` (marking and 2:1 enforcement),
``proxy`` (topology-only target forest), ``balancing`` (SFC or diffusion)
and ``migration`` (payload move/split/merge through registered callbacks).
"""

from __future__ import annotations

from .balancing import BALANCERS, DiffusionBalancer, SFCBalancer, make_balancer, run_balancer
from .bench import RunReport, run_benchmark
from .curves import hilbert_key, morton_key
from .domain import Adjacency, Domain
from .errors import (
    AMRError,
    AuditError,
    BalanceError,
    CapacityError,
    ContractError,
    DomainError,
    FabricError,
    LocalityViolation,
    ProtocolError,
    ProtocolLeakError,
    StageError,
)
from .forest import Block, BlockForest, NeighborRecord, check_two_to_one, from_owners, tiles_domain
from .migration import DataDescriptor, grid_descriptor, migrate_and_adapt, register_data
from .payload import GridPayload, LevelStats, level_stats, merge_payloads, split_payload
from .pipeline import run_cycle, run_pipeline
from .proxy import ProxyBlock, ProxyForest, audit_links, build_proxy, set_proxy_weights
from .refinement import accept_coarsening, enforce_refinement, mark_targets, refine_sequential
from .scenario import ScenarioConfig, load_config, parse_config
from .sim import RankNetwork, neighbor_exchange, run_supersteps

__all__ = [
    "AMRError",
    "Adjacency",
    "AuditError",
    "BALANCERS",
    "BalanceError",
    "Block",
    "BlockForest",
    "CapacityError",
    "ContractError",
    "DataDescriptor",
    "DiffusionBalancer",
    "Domain",
    "DomainError",
    "FabricError",
    "GridPayload",
    "LevelStats",
    "LocalityViolation",
    "NeighborRecord",
    "ProtocolError",
    "ProtocolLeakError",
    "ProxyBlock",
    "ProxyForest",
    "RankNetwork",
    "RunReport",
    "SFCBalancer",
    "ScenarioConfig",
    "StageError",
    "accept_coarsening",
    "audit_links",
    "build_proxy",
    "check_two_to_one",
    "enforce_refinement",
    "from_owners",
    "grid_descriptor",
    "hilbert_key",
    "level_stats",
    "load_config",
    "make_balancer",
    "mark_targets",
    "merge_payloads",
    "migrate_and_adapt",
    "morton_key",
    "neighbor_exchange",
    "parse_config",
    "refine_sequential",
    "register_data",
    "run_balancer",
    "run_benchmark",
    "run_cycle",
    "run_pipeline",
    "run_supersteps",
    "set_proxy_weights",
    "split_payload",
    "tiles_domain",
]
