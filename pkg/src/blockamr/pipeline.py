"""The four-stage AMR program flow: mark, proxy, balance, migrate.

One cycle evaluates the marker, enforces 2:1 balance and sibling-complete
coarsening, builds the proxy forest, assigns weights, balances the proxy and
finally migrates/splits/merges the block data.  Several cycles may run back
to back; weights are evaluated afresh in every cycle.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .balancing import run_balancer
from .errors import AMRError, StageError
from .forest import BlockForest
from .migration import MemoryMeter, migrate_and_adapt
from .proxy import ProxyForest, build_proxy, default_weight, set_proxy_weights
from .refinement import identity_marker, mark_targets, refinement_program
from .sim import RankNetwork

STAGES = ("refinement", "proxy", "balancing", "migration")


@dataclass
class CycleReport:
    proceeded: bool
    targets: dict[int, int] = field(default_factory=dict)
    before: list[int] = field(default_factory=list)
    proxy_counts: list[int] = field(default_factory=list)
    per_rank_before: list[list[int]] = field(default_factory=list)
    per_rank_after: list[list[int]] = field(default_factory=list)
    balance_state: dict = field(default_factory=dict)
    memory: list[MemoryMeter] = field(default_factory=list)


@dataclass
class PipelineResult:
    forest: BlockForest
    cycles: list[CycleReport]
    net: RankNetwork
    proxy: ProxyForest | None = None


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except AMRError as exc:
        raise StageError(name, exc) from exc


def refine(forest: BlockForest, marker, net: RankNetwork, force: bool = False):
    """Mark and run the distributed refinement stage; returns ``(per-rank targets, proceed)``."""
    proposals = mark_targets(forest, marker)
    domain = forest.domain
    args = [(forest.ranks[r], proposals[r], domain, force) for r in range(forest.size)]
    results = net.run(refinement_program, "refinement", args)
    return [r[0] for r in results], all(r[1] for r in results)


def run_cycle(
    forest: BlockForest,
    balancer,
    marker=identity_marker,
    weight: Callable = default_weight,
    net: RankNetwork | None = None,
    force_rebalance: bool = False,
):
    """One pass of the program flow; returns ``(forest, CycleReport, balanced proxy or None)``."""
    net = net or RankNetwork(forest.size)
    targets, proceed = _stage("refinement", refine, forest, marker, net, force_rebalance)
    if not proceed:
        return forest, CycleReport(False, before=forest.level_counts()), None
    flat = {bid: t for local in targets for bid, t in local.items()}
    for local, tg in zip(forest.ranks, targets):
        for bid, b in local.items():
            b.target_level = tg[bid]
    report = CycleReport(True, flat, forest.level_counts())
    proxy = _stage("proxy", build_proxy, forest, targets, net)
    _stage("proxy", set_proxy_weights, proxy, weight)
    report.proxy_counts = proxy.level_counts()
    report.per_rank_before = proxy.per_rank_level_counts()

    balanced, states = _stage("balancing", run_balancer, proxy, balancer, net)
    report.per_rank_after = balanced.per_rank_level_counts()
    report.balance_state = {k: v for k, v in states[0].items() if k in ("main_iterations", "reason", "invocations")}
    new, meters = _stage("migration", migrate_and_adapt, forest, balanced, targets, net)
    for b in new.blocks():
        b.target_level = b.level
    report.memory = meters
    return new, report, balanced


def run_pipeline(
    forest: BlockForest,
    balancer,
    marker=identity_marker,
    weight: Callable = default_weight,
    cycles: int = 1,
    force_rebalance: bool = False,
    net: RankNetwork | None = None,
) -> PipelineResult:
    """Run up to ``cycles`` AMR cycles; stops early when nothing changes.

    With ``force_rebalance`` the first cycle balances and migrates even
    without any marked block.
    """
    net = net or RankNetwork(forest.size)
    reports = []
    last = None
    for i in range(cycles):
        forest, rep, proxy = run_cycle(forest, balancer, marker, weight, net, force_rebalance and i == 0)
        reports.append(rep)
        if not rep.proceeded:
            break
        last = proxy
    return PipelineResult(forest, reports, net, last)
