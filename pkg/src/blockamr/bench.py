"""Benchmark driver: build a scenario, run the pipeline, summarize it."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .balancing import make_balancer
from .forest import BlockForest, dumps
from .migration import grid_descriptor, register_data
from .payload import level_stats, total_mass
from .pipeline import STAGES, PipelineResult, run_pipeline
from .proxy import default_weight, level_workload
from .scenario import ScenarioConfig, block_payload, build_forest, make_marker
from .sim import RankNetwork


def _level_rows(counts, per_rank, dim: int, size: int) -> list[dict]:
    stats = level_stats(counts, dim) if any(counts) else None
    rows = []
    for lvl, c in enumerate(counts):
        rows.append(
            {
                "level": lvl,
                "count": c,
                "coverage": stats.coverage[lvl] if stats else 0.0,
                "workload_share": stats.workload[lvl] if stats else 0.0,
                "memory_share": stats.memory[lvl] if stats else 0.0,
                "avg_per_rank": c / size,
                "max_per_rank": max((r[lvl] for r in per_rank), default=0),
            }
        )
    return rows


@dataclass
class RunReport:
    config: dict
    initial_levels: list[dict]
    levels_before_balancing: list[dict]
    levels: list[dict]
    main_iterations: int
    termination: str
    cells_resized_fraction: float
    block_growth: float
    balanced: bool
    mass: dict
    stages: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "initial_levels": self.initial_levels,
            "levels_before_balancing": self.levels_before_balancing,
            "levels": self.levels,
            "main_iterations": self.main_iterations,
            "termination": self.termination,
            "cells_resized_fraction": self.cells_resized_fraction,
            "block_growth": self.block_growth,
            "balanced": self.balanced,
            "mass": self.mass,
            "stages": self.stages,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)


def stage_rows(net: RankNetwork) -> list[dict]:
    """Per stage: p2p totals over ranks, collectives and replicated bytes per rank (max)."""
    rows = []
    for name in STAGES:
        per_rank = [net.metrics.get(r, name) for r in range(net.size)]
        rows.append(
            {
                "name": name,
                "p2p_msgs": sum(c.p2p_msgs for c in per_rank),
                "p2p_bytes": sum(c.p2p_bytes for c in per_rank),
                "max_rank_p2p_bytes": max(c.p2p_bytes for c in per_rank),
                "collectives": max(c.collectives for c in per_rank),
                "all_gathers": max(c.all_gathers for c in per_rank),
                "replicated_bytes": max(c.replicated_bytes for c in per_rank),
            }
        )
    return rows


def prepare(cfg: ScenarioConfig) -> BlockForest:
    """Initial forest with a grid payload in slot 0 when ``payload_n`` > 0."""
    forest = build_forest(cfg)
    if cfg.payload_n > 0:
        h = register_data(forest, grid_descriptor(forest.domain.dim))
        for b in forest.blocks():
            b.data[h] = block_payload(cfg.seed, b.id, b.level, cfg.payload_n, forest.domain.dim)
    return forest


def _mass(forest: BlockForest) -> float:
    if forest.registry is None or not len(forest.registry):
        return 0.0
    return total_mass(b.data[0] for b in forest.blocks() if 0 in b.data)


def run_benchmark(cfg: ScenarioConfig, workers: int = 1) -> tuple[RunReport, PipelineResult]:
    forest = prepare(cfg)
    domain = forest.domain
    size = cfg.ranks
    initial = _level_rows(forest.level_counts(), forest.per_rank_level_counts(), domain.dim, size)
    mass0 = _mass(forest)
    balancer = make_balancer(
        cfg.balancer,
        per_level=cfg.per_level,
        weighted=cfg.weighted,
        flow_iters=cfg.flow_iters,
        max_main_iters=cfg.max_main_iters,
        tolerance=cfg.tolerance,
    )
    weight = level_workload if cfg.weight == "level" else default_weight
    net = RankNetwork(size, seed=cfg.seed, workers=workers)
    result = run_pipeline(
        forest,
        balancer,
        make_marker(cfg, domain),
        weight,
        cycles=cfg.cycles,
        force_rebalance=cfg.force_rebalance,
        net=net,
    )
    final = result.forest
    first = result.cycles[0]
    if first.proceeded:
        before = _level_rows(first.proxy_counts, first.per_rank_before, domain.dim, size)
        resized = sum(1 for bid, t in first.targets.items() if t != domain.level(bid))
        resized_fraction = resized / len(first.targets)
    else:
        before = initial
        resized_fraction = 0.0
    levels = _level_rows(final.level_counts(), final.per_rank_level_counts(), domain.dim, size)
    iters = sum(c.balance_state.get("main_iterations", 0) for c in result.cycles)
    reasons = [c.balance_state.get("reason") for c in result.cycles if c.proceeded]
    termination = reasons[-1] if reasons else "no changes"
    n0 = sum(r["count"] for r in initial)
    n1 = sum(r["count"] for r in levels)
    balanced = all(r["max_per_rank"] == math.ceil(r["avg_per_rank"] - 1e-12) for r in levels)
    mass1 = _mass(final)
    rel = abs(mass1 - mass0) / abs(mass0) if mass0 else abs(mass1 - mass0)
    report = RunReport(
        config=_config_dict(cfg, domain),
        initial_levels=initial,
        levels_before_balancing=before,
        levels=levels,
        main_iterations=iters,
        termination=termination,
        cells_resized_fraction=resized_fraction,
        block_growth=n1 / n0 - 1.0,
        balanced=balanced,
        mass={"before": mass0, "after": mass1, "relative_change": rel},
        stages=stage_rows(net),
    )
    return report, result


def _config_dict(cfg: ScenarioConfig, domain) -> dict:
    return {
        "geometry": cfg.geometry,
        "root_grid": list(domain.root_grid),
        "max_levels": domain.max_levels,
        "ranks": cfg.ranks,
        "balancer": cfg.balancer,
        "per_level": cfg.per_level,
        "weighted": cfg.weighted,
        "weight": cfg.weight,
        "flow_iters": cfg.flow_iters,
        "max_main_iters": cfg.max_main_iters,
        "trigger": cfg.trigger,
        "partition": cfg.partition,
        "payload_n": cfg.payload_n,
        "cycles": cfg.cycles,
        "seed": cfg.seed,
    }


def write_artifacts(report: RunReport, result: PipelineResult, report_path=None, metrics_path=None, dump_path=None):
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    if metrics_path:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write(result.net.metrics.to_csv())
    if dump_path:
        with open(dump_path, "w", encoding="utf-8") as fh:
            fh.write(dumps(result.forest))
