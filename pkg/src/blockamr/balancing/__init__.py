"""Proxy balancers and the balancer contract."""

from __future__ import annotations

from .diffusion import DiffusionBalancer, FlowState, alpha, fit_score, flow_program, pull_requests, push_marks
from .framework import Decision, RankView, balance_program, decode_proxy, encode_proxy, migrate_proxies, run_balancer
from .sfc import SFCBalancer, rank_of_position, split_counts, weighted_ranks

BALANCERS = ("sfc:morton", "sfc:hilbert", "diffusion:push", "diffusion:pushpull")


def make_balancer(spec: str, per_level: bool = True, weighted: bool = False, flow_iters: int | None = None, max_main_iters: int = 20, tolerance: float = 1.0):
    """Build a balancer from ``family:variant`` (see ``BALANCERS``)."""
    family, _, variant = spec.partition(":")
    if family == "sfc" and variant in ("morton", "hilbert"):
        return SFCBalancer(variant, per_level=per_level, weighted=weighted)
    if family == "diffusion" and variant in ("push", "pushpull"):
        return DiffusionBalancer(variant, flow_iters, max_main_iters, per_level=per_level, tolerance=tolerance)
    raise ValueError(f"unknown balancer {spec!r}; expected one of {', '.join(BALANCERS)}")


__all__ = [
    "BALANCERS",
    "Decision",
    "DiffusionBalancer",
    "FlowState",
    "RankView",
    "SFCBalancer",
    "alpha",
    "balance_program",
    "decode_proxy",
    "encode_proxy",
    "fit_score",
    "flow_program",
    "make_balancer",
    "migrate_proxies",
    "pull_requests",
    "push_marks",
    "rank_of_position",
    "run_balancer",
    "split_counts",
    "weighted_ranks",
]
