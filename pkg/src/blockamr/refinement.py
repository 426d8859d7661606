"""Block-level refinement: marking, forced splits for 2:1 balance, coarsening.

Targets are absolute levels.  A pending coarsening request is encoded as
``level - 1`` until ``accept_coarsening`` either keeps or resets it.

Two implementations live here: the global sequential functions
(``enforce_refinement``, ``accept_coarsening``) and the rank program
``refinement_program`` that reaches the same targets using only local
blocks, neighbor exchanges and two boolean reductions.
"""

from __future__ import annotations

import random
import struct
from typing import Callable

from .errors import ContractError
from .forest import Block, BlockForest
from .sim import AllReduceOr, RankContext, neighbor_exchange

Marker = Callable[[int, dict[int, Block]], dict[int, int]]

TAG_TARGETS = 11
TAG_OK = 12

_STATE = struct.Struct("<QBB")


# -- markers -----------------------------------------------------------------


def identity_marker(rank, blocks):
    return {}


def threshold_marker(tau: float, handle: int = 0) -> Marker:
    """Refine every block whose largest cell value reaches ``tau``."""

    def mark(rank, blocks):
        out = {}
        for bid, b in blocks.items():
            payload = b.data.get(handle)
            if payload is not None and float(payload.values.max()) >= tau:
                out[bid] = 1
        return out

    return mark


def random_marker(seed: int, p_refine: float = 0.1, p_coarsen: float = 0.3, max_level: int | None = None) -> Marker:
    """Per-block coin flips keyed on ``(seed, block id)``; independent of ownership."""

    def mark(rank, blocks):
        out = {}
        for bid, b in blocks.items():
            u = random.Random(f"{seed}:{bid}").random()
            if u < p_refine and (max_level is None or b.level < max_level):
                out[bid] = 1
            elif u < p_refine + p_coarsen and b.level > 0:
                out[bid] = -1
        return out

    return mark


def mark_targets(forest: BlockForest, callback: Marker) -> list[dict[int, int]]:
    """Evaluate the marker on every rank; returns per-rank ``{id: proposed level}``."""
    top = forest.domain.max_levels
    proposals = []
    for rank, local in enumerate(forest.ranks):
        deltas = callback(rank, local) or {}
        out = {}
        for bid, b in local.items():
            delta = int(deltas.get(bid, 0))
            if delta not in (-1, 0, 1):
                raise ContractError(f"marker proposed level change {delta} for block {bid:#x}")
            target = b.level + delta
            if not 0 <= target <= top:
                raise ContractError(f"target level {target} of block {bid:#x} outside 0..{top}")
            out[bid] = target
        unknown = set(deltas) - set(local)
        if unknown:
            raise ContractError(f"marker on rank {rank} returned non-local blocks")
        proposals.append(out)
    return proposals


# -- sequential reference ------------------------------------------------------


def _global_view(forest: BlockForest):
    return {b.id: b for b in forest.blocks()}


def _flatten(proposals) -> dict[int, int]:
    if isinstance(proposals, dict):
        return dict(proposals)
    flat = {}
    for p in proposals:
        flat.update(p)
    return flat


def enforce_refinement(forest: BlockForest, proposals) -> dict[int, int]:
    """Keep every requested split and add the forced splits 2:1 balance needs."""
    blocks = _global_view(forest)
    out = _flatten(proposals)
    eff = {bid: max(out[bid], b.level) for bid, b in blocks.items()}
    changed = True
    while changed:
        changed = False
        for bid in sorted(blocks):
            b = blocks[bid]
            if eff[bid] > b.level:
                continue
            if any(eff[n.id] >= b.level + 2 for n in b.neighbors):
                eff[bid] = out[bid] = b.level + 1
                changed = True
    return out


def accept_coarsening(forest: BlockForest, targets) -> dict[int, int]:
    """Accept complete sibling groups whose merge keeps 2:1 balance."""
    domain = forest.domain
    blocks = _global_view(forest)
    targets = _flatten(targets)
    final = {bid: max(targets[bid], b.level) for bid, b in blocks.items()}
    groups = {}
    for bid, b in blocks.items():
        if targets[bid] < b.level:
            groups.setdefault(domain.parent(bid), []).append(bid)
    pending = {p: sorted(m) for p, m in groups.items() if len(m) == domain.children_per_split}
    changed = True
    while changed:
        changed = False
        for p in sorted(pending):
            members = pending[p]
            lvl = blocks[members[0]].level
            ok = all(
                final[n.id] <= lvl
                for m in members
                for n in blocks[m].neighbors
                if n.id not in members
            )
            if ok:
                for m in members:
                    final[m] = lvl - 1
                del pending[p]
                changed = True
    return final


def refine_sequential(forest: BlockForest, proposals) -> dict[int, int]:
    return accept_coarsening(forest, enforce_refinement(forest, proposals))


# -- distributed rank program ----------------------------------------------------


def _boundary(local: dict[int, Block], rank: int) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for bid in sorted(local):
        for r in sorted({n.rank for n in local[bid].neighbors if n.rank != rank}):
            out.setdefault(r, []).append(bid)
    return out


def _encode_states(ids, target, flag) -> bytes:
    return b"".join(_STATE.pack(bid, target[bid], 1 if flag.get(bid) else 0) for bid in ids)


def _decode_states(buf: bytes):
    for off in range(0, len(buf), _STATE.size):
        yield _STATE.unpack_from(buf, off)


def refinement_program(ctx: RankContext, local: dict[int, Block], proposals: dict[int, int], domain, force=False):
    """Rank program; returns ``(targets, proceed)``.

    ``proceed`` is False when either boolean reduction shows that no block
    anywhere changes (and ``force`` is off).
    """
    ctx.set_neighbors(r for b in local.values() for r in b.neighbor_ranks())
    ids = sorted(local)
    levels = {bid: local[bid].level for bid in ids}
    marked = any(proposals[bid] != levels[bid] for bid in ids)
    anything = yield AllReduceOr(marked)
    if not anything and not force:
        return {bid: levels[bid] for bid in ids}, False

    boundary = _boundary(local, ctx.rank)
    target = {bid: max(proposals[bid], levels[bid]) for bid in ids}
    cand = {bid: proposals[bid] < levels[bid] for bid in ids}
    remote: dict[int, int] = {}
    rcand: dict[int, bool] = {}

    def exchange_states():
        msgs = {r: _encode_states(bids, target, cand) for r, bids in boundary.items()}
        got = yield from neighbor_exchange(ctx, msgs, TAG_TARGETS)
        for src in sorted(got):
            for bid, t, c in _decode_states(got[src]):
                remote[bid] = t
                rcand[bid] = bool(c)

    def known(bid):
        return target[bid] if bid in target else remote[bid]

    for _ in range(max(domain.max_levels - 1, 0)):
        yield from exchange_states()
        for bid in ids:
            lvl = levels[bid]
            if target[bid] > lvl:
                continue
            if any(known(n.id) >= lvl + 2 for n in local[bid].neighbors):
                target[bid] = lvl + 1
                cand[bid] = False

    accepted = set()
    for _ in range(domain.max_levels):
        yield from exchange_states()
        ok = {}
        for bid in ids:
            if not cand[bid] or bid in accepted:
                continue
            lvl = levels[bid]
            sibs = domain.siblings(bid)
            nbr_ids = {n.id for n in local[bid].neighbors}
            group_ok = all(
                (s in local and cand[s]) or (s in nbr_ids and rcand.get(s, False))
                for s in sibs
                if s != bid
            )
            sibset = set(sibs)
            ok[bid] = group_ok and all(
                known(n.id) <= lvl for n in local[bid].neighbors if n.id not in sibset
            )
        msgs = {}
        for r, bids in boundary.items():
            part = [bid for bid in bids if bid in ok]
            if part:
                msgs[r] = b"".join(_STATE.pack(bid, 0, 1 if ok[bid] else 0) for bid in part)
        got = yield from neighbor_exchange(ctx, msgs, TAG_OK)
        rok = {}
        for src in sorted(got):
            for bid, _, flag in _decode_states(got[src]):
                rok[bid] = bool(flag)
        for bid in ids:
            if bid not in ok or not ok[bid]:
                continue
            if all(ok.get(s, False) if s in local else rok.get(s, False) for s in domain.siblings(bid)):
                accepted.add(bid)
        for bid in accepted:
            target[bid] = levels[bid] - 1

    for bid in ids:
        if bid not in accepted and target[bid] < levels[bid]:
            target[bid] = levels[bid]
    changed = any(target[bid] != levels[bid] for bid in ids)
    anything = yield AllReduceOr(changed)
    return target, bool(anything or force)
