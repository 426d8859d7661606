"""Diffusion balancing: neighbor-wise load flows, then push or pull of blocks.

One invocation (a main iteration) on rank ``i``:

1. the first invocation sums the load (and block count) of every level;
2. a boolean reduction checks whether any rank is above its level limit,
   and the balancer stops when none is;
3. ``flow_iterations`` rounds of first-order diffusion compute ``f_ij``
   for every neighbor rank ``j`` (and every level in per-level mode);
4. push (overloaded ranks pick blocks to send) or pull (underloaded ranks
   request advertised blocks) marks blocks for migration;
5. one flag byte per neighbor announces incoming blocks.

All point-to-point traffic follows process-graph edges.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

from ..errors import ContractError, ProtocolError
from ..sim import AllReduceOr, AllReduceSum, neighbor_exchange
from .framework import Decision

TAG_FLOW = 41
TAG_ADVERT = 42
TAG_REQUEST = 43
TAG_NOTIFY = 44

EPS = 1e-9

_DEG = struct.Struct("<I")
_ADVERT = struct.Struct("<Qdh")
_ID = struct.Struct("<Q")

DEFAULT_FLOW_ITERATIONS = {"push": 15, "pushpull": 5}


def alpha(d_i: int, d_j: int) -> float:
    return 1.0 / (max(d_i, d_j) + 1)


@dataclass
class FlowState:
    """Per-rank diffusion state for one invocation."""

    load: list[float]
    degree: int
    neighbors: list[int]
    alphas: dict[int, float] = field(default_factory=dict)
    flows: dict[int, list[float]] = field(default_factory=dict)
    neighbor_load: dict[int, tuple[float, ...]] = field(default_factory=dict)


def flow_program(ctx, state: FlowState, iterations: int):
    """Diffusion flow iterations; fills ``state.flows`` and returns it."""
    if iterations < 1:
        raise ContractError("at least one flow iteration is required")
    levels = len(state.load)
    w = list(state.load)
    state.flows = {j: [0.0] * levels for j in state.neighbors}
    for it in range(iterations):
        body = struct.pack(f"<{levels}d", *w)
        head = _DEG.pack(state.degree) if it == 0 else b""
        got = yield from neighbor_exchange(ctx, {j: head + body for j in state.neighbors}, TAG_FLOW)
        if set(got) != set(state.neighbors):
            raise ProtocolError(f"rank {ctx.rank} missed flow messages from {sorted(set(state.neighbors) - set(got))}")
        remote = {}
        for j in state.neighbors:
            buf = got[j]
            if it == 0:
                (d_j,) = _DEG.unpack_from(buf)
                state.alphas[j] = alpha(state.degree, d_j)
                buf = buf[_DEG.size :]
            remote[j] = struct.unpack(f"<{levels}d", buf)
            if it == 0:
                state.neighbor_load[j] = remote[j]
        snap = list(w)
        for j in state.neighbors:
            a = state.alphas[j]
            fj = state.flows[j]
            wj = remote[j]
            for lvl in range(levels):
                step = a * (snap[lvl] - wj[lvl])
                fj[lvl] += step
                w[lvl] -= step
    return state


def fit_score(block, toward: int, away: int) -> int:
    """Connection strength to ``toward`` minus strength to ``away`` (face 4, edge 2, corner 1)."""
    score = 0
    for n in block.neighbors:
        if n.rank == toward:
            score += n.kind.strength
        elif n.rank == away:
            score -= n.kind.strength
    return score


def push_marks(rank: int, blocks: list, flows: dict[int, float], load: float, limit: float, neighbor_load=None, avoid=()) -> dict[int, int]:
    """Pick blocks of one level for overloaded-side migration.

    ``blocks`` are the local candidates, ``flows`` maps neighbor -> f_ij.
    An overloaded rank may send at least its excess over the limit.  With
    ``neighbor_load`` a block only goes to a neighbor that stays lighter
    than this rank was before the block left (no uphill moves).  Ranks in
    ``avoid`` (those that sent blocks here last time) get no blocks back.
    """
    f = {j: (0.0 if j in avoid else v) for j, v in flows.items()}
    outflow = math.fsum(v for v in f.values() if v > 0.0)
    if load > limit + EPS:
        outflow = max(outflow, load - limit)
    marks: dict[int, int] = {}
    sent = {j: 0.0 for j in f}
    remaining = load
    pool = sorted(blocks, key=lambda b: b.id)
    while outflow > EPS:
        positive = [j for j in f if f[j] > EPS]
        if not positive:
            break
        j = max(positive, key=lambda r: (f[r], -r))
        best = None
        best_key = None
        for b in pool:
            if b.id in marks or b.weight > outflow + EPS:
                continue
            if neighbor_load is not None and neighbor_load[j] + sent[j] + b.weight > remaining + EPS:
                continue
            k = (fit_score(b, j, rank), -b.id)
            if best_key is None or k > best_key:
                best, best_key = b, k
        if best is None:
            f[j] = 0.0
            continue
        marks[best.id] = j
        f[j] -= best.weight
        outflow -= best.weight
        sent[j] += best.weight
        remaining -= best.weight
    return marks


def pull_requests(adverts: dict[int, list[tuple[int, float, int]]], mine: dict[int, int], flows: dict[int, float], load: float, limit: float, neighbor_load=None, avoid=()) -> dict[int, list[int]]:
    """Choose advertised blocks of one level to request from underloading flows.

    ``adverts[j]`` lists ``(id, weight, strength on j)``; ``mine[id]`` is
    the connection strength of that block to this rank.  An underloaded
    rank may take up to its gap to the limit; with ``neighbor_load`` a
    block is only requested from a neighbor that stays at least as heavy.
    Ranks in ``avoid`` (those that got blocks from here last time) are not
    asked.
    """
    f = {j: (0.0 if j in avoid else v) for j, v in flows.items()}
    inflow = math.fsum(-v for v in f.values() if v < 0.0)
    if load < limit - EPS:
        inflow = max(inflow, limit - load)
    inflow = min(inflow, max(limit - load, 0.0))
    taken = set()
    got = {j: 0.0 for j in f}
    current = load
    requests: dict[int, list[int]] = {}
    while inflow > EPS:
        negative = [j for j in f if f[j] < -EPS]
        if not negative:
            break
        j = min(negative, key=lambda r: (f[r], r))
        best = None
        best_key = None
        for bid, w, own in adverts.get(j, ()):
            if bid in taken or w > inflow + EPS:
                continue
            if neighbor_load is not None and neighbor_load[j] - got[j] - w < current - EPS:
                continue
            k = (mine.get(bid, 0) - own, -bid)
            if best_key is None or k > best_key:
                best, best_key = (bid, w), k
        if best is None:
            f[j] = 0.0
            continue
        taken.add(best[0])
        requests.setdefault(j, []).append(best[0])
        f[j] += best[1]
        inflow -= best[1]
        got[j] += best[1]
        current += best[1]
    return requests


@dataclass
class DiffusionBalancer:
    mode: str = "push"
    flow_iterations: int | None = None
    max_main_iterations: int = 20
    per_level: bool = True
    tolerance: float = 1.0
    strict = True

    def __post_init__(self):
        if self.mode not in DEFAULT_FLOW_ITERATIONS:
            raise ValueError(f"unknown diffusion mode {self.mode!r}")
        if self.flow_iterations is None:
            self.flow_iterations = DEFAULT_FLOW_ITERATIONS[self.mode]
        if self.flow_iterations < 1:
            raise ContractError("at least one flow iteration is required")

    def levels(self, domain) -> int:
        return domain.max_levels + 1 if self.per_level else 1

    def level_of(self, block) -> int:
        return block.level if self.per_level else 0

    def loads(self, view) -> list[float]:
        acc = [[] for _ in range(self.levels(view.domain))]
        for p in view.proxies.values():
            acc[self.level_of(p)].append(p.weight)
        return [math.fsum(a) for a in acc]

    def invoke(self, ctx, view, invocation):
        nlev = self.levels(view.domain)
        state = view.state
        load = self.loads(view)
        if invocation == 0:
            counts = [0.0] * nlev
            for p in view.proxies.values():
                counts[self.level_of(p)] += 1.0
            totals = yield AllReduceSum(tuple(load) + tuple(counts))
            limits = []
            for lvl in range(nlev):
                w_tot, n_tot = totals[lvl], totals[nlev + lvl]
                if n_tot <= 0:
                    limits.append(0.0)
                    continue
                unit = w_tot / n_tot
                avg = w_tot / ctx.size
                limits.append(math.ceil(self.tolerance * avg / unit - 1e-9) * unit if unit > 0 else 0.0)
            state["limits"] = limits
            state["totals"] = list(totals[:nlev])
        limits = state["limits"]
        over = any(load[lvl] > limits[lvl] + EPS for lvl in range(nlev))
        unbalanced = yield AllReduceOr(over)
        if not unbalanced or invocation >= self.max_main_iterations:
            state["main_iterations"] = invocation
            state["reason"] = "converged" if not unbalanced else "iteration cap"
            return Decision(again=False, migrate=False)

        nbrs = sorted(view.neighbor_ranks())
        flow = FlowState(load, len(nbrs), nbrs)
        yield from flow_program(ctx, flow, self.flow_iterations)
        pulling = self.mode == "pushpull" and invocation % 2 == 1
        if pulling:
            marks = yield from self._pull(ctx, view, flow, load, limits)
        else:
            marks = {}
            for lvl in range(nlev):
                cand = [p for p in view.proxies.values() if self.level_of(p) == lvl]
                flows = {j: flow.flows[j][lvl] for j in nbrs}
                nload = {j: flow.neighbor_load[j][lvl] for j in nbrs}
                marks.update(push_marks(ctx.rank, cand, flows, load[lvl], limits[lvl], nload, state.get("senders", ())))

        sending = set(marks.values())
        flags = {j: b"\x01" if j in sending else b"\x00" for j in nbrs}
        got = yield from neighbor_exchange(ctx, flags, TAG_NOTIFY)
        expected = {src: None for src, flag in got.items() if flag == b"\x01"}
        # remembered to stop blocks bouncing straight back next time
        state["senders"] = frozenset(expected)
        state["receivers"] = frozenset(sending)
        return Decision(marks, expected, again=True, migrate=True)

    def _pull(self, ctx, view, flow: FlowState, load, limits):
        rank = ctx.rank
        nbrs = flow.neighbors
        adverts_out: dict[int, list[bytes]] = {}
        for pid in sorted(view.proxies):
            p = view.proxies[pid]
            own = sum(n.kind.strength for n in p.neighbors if n.rank == rank)
            for j in sorted(p.neighbor_ranks() - {rank}):
                adverts_out.setdefault(j, []).append(_ADVERT.pack(pid, p.weight, own))
        got = yield from neighbor_exchange(ctx, {j: b"".join(v) for j, v in adverts_out.items()}, TAG_ADVERT)
        nlev = len(load)
        adverts = [dict() for _ in range(nlev)]
        for src in sorted(got):
            buf = got[src]
            for off in range(0, len(buf), _ADVERT.size):
                bid, w, own = _ADVERT.unpack_from(buf, off)
                lvl = view.domain.level(bid) if self.per_level else 0
                adverts[lvl].setdefault(src, []).append((bid, w, own))
        mine: dict[int, int] = {}
        for p in view.proxies.values():
            for n in p.neighbors:
                if n.rank != rank:
                    mine[n.id] = mine.get(n.id, 0) + n.kind.strength
        requests: dict[int, list[int]] = {}
        for lvl in range(nlev):
            flows = {j: flow.flows[j][lvl] for j in nbrs}
            nload = {j: flow.neighbor_load[j][lvl] for j in nbrs}
            for j, ids in pull_requests(adverts[lvl], mine, flows, load[lvl], limits[lvl], nload, view.state.get("receivers", ())).items():
                requests.setdefault(j, []).extend(ids)
        msgs = {j: b"".join(_ID.pack(bid) for bid in ids) for j, ids in requests.items()}
        got = yield from neighbor_exchange(ctx, msgs, TAG_REQUEST)
        wanted: dict[int, list[int]] = {}
        for src in sorted(got):
            buf = got[src]
            for off in range(0, len(buf), _ID.size):
                (bid,) = _ID.unpack_from(buf, off)
                if bid not in view.proxies:
                    raise ProtocolError(f"rank {src} requested block {bid:#x} that rank {rank} does not hold")
                wanted.setdefault(bid, []).append(src)
        marks = {}
        for bid in sorted(wanted):
            lvl = self.level_of(view.proxies[bid])
            marks[bid] = max(wanted[bid], key=lambda j: (flow.flows[j][lvl], -j))
        return marks
