"""Space-filling-curve balancing: cut the curve into ``P`` consecutive pieces.

Synchronization volume per mode (what every rank contributes to one
all-gather):

=================  ==========================  =====================
mode               payload                     bytes
=================  ==========================  =====================
whole forest       local block count (varint)  1 per rank (< 128)
whole, weighted    float32 weight per block    4 per block
per level          block id per block          8 per block
per level, weight  id + float32 weight         12 per block
=================  ==========================  =====================

The whole-forest modes transmit no ids, so they assume ownership is
already contiguous along the curve (true for curve-partitioned forests
whose blocks were split or merged in place).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..curves import curve_key
from ..sim import AllGather, pack_varint, unpack_varint
from .framework import Decision

_ID = struct.Struct("<Q")
_IDW = struct.Struct("<Qf")


def split_counts(n: int, size: int) -> list[int]:
    """Block counts per rank: the first ``n % size`` ranks take one extra."""
    base, extra = divmod(n, size)
    return [base + 1 if r < extra else base for r in range(size)]


def rank_of_position(g: int, n: int, size: int) -> int:
    base, extra = divmod(n, size)
    head = extra * (base + 1)
    if g < head:
        return g // (base + 1)
    return extra + (g - head) // base


def weighted_ranks(weights, size: int) -> list[int]:
    """Greedy prefix split: a block goes to the rank whose share holds its weight midpoint."""
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0.0:
        return [rank_of_position(g, len(w), size) for g in range(len(w))]
    prefix = np.cumsum(w) - w
    mid = (prefix + 0.5 * w) * size / total
    return [min(size - 1, max(0, int(m))) for m in mid]


@dataclass
class SFCBalancer:
    order: str = "morton"
    per_level: bool = True
    weighted: bool = False
    strict = False

    def invoke(self, ctx, view, invocation):
        key = curve_key(self.order)
        domain = view.domain
        rank, size = ctx.rank, ctx.size
        local = sorted(view.proxies, key=lambda pid: key(domain, pid))
        if self.per_level:
            if self.weighted:
                payload = b"".join(_IDW.pack(pid, view.proxies[pid].weight) for pid in local)
            else:
                payload = b"".join(_ID.pack(pid) for pid in local)
        elif self.weighted:
            payload = np.asarray([view.proxies[pid].weight for pid in local], dtype="<f4").tobytes()
        else:
            payload = pack_varint(len(local))
        gathered = yield AllGather(payload)

        assign: list[tuple[int, int, int]] = []  # (id or position, owner, target)
        if self.per_level:
            rec = _IDW if self.weighted else _ID
            by_level: dict[int, list[tuple[int, int, float]]] = {}
            for owner, buf in enumerate(gathered):
                for off in range(0, len(buf), rec.size):
                    item = rec.unpack_from(buf, off)
                    pid = item[0]
                    w = item[1] if self.weighted else 1.0
                    by_level.setdefault(domain.level(pid), []).append((key(domain, pid), pid, owner, w))
            for lvl in sorted(by_level):
                seq = sorted(by_level[lvl])
                if self.weighted:
                    targets = weighted_ranks([s[3] for s in seq], size)
                else:
                    targets = [rank_of_position(g, len(seq), size) for g in range(len(seq))]
                assign += [(s[1], s[2], t) for s, t in zip(seq, targets)]
            mine = {pid: t for pid, owner, t in assign if owner == rank}
            expected: dict[int, object] = {}
            for pid, owner, t in assign:
                if t == rank and owner != rank:
                    expected.setdefault(owner, set()).add(pid)
        else:
            if self.weighted:
                weights = [np.frombuffer(buf, dtype="<f4") for buf in gathered]
                counts = [len(w) for w in weights]
                flat = np.concatenate(weights) if weights else np.zeros(0)
                targets = weighted_ranks(flat, size)
            else:
                counts = [unpack_varint(buf)[0] for buf in gathered]
                n = sum(counts)
                targets = [rank_of_position(g, n, size) for g in range(n)]
            offset = sum(counts[:rank])
            mine = {pid: targets[offset + i] for i, pid in enumerate(local)}
            expected = {}
            pos = 0
            for owner, c in enumerate(counts):
                if owner != rank:
                    k = sum(1 for t in targets[pos : pos + c] if t == rank)
                    if k:
                        expected[owner] = k
                pos += c
        moving = {pid: t for pid, t in mine.items() if t != rank}
        view.state["main_iterations"] = 1
        view.state["reason"] = "single-shot"
        return Decision(moving, expected, again=False, migrate=True)
