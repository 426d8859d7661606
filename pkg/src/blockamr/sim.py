"""Deterministic bulk-synchronous rank network.

A rank program is a generator function ``program(ctx)``.  Every bare
``yield`` is a superstep barrier: messages sent before it become readable
after it.  Collectives are requested by yielding a request object; the
fabric resumes every rank with the reduced value::

    def program(ctx):
        ctx.send((ctx.rank + 1) % ctx.size, b"hello")
        yield
        msgs = ctx.recv()
        total = yield AllReduceSum((len(msgs),))
        return total

All payloads are ``bytes`` so byte accounting reflects wire encodings.
Delivery order is ``(source rank, send sequence)``, which makes results
independent of how ranks are scheduled within a superstep.
"""

from __future__ import annotations

import csv
import io
import random
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields

from .errors import FabricError, LocalityViolation, ProtocolLeakError


@dataclass
class StageCounters:
    p2p_msgs: int = 0
    p2p_bytes: int = 0
    recv_msgs: int = 0
    recv_bytes: int = 0
    collectives: int = 0
    collective_bytes: int = 0
    replicated_bytes: int = 0
    all_gathers: int = 0

    def add(self, other: "StageCounters") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


class Metrics:
    """Counters keyed by ``(rank, stage)``."""

    CSV_COLUMNS = ("rank", "stage", "p2p_msgs", "p2p_bytes", "collectives", "collective_bytes", "replicated_bytes")

    def __init__(self):
        self._data: dict[tuple[int, str], StageCounters] = {}
        self._stages: list[str] = []

    def counter(self, rank: int, stage: str) -> StageCounters:
        key = (rank, stage)
        c = self._data.get(key)
        if c is None:
            c = self._data[key] = StageCounters()
            if stage not in self._stages:
                self._stages.append(stage)
        return c

    @property
    def stages(self) -> list[str]:
        return list(self._stages)

    def get(self, rank: int, stage: str) -> StageCounters:
        return self._data.get((rank, stage), StageCounters())

    def stage_total(self, stage: str) -> StageCounters:
        total = StageCounters()
        for (_, s), c in self._data.items():
            if s == stage:
                total.add(c)
        return total

    def rank_total(self, rank: int, stages=None) -> StageCounters:
        total = StageCounters()
        for (r, s), c in self._data.items():
            if r == rank and (stages is None or s in stages):
                total.add(c)
        return total

    def total(self) -> StageCounters:
        total = StageCounters()
        for c in self._data.values():
            total.add(c)
        return total

    def items(self):
        return sorted(self._data.items(), key=lambda kv: (self._stages.index(kv[0][1]), kv[0][0]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for (rank, stage), c in self.items():
            w.writerow([rank, stage, c.p2p_msgs, c.p2p_bytes, c.collectives, c.collective_bytes, c.replicated_bytes])
        return buf.getvalue()

    def snapshot(self) -> dict:
        return {f"{r}:{s}": tuple(getattr(c, f.name) for f in fields(c)) for (r, s), c in self._data.items()}


# -- collective requests --------------------------------------------------------


@dataclass(frozen=True)
class AllReduceOr:
    value: bool
    kind = "all_reduce_bool_or"

    def nbytes(self) -> int:
        return 1


@dataclass(frozen=True)
class AllReduceSum:
    values: tuple
    kind = "all_reduce_sum"

    def nbytes(self) -> int:
        return 8 * len(self.values)


@dataclass(frozen=True)
class AllGather:
    payload: bytes
    kind = "all_gather_bytes"

    def nbytes(self) -> int:
        return len(self.payload)


class RankContext:
    """Everything a rank program may touch besides its own local state."""

    __slots__ = ("rank", "size", "stage", "neighbors", "partners", "strict", "rng", "_net", "_inbox", "_outbox", "_seq")

    def __init__(self, net: "RankNetwork", rank: int, seed: int):
        self.rank = rank
        self.size = net.size
        self.stage = "default"
        self.neighbors: frozenset[int] = frozenset()
        self.partners: frozenset[int] = frozenset()
        self.strict = False
        self.rng = random.Random(f"{seed}:{rank}")
        self._net = net
        self._inbox: list[tuple[int, int, int, bytes]] = []
        self._outbox: list[tuple[int, int, int, bytes]] = []
        self._seq = 0

    def set_neighbors(self, ranks) -> None:
        self.neighbors = frozenset(r for r in ranks if r != self.rank)

    def send(self, dest: int, payload: bytes, tag: int = 0) -> None:
        if not 0 <= dest < self.size:
            raise FabricError(f"rank {self.rank} sent to out-of-range rank {dest}")
        if dest == self.rank:
            raise FabricError(f"rank {self.rank} sent a message to itself")
        if self.strict and dest not in self.neighbors and dest not in self.partners:
            raise LocalityViolation(f"rank {self.rank} -> {dest} is neither a neighbor nor a link partner")
        payload = bytes(payload)
        c = self._net.metrics.counter(self.rank, self.stage)
        c.p2p_msgs += 1
        c.p2p_bytes += len(payload)
        self._outbox.append((dest, tag, self._seq, payload))
        self._seq += 1

    def recv(self, tag: int | None = None) -> list[tuple[int, bytes]]:
        """Consume delivered messages (optionally only one tag) in delivery order."""
        if tag is None:
            out, self._inbox = self._inbox, []
        else:
            out = [m for m in self._inbox if m[1] == tag]
            self._inbox = [m for m in self._inbox if m[1] != tag]
        return [(src, payload) for src, _, _, payload in out]

    def pending(self) -> int:
        return len(self._inbox)


class RankNetwork:
    """A fabric of ``size`` ranks with persistent metrics across program runs."""

    def __init__(self, size: int, seed: int = 0, workers: int = 1):
        if size < 1:
            raise FabricError("rank count must be at least 1")
        self.size = size
        self.seed = seed
        self.workers = workers
        self.metrics = Metrics()
        self.supersteps = 0

    def run(self, program, stage: str = "default", args=None):
        """Run ``program(ctx, *args[rank])`` on every rank to completion; return results."""
        contexts = [RankContext(self, r, self.seed) for r in range(self.size)]
        for ctx in contexts:
            ctx.stage = stage
            self.metrics.counter(ctx.rank, stage)
        gens = []
        for ctx in contexts:
            extra = () if args is None else args[ctx.rank]
            gens.append(program(ctx, *extra))
        results: list = [None] * self.size
        alive = list(range(self.size))
        replies: list = [None] * self.size
        pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

        def step(r):
            try:
                return ("yield", gens[r].send(replies[r]))
            except StopIteration as stop:
                return ("done", stop.value)

        try:
            while alive:
                outcomes = list(pool.map(step, alive)) if pool else [step(r) for r in alive]
                self.supersteps += 1
                requests = {}
                still = []
                for r, (state, value) in zip(alive, outcomes):
                    if state == "done":
                        results[r] = value
                    else:
                        requests[r] = value
                        still.append(r)
                self._deliver(contexts)
                self._collect(contexts, requests, replies)
                alive = still
        finally:
            if pool:
                pool.shutdown()
        for ctx in contexts:
            if ctx._inbox or ctx._outbox:
                raise ProtocolLeakError(
                    f"rank {ctx.rank} left {len(ctx._inbox) + len(ctx._outbox)} message(s) unconsumed in stage {stage!r}"
                )
        return results

    def _deliver(self, contexts):
        batches = []
        for ctx in contexts:
            for dest, tag, seq, payload in ctx._outbox:
                batches.append((dest, ctx.rank, seq, tag, payload))
            ctx._outbox = []
        batches.sort(key=lambda m: (m[0], m[1], m[2]))
        for dest, src, seq, tag, payload in batches:
            target = contexts[dest]
            target._inbox.append((src, tag, seq, payload))
            c = self.metrics.counter(dest, target.stage)
            c.recv_msgs += 1
            c.recv_bytes += len(payload)

    def _collect(self, contexts, requests, replies):
        for r in range(self.size):
            replies[r] = None
        pending = {r: v for r, v in requests.items() if v is not None}
        if not pending:
            return
        if len(pending) != self.size:
            raise FabricError("collective requested while some ranks are not participating")
        kinds = {type(v) for v in pending.values()}
        if len(kinds) != 1:
            raise FabricError(f"mismatched collectives in one superstep: {sorted(k.__name__ for k in kinds)}")
        kind = kinds.pop()
        ordered = [pending[r] for r in range(self.size)]
        if kind is AllReduceOr:
            result = any(bool(v.value) for v in ordered)
            replicated = 0
        elif kind is AllReduceSum:
            width = {len(v.values) for v in ordered}
            if len(width) != 1:
                raise FabricError("all_reduce_sum vectors differ in length")
            acc = [0.0] * width.pop()
            for v in ordered:
                for i, x in enumerate(v.values):
                    acc[i] += x
            result = tuple(acc)
            replicated = 0
        elif kind is AllGather:
            result = [v.payload for v in ordered]
            replicated = sum(len(p) for p in result)
        else:
            raise FabricError(f"unknown request {kind!r}")
        for r in range(self.size):
            c = self.metrics.counter(r, contexts[r].stage)
            c.collectives += 1
            c.collective_bytes += ordered[r].nbytes()
            c.replicated_bytes += replicated
            if kind is AllGather:
                c.all_gathers += 1
            replies[r] = result


def run_supersteps(size: int, program, seed: int = 0, workers: int = 1, stage: str = "default", args=None):
    """Run one program on a fresh network; returns ``(results, metrics)``."""
    net = RankNetwork(size, seed=seed, workers=workers)
    results = net.run(program, stage=stage, args=args)
    return results, net.metrics


def neighbor_exchange(ctx: RankContext, payloads: dict[int, bytes], tag: int = 0):
    """Send one payload per neighbor, barrier, and return ``{source: payload}``.

    Use as ``received = yield from neighbor_exchange(ctx, payloads)``.
    """
    for dest in sorted(payloads):
        if dest not in ctx.neighbors:
            raise LocalityViolation(f"rank {ctx.rank} addressed non-neighbor rank {dest}")
        ctx.send(dest, payloads[dest], tag)
    yield
    received = {}
    for src, payload in ctx.recv(tag):
        if src in received:
            raise FabricError(f"rank {ctx.rank} got two exchange messages from {src}")
        received[src] = payload
    return received


# -- small wire helpers ---------------------------------------------------------


def pack_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def unpack_varint(buf: bytes, pos: int = 0) -> tuple[int, int]:
    value = shift = 0
    while True:
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


F64 = struct.Struct("<d")
