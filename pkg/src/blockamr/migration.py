"""Data migration: adapt the actual forest to the balanced proxy in one step.

Every block payload slot is described by a ``DataDescriptor`` holding six
callbacks.  A block that keeps its size and stays on its rank is handed over
untouched.  A block that moves is serialized on the source and rebuilt on
the target.  Splits and merges always go through serialization, even when
source and target coincide: the source emits one stream per child (or one
contribution per merging sibling), and the new block is only allocated and
filled on the rank that will own it.

Wire format of one block message::

    block_id u64, kind u8 (0 migrate, 1 split child, 2 merge part), part u8,
    handle_count u16, then per handle: handle u16, byte_len u32, bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import AuditError, ContractError, ProtocolError
from .forest import Block, BlockForest
from .payload import child_from_stream, decode_payload, encode_payload, merge_from_streams, split_streams
from .proxy import ProxyForest
from .sim import RankContext, RankNetwork

TAG_BLOCK = 51

KIND_MIGRATE = 0
KIND_SPLIT = 1
KIND_MERGE = 2

_HEAD = struct.Struct("<QBBH")
_ITEM = struct.Struct("<HI")


@dataclass(frozen=True)
class DataDescriptor:
    """Serialization callbacks for one payload slot.

    Serializers receive ``(block, value)``; deserializers receive the new
    ``Block`` and the bytes (a list indexed by child digit for merges).
    """

    name: str
    serialize_for_migration: Callable[[Block, Any], bytes]
    deserialize_after_migration: Callable[[Block, bytes], Any]
    serialize_for_split: Callable[[Block, Any], list[bytes]]
    deserialize_child_after_split: Callable[[Block, bytes], Any]
    serialize_for_merge: Callable[[Block, Any], bytes]
    deserialize_after_merge: Callable[[Block, list[bytes]], Any]
    size_of: Callable[[Any], int] = lambda value: int(getattr(value, "nbytes", 0))


@dataclass
class DataRegistry:
    descriptors: list[DataDescriptor] = field(default_factory=list)

    def register(self, descriptor: DataDescriptor) -> int:
        if any(d.name == descriptor.name for d in self.descriptors):
            raise ContractError(f"data slot {descriptor.name!r} is already registered")
        self.descriptors.append(descriptor)
        return len(self.descriptors) - 1

    def __getitem__(self, handle: int) -> DataDescriptor:
        if not 0 <= handle < len(self.descriptors):
            raise ContractError(f"no data slot registered under handle {handle}")
        return self.descriptors[handle]

    def __len__(self) -> int:
        return len(self.descriptors)


def register_data(forest: BlockForest, descriptor: DataDescriptor) -> int:
    """Bind ``descriptor`` to the forest; returns its handle."""
    if forest.registry is None:
        forest.registry = DataRegistry()
    return forest.registry.register(descriptor)


def grid_descriptor(dim: int, name: str = "grid") -> DataDescriptor:
    """Descriptor for ``GridPayload`` values."""
    return DataDescriptor(
        name,
        serialize_for_migration=lambda b, v: encode_payload(v),
        deserialize_after_migration=lambda b, buf: decode_payload(buf, dim),
        serialize_for_split=lambda b, v: split_streams(v),
        deserialize_child_after_split=lambda b, buf: child_from_stream(buf, dim),
        serialize_for_merge=lambda b, v: encode_payload(v),
        deserialize_after_merge=lambda b, parts: merge_from_streams(parts, dim),
    )


@dataclass
class MemoryMeter:
    """High-water mark of payload bytes resident on one rank.

    Counts block payloads plus serialized streams waiting on this rank;
    bytes handed to the fabric leave the rank at once.
    """

    current: int = 0
    peak: int = 0
    pre: int = 0
    incoming: int = 0
    built: int = 0

    def alloc(self, n: int) -> None:
        self.current += n
        self.peak = max(self.peak, self.current)

    def free(self, n: int) -> None:
        self.current -= n


def _encode(bid: int, kind: int, part: int, items: list[tuple[int, bytes]]) -> bytes:
    out = [_HEAD.pack(bid, kind, part, len(items))]
    for handle, buf in items:
        out.append(_ITEM.pack(handle, len(buf)))
        out.append(buf)
    return b"".join(out)


def decode_message(buf: bytes) -> tuple[int, int, int, list[tuple[int, bytes]]]:
    bid, kind, part, count = _HEAD.unpack_from(buf)
    off = _HEAD.size
    items = []
    for _ in range(count):
        handle, length = _ITEM.unpack_from(buf, off)
        off += _ITEM.size
        items.append((handle, bytes(buf[off : off + length])))
        off += length
    if off != len(buf):
        raise ProtocolError(f"block message for {bid:#x} has {len(buf) - off} trailing bytes")
    return bid, kind, part, items


def _payload_bytes(registry: DataRegistry, data: dict) -> int:
    return sum(registry[h].size_of(v) for h, v in data.items())


def migrate_program(ctx: RankContext, local: dict[int, Block], links: dict[int, list[int]], proxies, domain, registry, targets):
    """Rank program; returns ``(new local blocks, memory meter)``."""
    rank = ctx.rank
    nchild = domain.children_per_split
    meter = MemoryMeter()
    for b in local.values():
        for h in b.data:
            if registry is None or not 0 <= h < len(registry):
                raise ContractError(f"block {b.id:#x} carries data under unregistered handle {h}")
        size = _payload_bytes(registry, b.data) if b.data else 0
        meter.alloc(size)
    meter.pre = meter.current

    new: dict[int, Block] = {}
    for pid, p in proxies.items():
        new[pid] = Block(pid, p.level, rank, list(p.neighbors), p.weight)
    filled: set[int] = set()
    loopback: list[bytes] = []
    ctx.partners = frozenset(r for t in links.values() for r in t) | frozenset(
        s for p in proxies.values() for s in p.sources
    )
    ctx.partners -= {rank}
    ctx.strict = True

    def emit(dest: int, msg: bytes) -> None:
        if dest == rank:
            meter.alloc(len(msg))
            loopback.append(msg)
        else:
            ctx.send(dest, msg, TAG_BLOCK)

    for bid in sorted(local):
        b = local[bid]
        if bid not in links:
            raise AuditError(f"actual block {bid:#x} on rank {rank} has no proxy link")
        tgt = links[bid]
        target = targets.get(bid, b.target_level) if targets is not None else b.target_level
        size = _payload_bytes(registry, b.data) if b.data else 0
        handles = sorted(b.data)
        if target == b.level:
            if len(tgt) != 1:
                raise AuditError(f"block {bid:#x} keeps its level but links to {len(tgt)} proxies")
            dest = tgt[0]
            if dest == rank:
                if bid not in new:
                    raise AuditError(f"block {bid:#x} stays on rank {rank} but no proxy is there")
                new[bid].data = b.data
                filled.add(bid)
                continue
            items = [(h, registry[h].serialize_for_migration(b, b.data[h])) for h in handles]
            emit(dest, _encode(bid, KIND_MIGRATE, 0, items))
        elif target == b.level + 1:
            if len(tgt) != nchild:
                raise AuditError(f"block {bid:#x} splits but links to {len(tgt)} proxies")
            streams = {h: registry[h].serialize_for_split(b, b.data[h]) for h in handles}
            for h, s in streams.items():
                if len(s) != nchild:
                    raise ContractError(f"split serializer of {registry[h].name!r} emitted {len(s)} streams")
            for c in range(nchild):
                emit(tgt[c], _encode(bid, KIND_SPLIT, c, [(h, streams[h][c]) for h in handles]))
        elif target == b.level - 1:
            if len(tgt) != 1:
                raise AuditError(f"block {bid:#x} merges but links to {len(tgt)} proxies")
            items = [(h, registry[h].serialize_for_merge(b, b.data[h])) for h in handles]
            emit(tgt[0], _encode(bid, KIND_MERGE, domain.child_digit(bid), items))
        else:
            raise ContractError(f"illegal target level {target} for block {bid:#x}")
        meter.free(size)
    yield

    messages = [(rank, m) for m in loopback] + ctx.recv(TAG_BLOCK)
    for src, m in messages:
        if src != rank:
            meter.alloc(len(m))
        meter.incoming += len(m)
    parts: dict[int, dict[int, list[tuple[int, bytes]]]] = {}
    part_src: dict[int, dict[int, int]] = {}
    for src, m in messages:
        bid, kind, part, items = decode_message(m)
        if kind == KIND_MIGRATE:
            pid = bid
        elif kind == KIND_SPLIT:
            pid = domain.children(bid)[part]
        elif kind == KIND_MERGE:
            pid = domain.parent(bid)
        else:
            raise ProtocolError(f"unknown block message kind {kind}")
        if pid not in new:
            raise AuditError(f"rank {rank} received data for {pid:#x}, which is not a local proxy")
        blk = new[pid]
        if kind == KIND_MERGE:
            if part in parts.setdefault(pid, {}):
                raise ProtocolError(f"duplicate merge part {part} for {pid:#x}")
            parts[pid][part] = items
            part_src.setdefault(pid, {})[part] = len(m)
            continue
        if pid in filled:
            raise ProtocolError(f"block {pid:#x} received data twice")
        for h, buf in items:
            d = registry[h]
            if kind == KIND_MIGRATE:
                blk.data[h] = d.deserialize_after_migration(blk, buf)
            else:
                blk.data[h] = d.deserialize_child_after_split(blk, buf)
        filled.add(pid)
        grown = _payload_bytes(registry, blk.data)
        meter.alloc(grown)
        meter.built += grown
        meter.free(len(m))

    for pid in sorted(parts):
        got = parts[pid]
        missing = [c for c in range(nchild) if c not in got]
        if missing:
            raise ProtocolError(f"merge of {pid:#x} on rank {rank} is missing contributions {missing}")
        blk = new[pid]
        handle_sets = {tuple(h for h, _ in got[c]) for c in range(nchild)}
        if len(handle_sets) != 1:
            raise ProtocolError(f"merge contributions for {pid:#x} disagree on data slots")
        for i, h in enumerate(handle_sets.pop()):
            blk.data[h] = registry[h].deserialize_after_merge(blk, [got[c][i][1] for c in range(nchild)])
        filled.add(pid)
        grown = _payload_bytes(registry, blk.data)
        meter.alloc(grown)
        meter.built += grown
        meter.free(sum(part_src[pid].values()))

    empty = sorted(set(new) - filled)
    if empty:
        raise AuditError(f"rank {rank}: proxy block {empty[0]:#x} received no data")
    ctx.strict = False
    ctx.partners = frozenset()
    return new, meter


def migrate_and_adapt(
    forest: BlockForest,
    proxy: ProxyForest,
    targets=None,
    net: RankNetwork | None = None,
    stage: str = "migration",
) -> tuple[BlockForest, list[MemoryMeter]]:
    """Build the new forest from ``forest`` and the balanced ``proxy``.

    ``targets`` (per-rank or global ``{id: level}``) defaults to each
    block's ``target_level``.
    """
    if proxy.size != forest.size:
        raise AuditError("proxy and forest disagree on the rank count")
    net = net or RankNetwork(forest.size)
    if isinstance(targets, dict):
        targets = [{bid: targets[bid] for bid in local if bid in targets} for local in forest.ranks]
    args = [
        (
            forest.ranks[r],
            proxy.links[r],
            proxy.ranks[r],
            forest.domain,
            forest.registry,
            None if targets is None else targets[r],
        )
        for r in range(forest.size)
    ]
    results = net.run(migrate_program, stage, args)
    out = BlockForest(forest.domain, [r[0] for r in results], forest.registry)
    return out, [r[1] for r in results]
