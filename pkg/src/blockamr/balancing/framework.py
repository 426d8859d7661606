"""Balancer callback contract and proxy-block migration.

A balancer is an object with a generator method
``invoke(ctx, view, invocation)`` that returns a ``Decision``: where local
proxy blocks go, which ranks will send blocks here, and whether another
invocation is needed.  ``balance_program`` runs invocations, migrating the
proxy blocks after each one while keeping neighbor records and
actual/proxy links current.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..domain import Adjacency, Domain
from ..errors import ProtocolError
from ..forest import NeighborRecord
from ..proxy import ProxyBlock, ProxyForest
from ..sim import RankContext, RankNetwork, neighbor_exchange

TAG_MOVES = 31
TAG_PROXY = 32
TAG_LINK = 33

_MOVE = struct.Struct("<QI")
_HEAD = struct.Struct("<QdB")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_WORD = struct.Struct("<Q")
_WIDE = struct.Struct("<QIB")


@dataclass
class Decision:
    targets: dict[int, int] = field(default_factory=dict)
    # source rank -> set of ids, a block count, or None for "at least one"
    expected: dict[int, object] = field(default_factory=dict)
    again: bool = False
    migrate: bool = True


@dataclass
class RankView:
    rank: int
    size: int
    domain: Domain
    proxies: dict[int, ProxyBlock]
    links: dict[int, list[int]]
    state: dict = field(default_factory=dict)

    def neighbor_ranks(self) -> set[int]:
        return {n.rank for p in self.proxies.values() for n in p.neighbors if n.rank != self.rank}


# -- wire encoding ----------------------------------------------------------------


def _word_layout(domain: Domain, size: int):
    rank_bits = max(1, (size - 1).bit_length())
    if domain.id_bits + rank_bits + 2 <= 64:
        return rank_bits
    return None


def encode_proxy(domain: Domain, size: int, p: ProxyBlock) -> bytes:
    """id, weight, sources, neighbor records, user payload.

    Neighbor records pack into one 64-bit word when id, rank and kind fit.
    """
    out = [_HEAD.pack(p.id, p.weight, len(p.sources))]
    out += [_U32.pack(s) for s in p.sources]
    out.append(_U16.pack(len(p.neighbors)))
    rank_bits = _word_layout(domain, size)
    for n in p.neighbors:
        if rank_bits is None:
            out.append(_WIDE.pack(n.id, n.rank, int(n.kind)))
        else:
            out.append(_WORD.pack((n.id << (rank_bits + 2)) | (n.rank << 2) | int(n.kind)))
    out.append(bytes((len(p.payload),)) + p.payload)
    return b"".join(out)


def decode_proxy(domain: Domain, size: int, buf: bytes, off: int, owner: int) -> tuple[ProxyBlock, int]:
    pid, weight, nsrc = _HEAD.unpack_from(buf, off)
    off += _HEAD.size
    sources = tuple(_U32.unpack_from(buf, off + 4 * i)[0] for i in range(nsrc))
    off += 4 * nsrc
    (count,) = _U16.unpack_from(buf, off)
    off += 2
    rank_bits = _word_layout(domain, size)
    recs = []
    for _ in range(count):
        if rank_bits is None:
            nid, nrank, kind = _WIDE.unpack_from(buf, off)
            off += _WIDE.size
        else:
            (word,) = _WORD.unpack_from(buf, off)
            off += 8
            kind = word & 3
            nrank = (word >> 2) & ((1 << rank_bits) - 1)
            nid = word >> (rank_bits + 2)
        recs.append(NeighborRecord(nid, nrank, Adjacency(kind)))
    plen = buf[off]
    payload = bytes(buf[off + 1 : off + 1 + plen])
    off += 1 + plen
    return ProxyBlock(pid, domain.level(pid), owner, recs, weight, sources, payload), off


# -- migration ---------------------------------------------------------------------


def _apply_link(view: RankView, pid: int, new_rank: int) -> None:
    domain = view.domain
    links = view.links
    if pid in links:
        links[pid] = [new_rank]
        return
    level = domain.level(pid)
    if level > 0 and domain.parent(pid) in links:
        links[domain.parent(pid)][domain.child_digit(pid)] = new_rank
        return
    hit = False
    if level < domain.max_levels:
        for child in domain.children(pid):
            if child in links:
                links[child] = [new_rank]
                hit = True
    if not hit:
        raise ProtocolError(f"rank {view.rank} got a link update for unrelated proxy {pid:#x}")


def migrate_proxies(ctx: RankContext, view: RankView, decision: Decision):
    """Move proxy blocks per ``decision``; two supersteps.  Returns blocks sent."""
    rank = ctx.rank
    domain = view.domain
    moves = {pid: r for pid, r in decision.targets.items() if r != rank}
    for pid, r in moves.items():
        if pid not in view.proxies:
            raise ProtocolError(f"rank {rank} cannot move non-local proxy {pid:#x}")
        if not 0 <= r < ctx.size:
            raise ProtocolError(f"proxy {pid:#x} assigned to invalid rank {r}")

    ctx.set_neighbors(view.neighbor_ranks())
    ctx.partners = frozenset(s for p in view.proxies.values() for s in p.sources) - {rank}

    # phase A: neighbor ranks learn the new owners of adjacent blocks
    notes: dict[int, list[bytes]] = {}
    for pid in sorted(moves):
        for r in sorted(view.proxies[pid].neighbor_ranks() - {rank}):
            notes.setdefault(r, []).append(_MOVE.pack(pid, moves[pid]))
    got = yield from neighbor_exchange(ctx, {r: b"".join(v) for r, v in notes.items()}, TAG_MOVES)
    moved = dict(moves)
    for src in sorted(got):
        buf = got[src]
        for off in range(0, len(buf), _MOVE.size):
            pid, r = _MOVE.unpack_from(buf, off)
            moved[pid] = r
    if moved:
        for p in view.proxies.values():
            if any(n.id in moved for n in p.neighbors):
                p.neighbors = [NeighborRecord(n.id, moved.get(n.id, n.rank), n.kind) for n in p.neighbors]

    # phase B: ship the blocks and tell source ranks where their proxies went
    outgoing: dict[int, list[bytes]] = {}
    link_notes: dict[int, list[bytes]] = {}
    for pid in sorted(moves):
        p = view.proxies.pop(pid)
        dest = moves[pid]
        outgoing.setdefault(dest, []).append(encode_proxy(domain, ctx.size, p))
        for s in sorted(set(p.sources)):
            if s == rank:
                _apply_link(view, pid, dest)
            else:
                link_notes.setdefault(s, []).append(_MOVE.pack(pid, dest))
    for dest in sorted(outgoing):
        ctx.send(dest, b"".join(outgoing[dest]), TAG_PROXY)
    for dest in sorted(link_notes):
        ctx.send(dest, b"".join(link_notes[dest]), TAG_LINK)
    yield

    arrived: dict[int, list[int]] = {}
    for src, buf in ctx.recv(TAG_PROXY):
        off = 0
        while off < len(buf):
            p, off = decode_proxy(domain, ctx.size, buf, off, rank)
            if p.id in view.proxies:
                raise ProtocolError(f"rank {rank} received duplicate proxy {p.id:#x}")
            view.proxies[p.id] = p
            arrived.setdefault(src, []).append(p.id)
    _check_expected(rank, decision.expected, arrived)
    for src, buf in ctx.recv(TAG_LINK):
        for off in range(0, len(buf), _MOVE.size):
            pid, r = _MOVE.unpack_from(buf, off)
            _apply_link(view, pid, r)
    ctx.set_neighbors(view.neighbor_ranks())
    return len(moves)


def _check_expected(rank: int, expected: dict, arrived: dict[int, list[int]]) -> None:
    for src in sorted(set(expected) | set(arrived)):
        if src not in expected:
            raise ProtocolError(f"rank {rank} received unannounced blocks from rank {src}")
        got = arrived.get(src, [])
        spec = expected[src]
        if spec is None:
            ok = len(got) > 0
        elif isinstance(spec, int):
            ok = len(got) == spec
        else:
            ok = set(got) == set(spec)
        if not ok:
            raise ProtocolError(f"rank {rank} expected {spec!r} from rank {src}, got {len(got)} block(s)")


# -- driver ---------------------------------------------------------------------------


def balance_program(ctx: RankContext, proxies: dict[int, ProxyBlock], links: dict[int, list[int]], domain: Domain, balancer):
    """Rank program: run balancer invocations until it asks to stop."""
    view = RankView(
        ctx.rank,
        ctx.size,
        domain,
        {pid: ProxyBlock(p.id, p.level, p.owner, list(p.neighbors), p.weight, p.sources, p.payload) for pid, p in proxies.items()},
        {bid: list(t) for bid, t in links.items()},
    )
    ctx.strict = bool(getattr(balancer, "strict", False))
    invocation = 0
    moved = 0
    while True:
        ctx.set_neighbors(view.neighbor_ranks())
        decision = yield from balancer.invoke(ctx, view, invocation)
        if decision.migrate:
            moved += yield from migrate_proxies(ctx, view, decision)
        invocation += 1
        if not decision.again:
            break
    for p in view.proxies.values():
        p.owner = ctx.rank
    ctx.strict = False
    ctx.partners = frozenset()
    return view.proxies, view.links, dict(view.state, invocations=invocation, moved=moved)


def run_balancer(proxy: ProxyForest, balancer, net: RankNetwork | None = None, stage: str = "balancing"):
    """Balance ``proxy`` on the fabric; returns ``(new proxy forest, per-rank state)``."""
    net = net or RankNetwork(proxy.size)
    args = [(proxy.ranks[r], proxy.links[r], proxy.domain, balancer) for r in range(proxy.size)]
    results = net.run(balance_program, stage, args)
    out = ProxyForest(proxy.domain, [r[0] for r in results], [r[1] for r in results])
    return out, [r[2] for r in results]
