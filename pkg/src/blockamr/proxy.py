"""Proxy forest: a topology-only copy of the forest after refinement.

Each actual block links to the rank(s) of the proxy block(s) it turns
into (one target, or ``2^d`` when it splits); each proxy block links back
to the rank(s) of its actual source block(s) (one, or ``2^d`` for a merge,
indexed by child digit).  Balancers move proxy blocks only; the links are
kept current so data migration knows where every byte stream goes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .domain import Domain
from .errors import AuditError, BalanceError, ContractError
from .forest import Block, BlockForest, NeighborRecord, dump_block_line
from .sim import RankContext, RankNetwork, neighbor_exchange

PAYLOAD_CAP = 64

TAG_INFO = 21
TAG_RELAY = 22

_INFO = struct.Struct("<QbI")
_RELAY = struct.Struct("<QQI")


@dataclass(slots=True)
class ProxyBlock:
    id: int
    level: int
    owner: int
    neighbors: list[NeighborRecord] = field(default_factory=list)
    weight: float = 1.0
    sources: tuple[int, ...] = ()
    payload: bytes = b""

    def neighbor_ranks(self) -> set[int]:
        return {n.rank for n in self.neighbors}


@dataclass
class ProxyForest:
    domain: Domain
    ranks: list[dict[int, ProxyBlock]]
    links: list[dict[int, list[int]]]

    @property
    def size(self) -> int:
        return len(self.ranks)

    def blocks(self):
        for local in self.ranks:
            yield from local.values()

    def block_count(self) -> int:
        return sum(len(r) for r in self.ranks)

    def owners(self) -> dict[int, int]:
        return {b.id: b.owner for b in self.blocks()}

    def level_counts(self) -> list[int]:
        counts = [0] * (self.domain.max_levels + 1)
        for b in self.blocks():
            counts[b.level] += 1
        return counts

    def per_rank_level_counts(self) -> list[list[int]]:
        out = []
        for local in self.ranks:
            counts = [0] * (self.domain.max_levels + 1)
            for b in local.values():
                counts[b.level] += 1
            out.append(counts)
        return out

    def copy(self) -> "ProxyForest":
        ranks = [
            {
                pid: ProxyBlock(p.id, p.level, p.owner, list(p.neighbors), p.weight, p.sources, p.payload)
                for pid, p in local.items()
            }
            for local in self.ranks
        ]
        links = [{bid: list(t) for bid, t in local.items()} for local in self.links]
        return ProxyForest(self.domain, ranks, links)


def proxy_ids(domain: Domain, bid: int, target: int) -> list[int]:
    """Proxy block(s) an actual block becomes: itself, its children, or its parent."""
    level = domain.level(bid)
    if target == level:
        return [bid]
    if target == level + 1:
        return domain.children(bid)
    if target == level - 1:
        return [domain.parent(bid)]
    raise ContractError(f"target level {target} illegal for block {bid:#x} at level {level}")


# -- construction ----------------------------------------------------------------


def build_proxy_program(ctx: RankContext, local: dict[int, Block], targets: dict[int, int], domain: Domain):
    """Rank program; returns ``(proxies, links)`` for this rank."""
    rank = ctx.rank
    ctx.set_neighbors(r for b in local.values() for r in b.neighbor_ranks())
    nrank = {}
    for b in local.values():
        for n in b.neighbors:
            nrank[n.id] = n.rank

    def owner_of(bid):
        return rank if bid in local else nrank.get(bid)

    delta = {}
    merge_owner = {}
    for bid in sorted(local):
        b = local[bid]
        d = targets[bid] - b.level
        if d not in (-1, 0, 1):
            raise ContractError(f"target level change {d} for block {bid:#x}")
        delta[bid] = d
        if d < 0:
            first = domain.siblings(bid)[0]
            owner = owner_of(first)
            if owner is None:
                raise BalanceError(f"merge group of {bid:#x} is incomplete", (bid, first))
            merge_owner[bid] = owner

    # round 1: tell neighbor ranks what every boundary block turns into
    boundary: dict[int, list[int]] = {}
    for bid in sorted(local):
        for r in sorted(local[bid].neighbor_ranks() - {rank}):
            boundary.setdefault(r, []).append(bid)
    msgs = {
        r: b"".join(_INFO.pack(bid, delta[bid], merge_owner.get(bid, rank)) for bid in bids)
        for r, bids in boundary.items()
    }
    got = yield from neighbor_exchange(ctx, msgs, TAG_INFO)
    info = {bid: (delta[bid], merge_owner.get(bid, rank), rank) for bid in local}
    for src in sorted(got):
        buf = got[src]
        for off in range(0, len(buf), _INFO.size):
            bid, d, mo = _INFO.unpack_from(buf, off)
            info[bid] = (d, mo, src)

    def proxies_of(bid):
        d, mo, owner = info[bid]
        level = domain.level(bid)
        return [(pid, mo if d < 0 else owner) for pid in proxy_ids(domain, bid, level + d)]

    # merge groups must be complete and consistent
    for bid, d in delta.items():
        if d < 0:
            for s in domain.siblings(bid):
                if s not in info or info[s][0] != -1:
                    raise BalanceError(f"block {bid:#x} merges but sibling {s:#x} does not", (bid, s))

    # round 2: siblings away from the merged owner relay their neighborhood
    relay: dict[int, list[bytes]] = {}
    for bid in sorted(local):
        if delta[bid] < 0 and merge_owner[bid] != rank:
            parent = domain.parent(bid)
            cand = set()
            for n in local[bid].neighbors:
                cand.update(proxies_of(n.id))
            relay.setdefault(merge_owner[bid], []).extend(_RELAY.pack(parent, pid, o) for pid, o in sorted(cand))
    msgs = {r: b"".join(items) for r, items in relay.items()}
    got = yield from neighbor_exchange(ctx, msgs, TAG_RELAY)
    relayed: dict[int, set[tuple[int, int]]] = {}
    for src in sorted(got):
        buf = got[src]
        for off in range(0, len(buf), _RELAY.size):
            parent, pid, o = _RELAY.unpack_from(buf, off)
            relayed.setdefault(parent, set()).add((pid, o))

    proxies: dict[int, ProxyBlock] = {}
    links: dict[int, list[int]] = {}
    origins: dict[int, list[int]] = {}
    for bid in sorted(local):
        b = local[bid]
        d = delta[bid]
        if d == 0:
            proxies[bid] = ProxyBlock(bid, b.level, rank, sources=(rank,))
            origins[bid] = [bid]
            links[bid] = [rank]
        elif d > 0:
            for child in domain.children(bid):
                proxies[child] = ProxyBlock(child, b.level + 1, rank, sources=(rank,))
                origins[child] = [bid]
            links[bid] = [rank] * domain.children_per_split
        else:
            links[bid] = [merge_owner[bid]]
            if merge_owner[bid] == rank and domain.child_digit(bid) == 0:
                parent = domain.parent(bid)
                sibs = domain.siblings(bid)
                proxies[parent] = ProxyBlock(parent, b.level - 1, rank, sources=tuple(owner_of(s) for s in sibs))
                origins[parent] = [s for s in sibs if s in local]

    for pid in sorted(proxies):
        p = proxies[pid]
        cand = set()
        for a in origins[pid]:
            cand.update(proxies_of(a))
            for n in local[a].neighbors:
                cand.update(proxies_of(n.id))
        cand.update(relayed.get(pid, ()))
        recs = []
        for qid, owner in cand:
            if qid == pid:
                continue
            kind = domain.touch_kind(pid, qid)
            if kind is None:
                continue
            if abs(domain.level(qid) - p.level) > 1:
                raise BalanceError(f"proxy blocks {pid:#x} and {qid:#x} violate 2:1 balance", (pid, qid))
            recs.append(NeighborRecord(qid, owner, kind))
        recs.sort()
        p.neighbors = recs
    return proxies, links


def build_proxy(forest: BlockForest, targets, net: RankNetwork | None = None, stage: str = "proxy") -> ProxyForest:
    """Run the construction program on every rank; ``targets`` is per-rank or global."""
    net = net or RankNetwork(forest.size)
    if isinstance(targets, dict):
        targets = [{bid: targets[bid] for bid in local} for local in forest.ranks]
    args = [(forest.ranks[r], targets[r], forest.domain) for r in range(forest.size)]
    results = net.run(build_proxy_program, stage, args)
    return ProxyForest(forest.domain, [r[0] for r in results], [r[1] for r in results])


def default_weight(rank: int, block: ProxyBlock) -> float:
    return 1.0


def level_workload(rank: int, block: ProxyBlock) -> float:
    """Workload of a block under level subcycling: ``2^level``."""
    return float(1 << block.level)


def set_proxy_weights(proxy: ProxyForest, callback=default_weight) -> ProxyForest:
    """Assign weights rank-locally (in place); returns ``proxy``."""
    for rank, local in enumerate(proxy.ranks):
        for pid in sorted(local):
            w = float(callback(rank, local[pid]))
            if not w >= 0.0:
                raise ContractError(f"weight {w} of proxy block {pid:#x} is negative")
            local[pid].weight = w
    return proxy


def set_proxy_payload(block: ProxyBlock, data: bytes) -> None:
    if len(data) > PAYLOAD_CAP:
        raise ContractError(f"proxy payload of {len(data)} bytes exceeds the {PAYLOAD_CAP}-byte cap")
    block.payload = bytes(data)


# -- audits and dumps --------------------------------------------------------------


def audit_links(forest: BlockForest, proxy: ProxyForest) -> None:
    """Global check that actual->proxy and proxy->actual links agree (test tooling)."""
    domain = forest.domain
    where = proxy.owners()
    for rank, local in enumerate(proxy.ranks):
        for pid, p in local.items():
            if p.owner != rank:
                raise AuditError(f"proxy {pid:#x} stored on rank {rank} claims owner {p.owner}")
    seen = set()
    for rank, local in enumerate(forest.ranks):
        links = proxy.links[rank]
        if set(links) != set(local):
            raise AuditError(f"rank {rank} link table does not cover its actual blocks")
        for bid, b in local.items():
            tgt = links[bid]
            level = b.level
            if bid in where:
                pids = [bid]
            elif level < domain.max_levels and domain.children(bid)[0] in where:
                pids = domain.children(bid)
            elif level > 0 and domain.parent(bid) in where:
                pids = [domain.parent(bid)]
            else:
                pids = None
            if pids is None or len(pids) != len(tgt):
                raise AuditError(f"actual block {bid:#x} links to {tgt} but no matching proxy exists")
            for pid, r in zip(pids, tgt):
                if where.get(pid) != r:
                    raise AuditError(f"actual block {bid:#x} expects proxy {pid:#x} on rank {r}, found {where.get(pid)}")
                p = proxy.ranks[r][pid]
                if len(p.sources) == 1:
                    ok = p.sources[0] == rank
                else:
                    ok = p.sources[domain.child_digit(bid)] == rank
                if not ok:
                    raise AuditError(f"proxy {pid:#x} sources {p.sources} do not name rank {rank} for {bid:#x}")
                seen.add(pid)
    if seen != set(where):
        raise AuditError("some proxy blocks have no actual source")


def dumps_proxy(proxy: ProxyForest) -> str:
    lines = []
    for p in sorted(proxy.blocks(), key=lambda p: p.id):
        extra = "sources=[" + ",".join(str(s) for s in p.sources) + "]"
        lines.append(dump_block_line(p.id, p.level, p.owner, p.weight, p.neighbors, extra))
    return "\n".join(lines) + ("\n" if lines else "")
