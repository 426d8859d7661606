"""Distributed block forest: blocks, neighbor records and global set-up helpers.

``BlockForest`` keeps one ``{block_id: Block}`` map per rank.  Rank-local
programs only ever touch their own map; the global helpers in this module
(construction, neighborhood computation, audits, dumps) are set-up and test
tooling that look at every rank at once.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import dataclass, field
from typing import Any, NamedTuple

from .domain import Adjacency, Domain
from .errors import BalanceError, ContractError


class NeighborRecord(NamedTuple):
    id: int
    rank: int
    kind: Adjacency


@dataclass(slots=True)
class Block:
    id: int
    level: int
    owner: int
    neighbors: list[NeighborRecord] = field(default_factory=list)
    weight: float = 1.0
    target_level: int | None = None
    data: dict[int, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.target_level is None:
            self.target_level = self.level

    def neighbor_ranks(self) -> set[int]:
        return {n.rank for n in self.neighbors}


@dataclass
class BlockForest:
    domain: Domain
    ranks: list[dict[int, Block]]
    registry: Any = None

    @property
    def size(self) -> int:
        return len(self.ranks)

    def blocks(self):
        for local in self.ranks:
            yield from local.values()

    def block_count(self) -> int:
        return sum(len(r) for r in self.ranks)

    def ids(self) -> set[int]:
        return {b.id for b in self.blocks()}

    def owners(self) -> dict[int, int]:
        return {b.id: b.owner for b in self.blocks()}

    def find(self, bid: int) -> Block:
        for local in self.ranks:
            if bid in local:
                return local[bid]
        raise KeyError(f"block {bid:#x} not in forest")

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

    def copy(self) -> "BlockForest":
        ranks = []
        for local in self.ranks:
            ranks.append(
                {
                    bid: Block(
                        b.id, b.level, b.owner, list(b.neighbors), b.weight, b.target_level, dict(b.data)
                    )
                    for bid, b in local.items()
                }
            )
        return BlockForest(self.domain, ranks, self.registry)

    def deepcopy(self) -> "BlockForest":
        return BlockForest(self.domain, copy.deepcopy(self.ranks), self.registry)


# -- construction -------------------------------------------------------------


def from_owners(domain: Domain, owners: dict[int, int], size: int | None = None, neighbors=True) -> BlockForest:
    """Build a forest from a complete ``{block_id: rank}`` tiling."""
    if size is None:
        size = max(owners.values(), default=0) + 1
    ranks: list[dict[int, Block]] = [{} for _ in range(size)]
    for bid in sorted(owners):
        r = owners[bid]
        if not 0 <= r < size:
            raise ContractError(f"owner {r} of {bid:#x} outside 0..{size - 1}")
        ranks[r][bid] = Block(bid, domain.level(bid), r)
    forest = BlockForest(domain, ranks)
    if neighbors:
        compute_neighborhood(forest)
    return forest


def uniform_ids(domain: Domain, level: int = 0) -> list[int]:
    ids = [domain.make_id(r) for r in range(domain.root_count)]
    for _ in range(level):
        ids = [c for bid in ids for c in domain.children(bid)]
    return ids


def ripple_balance(domain: Domain, ids, changed=None) -> set[int]:
    """Split blocks until the id set is 2:1 balanced (faces, edges, corners).

    A leaf at level l needs every cell around its parent to be covered at
    level l-1 or finer; coarser leaves there are split (worklist ripple).
    ``changed`` restricts the initial worklist when only a few leaves are new.
    """
    leaves = set(ids)
    work = sorted(leaves if changed is None else changed, key=lambda b: domain.level(b))
    while work:
        bid = work.pop()
        if bid not in leaves:
            continue
        lvl = domain.level(bid)
        if lvl < 2:
            continue
        plevel, xyz = domain.coords(domain.parent(bid))
        for delta in domain.directions():
            probe = domain.wrap(plevel, tuple(c + d for c, d in zip(xyz, delta)))
            if probe is None:
                continue
            cell = domain.id_from_coords(plevel, probe)
            if cell in leaves:
                continue
            anc = _ancestor_in(domain, leaves, cell)
            if anc is None:
                continue
            leaves.discard(anc)
            kids = domain.children(anc)
            leaves.update(kids)
            work.append(bid)
            work.extend(kids)
    return leaves


def _ancestor_in(domain: Domain, leaves: set[int], cell: int):
    bid = cell
    while domain.level(bid) > 0:
        bid >>= domain.dim
        if bid in leaves:
            return bid
    return None


def _touching_children(domain: Domain, level: int, xyz, delta, probe):
    if level >= domain.max_levels:
        return []
    offsets = []
    for d in delta:
        offsets.append((0,) if d == 1 else (1,) if d == -1 else (0, 1))
    out = []
    for off in itertools.product(*offsets):
        child = tuple(2 * p + o for p, o in zip(probe, off))
        out.append(domain.id_from_coords(level + 1, child))
    return out


def _touching(domain: Domain, leaves, bid: int, strict: bool = True):
    """Ids of leaves touching ``bid``; a level jump above one raises ``BalanceError``."""
    level, xyz = domain.coords(bid)
    found = set()
    for delta in domain.directions():
        probe = domain.wrap(level, tuple(c + d for c, d in zip(xyz, delta)))
        if probe is None:
            continue
        cell = domain.id_from_coords(level, probe)
        if cell in leaves:
            found.add(cell)
            continue
        anc = _ancestor_in(domain, leaves, cell)
        if anc is not None:
            if strict and level - domain.level(anc) > 1:
                raise BalanceError(f"blocks {bid:#x} and {anc:#x} violate 2:1 balance", (bid, anc))
            found.add(anc)
            continue
        for child in _touching_children(domain, level, xyz, delta, probe):
            if child in leaves:
                found.add(child)
            elif strict:
                deeper = _deeper_leaf(domain, leaves, child)
                raise BalanceError(f"blocks {bid:#x} and {deeper:#x} violate 2:1 balance", (bid, deeper))
    found.discard(bid)
    return [f for f in found if domain.touch_kind(bid, f) is not None]


def _deeper_leaf(domain: Domain, leaves, cell: int):
    frontier = [cell]
    while frontier:
        nxt = []
        for c in frontier:
            if c in leaves:
                return c
            if domain.level(c) < domain.max_levels:
                nxt.extend(domain.children(c))
        frontier = nxt
    return cell


def compute_neighborhood(forest: BlockForest) -> BlockForest:
    """Populate neighbor records of every block from global geometry (in place)."""
    domain = forest.domain
    owners = forest.owners()
    leaves = set(owners)
    for local in forest.ranks:
        for b in local.values():
            recs = []
            for other in _touching(domain, leaves, b.id, strict=True):
                recs.append(NeighborRecord(other, owners[other], domain.touch_kind(b.id, other)))
            recs.sort()
            b.neighbors = recs
    return forest


def check_two_to_one(forest_or_ids, domain: Domain | None = None) -> bool:
    if isinstance(forest_or_ids, BlockForest):
        domain = forest_or_ids.domain
        leaves = forest_or_ids.ids()
    else:
        leaves = set(forest_or_ids)
    try:
        for bid in leaves:
            _touching(domain, leaves, bid, strict=True)
    except BalanceError:
        return False
    return True


def tiles_domain(forest_or_ids, domain: Domain | None = None) -> bool:
    """Volume accounting per root block: sum of (2^d)^-level equals 1."""
    if isinstance(forest_or_ids, BlockForest):
        domain = forest_or_ids.domain
        ids = [b.id for b in forest_or_ids.blocks()]
    else:
        ids = list(forest_or_ids)
    if len(set(ids)) != len(ids):
        return False
    full = 1 << (domain.dim * domain.max_levels)
    volume = [0] * domain.root_count
    seen = set(ids)
    for bid in ids:
        lv = domain.level(bid)
        volume[domain.root_of(bid)] += 1 << (domain.dim * (domain.max_levels - lv))
        anc = bid
        while domain.level(anc) > 0:
            anc >>= domain.dim
            if anc in seen:
                return False
    return all(v == full for v in volume)


def neighbor_symmetry_errors(forest: BlockForest) -> list[tuple[int, int]]:
    table = {b.id: b for b in forest.blocks()}
    bad = []
    for b in table.values():
        ids = [n.id for n in b.neighbors]
        if len(ids) != len(set(ids)) or b.id in ids:
            bad.append((b.id, b.id))
        for n in b.neighbors:
            other = table.get(n.id)
            if other is None or other.owner != n.rank:
                bad.append((b.id, n.id))
                continue
            back = [m for m in other.neighbors if m.id == b.id]
            if len(back) != 1 or back[0].kind != n.kind or back[0].rank != b.owner:
                bad.append((b.id, n.id))
    return bad


def remote_records(forest: BlockForest, rank: int) -> set[int]:
    """Distinct remote block ids a rank holds any record of."""
    local = forest.ranks[rank]
    return {n.id for b in local.values() for n in b.neighbors if n.id not in local}


# -- dump format ----------------------------------------------------------------


def dump_block_line(bid, level, owner, weight, neighbors, extra="") -> str:
    parts = [f"{bid:x}", str(level), str(owner), repr(float(weight)), str(len(neighbors))]
    parts += [f"{n.id:x}:{n.rank}:{n.kind.name.lower()}" for n in neighbors]
    if extra:
        parts.append(extra)
    return " ".join(parts)


def dumps(forest: BlockForest) -> str:
    lines = []
    for b in sorted(forest.blocks(), key=lambda b: b.id):
        lines.append(dump_block_line(b.id, b.level, b.owner, b.weight, b.neighbors))
    return "\n".join(lines) + ("\n" if lines else "")


def loads(domain: Domain, text: str, size: int | None = None) -> BlockForest:
    blocks = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        bid, level, owner, weight, count = int(tok[0], 16), int(tok[1]), int(tok[2]), float(tok[3]), int(tok[4])
        recs = []
        for item in tok[5 : 5 + count]:
            nid, nrank, kind = item.split(":")
            recs.append(NeighborRecord(int(nid, 16), int(nrank), Adjacency.parse(kind)))
        blocks.append(Block(bid, level, owner, recs, weight))
    if size is None:
        size = max((b.owner for b in blocks), default=0) + 1
    ranks: list[dict[int, Block]] = [{} for _ in range(size)]
    for b in blocks:
        ranks[b.owner][b.id] = b
    return BlockForest(domain, ranks)


def random_balanced_ids(domain: Domain, rng, max_blocks: int = 512, p_split: float = 0.35) -> set[int]:
    """Random 2:1-balanced leaf set: repeated random splits followed by ripple balancing."""
    leaves = set(uniform_ids(domain))
    for _ in range(domain.max_levels):
        for bid in sorted(leaves):
            if domain.level(bid) >= domain.max_levels or rng.random() >= p_split:
                continue
            kids = domain.children(bid)
            grown = ripple_balance(domain, (leaves - {bid}) | set(kids), changed=kids)
            if len(grown) > max_blocks:
                continue
            leaves = grown
    return leaves
