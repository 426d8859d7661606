from __future__ import annotations

import random

import pytest

from blockamr.domain import Domain
from blockamr.errors import BalanceError, ContractError
from blockamr.forest import from_owners, neighbor_symmetry_errors, random_balanced_ids, tiles_domain, uniform_ids
from blockamr.proxy import (
    PAYLOAD_CAP,
    audit_links,
    build_proxy,
    dumps_proxy,
    level_workload,
    proxy_ids,
    set_proxy_payload,
    set_proxy_weights,
)
from blockamr.refinement import mark_targets, random_marker, refine_sequential
from blockamr.sim import RankNetwork

from oracles import apply_targets, brute_neighbors


def small_forest(size=2):
    d = Domain(2, (2, 2), 3)
    ids = sorted(uniform_ids(d, 1))
    return from_owners(d, {b: i * size // len(ids) for i, b in enumerate(ids)}, size)


def keep(forest):
    return {b.id: b.level for b in forest.blocks()}


def test_identity_is_isomorphic():
    f = small_forest()
    p = build_proxy(f, keep(f))
    assert p.owners() == f.owners()
    for b in f.blocks():
        q = p.ranks[b.owner][b.id]
        assert [(n.id, n.kind, n.rank) for n in q.neighbors] == [(n.id, n.kind, n.rank) for n in b.neighbors]
        assert q.sources == (b.owner,)
        assert p.links[b.owner][b.id] == [b.owner]
    audit_links(f, p)


def test_split_children_stay_with_parent():
    f = small_forest()
    bid = max(f.ids())
    t = keep(f)
    t[bid] += 1
    p = build_proxy(f, t)
    owner = f.owners()[bid]
    kids = f.domain.children(bid)
    assert all(p.owners()[k] == owner for k in kids)
    assert p.links[owner][bid] == [owner] * 4
    assert all(p.ranks[owner][k].sources == (owner,) for k in kids)
    audit_links(f, p)


def test_merge_across_two_ranks():
    d = Domain(2, (1, 1), 2)
    kids = d.children(d.make_id(0))
    f = from_owners(d, {k: (0 if i < 2 else 1) for i, k in enumerate(kids)}, 2)
    p = build_proxy(f, {k: 0 for k in kids})
    root = d.make_id(0)
    assert p.owners() == {root: 0}
    assert p.ranks[0][root].sources == (0, 0, 1, 1)
    assert p.links[1] == {kids[2]: [0], kids[3]: [0]}
    audit_links(f, p)


def test_merge_owner_is_lowest_sibling():
    d = Domain(2, (1, 1), 2)
    kids = d.children(d.make_id(0))
    f = from_owners(d, {k: 3 - i for i, k in enumerate(kids)}, 4)
    p = build_proxy(f, {k: 0 for k in kids})
    assert p.owners() == {d.make_id(0): 3}


def test_proxy_ids():
    d = Domain(2, (1, 1), 2)
    root = d.make_id(0)
    assert proxy_ids(d, root, 0) == [root]
    assert proxy_ids(d, root, 1) == d.children(root)
    assert proxy_ids(d, d.children(root)[2], 0) == [root]
    with pytest.raises(ContractError):
        proxy_ids(d, root, 2)


def test_inconsistent_targets_raise():
    d = Domain(2, (2, 1), 3)
    kids = d.children(d.make_id(1))
    ids = {d.make_id(0), *kids}
    f = from_owners(d, {b: 0 for b in ids})
    t = {b: d.level(b) for b in ids}
    t[kids[0]] = 2  # the coarse left root would face level 2
    with pytest.raises(BalanceError):
        build_proxy(f, t)


@pytest.mark.parametrize("seed", range(25))
def test_random_proxies_match_brute_force(seed):
    rng = random.Random(seed)
    dim = 2 + seed % 2
    d = Domain(dim, tuple(rng.randint(1, 2) for _ in range(dim)), 3)
    ids = random_balanced_ids(d, rng, max_blocks=150)
    size = rng.randint(1, 6)
    f = from_owners(d, {b: rng.randrange(size) for b in ids}, size)
    props = mark_targets(f, random_marker(seed, 0.2, 0.5, d.max_levels))
    targets = refine_sequential(f, props)
    p = build_proxy(f, targets)
    audit_links(f, p)
    expect = apply_targets(d, targets)
    assert set(p.owners()) == expect
    assert tiles_domain(list(expect), d)
    ref = brute_neighbors(d, expect)
    owners = p.owners()
    for q in p.blocks():
        assert {n.id: int(n.kind) for n in q.neighbors} == ref[q.id]
        assert all(n.rank == owners[n.id] for n in q.neighbors)
    assert neighbor_symmetry_errors(p) == []


def test_construction_talks_only_to_neighbors():
    f = small_forest(size=4)
    net = RankNetwork(4)
    build_proxy(f, keep(f), net)
    assert net.metrics.stage_total("proxy").collectives == 0
    for r in range(4):
        nbrs = {n.rank for b in f.ranks[r].values() for n in b.neighbors} - {r}
        assert net.metrics.get(r, "proxy").p2p_msgs <= 2 * len(nbrs)


def test_weights():
    f = small_forest()
    t = keep(f)
    t[max(t)] += 1
    p = build_proxy(f, t)
    assert all(q.weight == 1.0 for q in p.blocks())
    set_proxy_weights(p, level_workload)
    assert {q.level: q.weight for q in p.blocks()} == {1: 2.0, 2: 4.0}
    d3 = Domain(3, (1, 1, 1), 3)
    deep = from_owners(d3, {b: 0 for b in uniform_ids(d3, 3)})
    assert {q.weight for q in set_proxy_weights(build_proxy(deep, keep(deep)), level_workload).blocks()} == {8.0}
    with pytest.raises(ContractError):
        set_proxy_weights(p, lambda r, q: -1.0)


def test_payload_cap():
    f = small_forest()
    p = build_proxy(f, keep(f))
    q = next(p.blocks())
    set_proxy_payload(q, bytes(PAYLOAD_CAP))
    with pytest.raises(ContractError):
        set_proxy_payload(q, bytes(PAYLOAD_CAP + 1))


def test_dump_lists_sources():
    d = Domain(2, (1, 1), 2)
    kids = d.children(d.make_id(0))
    f = from_owners(d, {k: i % 2 for i, k in enumerate(kids)}, 2)
    text = dumps_proxy(build_proxy(f, {k: 0 for k in kids}))
    assert text.strip().endswith("sources=[0,1,0,1]")
