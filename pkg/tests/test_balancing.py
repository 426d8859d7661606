from __future__ import annotations

import math
import random
import struct

import pytest

from blockamr.balancing import (
    DiffusionBalancer,
    FlowState,
    RankView,
    SFCBalancer,
    alpha,
    decode_proxy,
    encode_proxy,
    flow_program,
    make_balancer,
    pull_requests,
    push_marks,
    rank_of_position,
    run_balancer,
    split_counts,
    weighted_ranks,
)
from blockamr.curves import curve_key
from blockamr.domain import Adjacency, Domain
from blockamr.errors import ContractError, ProtocolError
from blockamr.forest import NeighborRecord, from_owners, random_balanced_ids, uniform_ids
from blockamr.proxy import PAYLOAD_CAP, ProxyBlock, audit_links, build_proxy, set_proxy_weights
from blockamr.sim import RankNetwork, neighbor_exchange, run_supersteps

from oracles import items_from_proxy, sequential_diffusion


def proxy_of(domain, owners, size, weight=None):
    f = from_owners(domain, owners, size)
    p = build_proxy(f, {b: domain.level(b) for b in owners})
    if weight is not None:
        set_proxy_weights(p, weight)
    return f, p


def per_level_max_ok(proxy):
    counts = proxy.per_rank_level_counts()
    for lvl, total in enumerate(proxy.level_counts()):
        if total and max(c[lvl] for c in counts) != math.ceil(total / proxy.size):
            return False
    return True


# -- SFC -------------------------------------------------------------------------------


def test_split_counts_and_positions():
    assert split_counts(10, 4) == [3, 3, 2, 2]
    assert [rank_of_position(g, 10, 4) for g in range(10)] == [0, 0, 0, 1, 1, 1, 2, 2, 3, 3]
    assert split_counts(3, 5) == [1, 1, 1, 0, 0]


def test_eight_blocks_four_ranks():
    d = Domain(2, (4, 2), 1)
    ids = uniform_ids(d, 0)
    _, p = proxy_of(d, {b: 0 for b in ids}, 4)
    out, _ = run_balancer(p, SFCBalancer("morton"))
    order = sorted(ids, key=lambda b: curve_key("morton")(d, b))
    assert [out.owners()[b] for b in order] == [0, 0, 1, 1, 2, 2, 3, 3]


@pytest.mark.parametrize("order", ["morton", "hilbert"])
def test_per_level_four_and_eight(order):
    d = Domain(2, (3, 2), 1)
    roots = sorted(uniform_ids(d, 0))
    ids = set(roots[:4]) | {c for r in roots[4:] for c in d.children(r)}
    _, p = proxy_of(d, {b: 0 for b in ids}, 4)
    out, _ = run_balancer(p, SFCBalancer(order))
    assert out.per_rank_level_counts() == [[1, 2]] * 4


@pytest.mark.parametrize("seed", range(10))
def test_sfc_segments_are_contiguous(seed):
    rng = random.Random(seed)
    d = Domain(3, (2, 1, 1), 3)
    ids = random_balanced_ids(d, rng, max_blocks=300)
    size = rng.randint(2, 9)
    order = rng.choice(["morton", "hilbert"])
    _, p = proxy_of(d, {b: rng.randrange(size) for b in ids}, size)
    out, _ = run_balancer(p, SFCBalancer(order))
    key = curve_key(order)
    owners = out.owners()
    for lvl in range(d.max_levels + 1):
        seq = sorted((b for b in ids if d.level(b) == lvl), key=lambda b: key(d, b))
        ranks = [owners[b] for b in seq]
        assert ranks == sorted(ranks)
        counts = [ranks.count(r) for r in range(size)]
        if seq:
            assert max(counts) - min(counts) <= 1
    assert per_level_max_ok(out)


def test_weighted_split_balances_weights():
    w = [1.0] * 6 + [3.0] * 2
    ranks = weighted_ranks(w, 3)
    assert ranks == sorted(ranks)
    sums = [sum(x for x, r in zip(w, ranks) if r == k) for k in range(3)]
    assert max(sums) - min(sums) <= max(w)
    assert weighted_ranks([0.0, 0.0], 2) == [0, 1]


TABLE1 = [
    # (per_level, weighted, bytes per rank for 100 blocks on 10 ranks)
    (True, True, 100 * 12),
    (True, False, 100 * 8),
    (False, True, 100 * 4),
    (False, False, 10 * 1),
]


@pytest.mark.parametrize("per_level,weighted,expect", TABLE1)
def test_table1_replicated_bytes(per_level, weighted, expect):
    d = Domain(2, (10, 10), 1)
    ids = sorted(uniform_ids(d, 0))
    _, p = proxy_of(d, {b: i // 10 for i, b in enumerate(ids)}, 10)
    net = RankNetwork(10)
    run_balancer(p, SFCBalancer("hilbert", per_level, weighted), net)
    for r in range(10):
        c = net.metrics.get(r, "balancing")
        assert c.replicated_bytes == expect
        assert c.all_gathers == 1


def test_make_balancer():
    assert isinstance(make_balancer("sfc:hilbert"), SFCBalancer)
    b = make_balancer("diffusion:pushpull")
    assert b.flow_iterations == 5
    assert make_balancer("diffusion:push").flow_iterations == 15
    with pytest.raises(ValueError):
        make_balancer("metis")
    with pytest.raises(ContractError):
        DiffusionBalancer("push", flow_iterations=0)


# -- flow ------------------------------------------------------------------------------


def run_flow(graph, loads, iterations):
    def prog(ctx):
        nbrs = sorted(graph[ctx.rank])
        ctx.set_neighbors(nbrs)
        state = FlowState(list(loads[ctx.rank]), len(nbrs), nbrs)
        yield from flow_program(ctx, state, iterations)
        return state

    return run_supersteps(len(graph), prog)[0]


def flow_oracle(graph, loads, iterations):
    """Scripted sequential evaluation of the flow iteration (snapshot semantics)."""
    n = len(graph)
    w = [list(x) for x in loads]
    f = {(i, j): [0.0] * len(w[0]) for i in range(n) for j in graph[i]}
    for _ in range(iterations):
        snap = [list(x) for x in w]
        for i in range(n):
            for j in sorted(graph[i]):
                a = 1.0 / (max(len(graph[i]), len(graph[j])) + 1)
                for l in range(len(w[i])):
                    step = a * (snap[i][l] - snap[j][l])
                    f[i, j][l] += step
                    w[i][l] -= step
    return f, w


def test_alpha():
    assert alpha(3, 5) == 1 / 6 == alpha(5, 3)
    assert alpha(1, 1) == 0.5


def test_two_rank_flow():
    states = run_flow({0: {1}, 1: {0}}, [(10.0,), (2.0,)], 1)
    assert states[0].flows[1] == [4.0]
    assert states[1].flows[0] == [-4.0]
    assert states[0].alphas[1] == 0.5


def test_path_flow_matches_oracle():
    graph = {0: {1}, 1: {0, 2}, 2: {1}}
    loads = [(9.0,), (3.0,), (0.0,)]
    states = run_flow(graph, loads, 2)
    f, w = flow_oracle(graph, loads, 2)
    for i in graph:
        for j in graph[i]:
            assert states[i].flows[j] == f[i, j]
    assert f[0, 1] == [3.0] and f[1, 2] == [2.0]
    assert [round(x[0], 12) for x in w] == [6.0, 4.0, 2.0]


@pytest.mark.parametrize("seed", range(8))
def test_flow_antisymmetry_and_conservation(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 12)
    graph = {i: set() for i in range(n)}
    for i in range(1, n):
        j = rng.randrange(i)
        graph[i].add(j)
        graph[j].add(i)
    for _ in range(n):
        a, b = rng.sample(range(n), 2)
        graph[a].add(b)
        graph[b].add(a)
    loads = [tuple(rng.uniform(0, 50) for _ in range(3)) for _ in range(n)]
    k = rng.randint(1, 15)
    states = run_flow(graph, loads, k)
    f, w = flow_oracle(graph, loads, k)
    for i in graph:
        for j in graph[i]:
            assert states[i].flows[j] == [-x for x in states[j].flows[i]]
            assert states[i].flows[j] == f[i, j]
    for l in range(3):
        before = math.fsum(x[l] for x in loads)
        assert math.isclose(math.fsum(x[l] for x in w), before, rel_tol=1e-9)


def test_zero_flow_iterations_rejected():
    with pytest.raises(ContractError):
        run_flow({0: {1}, 1: {0}}, [(1.0,), (1.0,)], 0)


# -- push and pull -----------------------------------------------------------------------


def unit_block(bid, nbrs=()):
    return ProxyBlock(bid, 0, 0, [NeighborRecord(n, r, Adjacency.FACE) for n, r in nbrs])


def test_push_nonpositive_flows():
    blocks = [unit_block(i) for i in range(3)]
    assert push_marks(0, blocks, {1: -1.0, 2: 0.0}, 3.0, 3.0) == {}


def test_push_trace():
    blocks = [unit_block(1), unit_block(2, [(9, 5)]), unit_block(3)]
    marks = push_marks(0, blocks, {5: 2.0, 6: -1.0}, 3.0, 3.0)
    assert list(marks.values()) == [5, 5]
    assert 2 in marks  # the block touching rank 5 fits best


def test_push_heavy_block_does_not_fit():
    b = unit_block(1)
    b.weight = 3.0
    assert push_marks(0, [b], {1: 2.0}, 3.0, 3.0) == {}


def test_push_avoids_recent_senders():
    blocks = [unit_block(i) for i in range(3)]
    assert push_marks(0, blocks, {1: 2.0}, 3.0, 3.0, avoid={1}) == {}


def test_pull_without_negative_flows():
    assert pull_requests({1: [(7, 1.0, 0)]}, {}, {1: 1.0}, 0.0, 2.0) == {}


def test_pull_trace():
    adverts = {1: [(10, 1.0, 4), (11, 1.0, 0)], 2: [(20, 1.0, 0)]}
    req = pull_requests(adverts, {10: 4, 11: 4, 20: 1}, {1: -1.0, 2: -1.0}, 0.0, 2.0)
    assert req == {1: [11], 2: [20]}


def line_forest():
    # roots (x, y) in a 3x2 grid; rank = x
    d = Domain(2, (3, 2), 1)
    owners = {b: d.coords(b)[1][0] for b in uniform_ids(d, 0)}
    return d, proxy_of(d, owners, 3)[1]


def run_pull(proxy, flows, nload, load, limit=10.0):
    bal = DiffusionBalancer("pushpull", per_level=False)

    def prog(ctx):
        view = RankView(ctx.rank, ctx.size, proxy.domain, dict(proxy.ranks[ctx.rank]), {})
        nbrs = sorted(view.neighbor_ranks())
        ctx.set_neighbors(nbrs)
        fs = FlowState([load[ctx.rank]], len(nbrs), nbrs)
        fs.flows = {j: [flows[ctx.rank].get(j, 0.0)] for j in nbrs}
        fs.neighbor_load = {j: (nload,) for j in nbrs}
        marks = yield from bal._pull(ctx, view, fs, [load[ctx.rank]], [limit])
        return marks

    return run_supersteps(proxy.size, prog)[0]


def test_pull_requests_from_two_neighbors_are_granted():
    d, p = line_forest()
    marks = run_pull(p, [{1: 1.0}, {0: -1.0, 2: -1.0}, {1: 1.0}], 5.0, [2.0, 2.0, 2.0])
    assert list(marks[0].values()) == [1]
    assert list(marks[2].values()) == [1]
    assert marks[1] == {}


def test_contested_block_goes_to_larger_flow():
    d, p = line_forest()
    marks = run_pull(p, [{1: -1.0}, {0: 1.0, 2: 2.0}, {1: -1.0}], 5.0, [2.0, 2.0, 2.0])
    assert marks[0] == marks[2] == {}
    assert list(marks[1].values()) == [2]


def test_request_for_unknown_block():
    d, p = line_forest()
    bal = DiffusionBalancer("pushpull", per_level=False)

    def prog(ctx):
        if ctx.rank != 1:
            ctx.set_neighbors([1])
            yield from neighbor_exchange(ctx, {}, 42)
            yield from neighbor_exchange(ctx, {1: struct.pack("<Q", 999)}, 43)
            return {}
        view = RankView(1, 3, d, dict(p.ranks[1]), {})
        ctx.set_neighbors([0, 2])
        fs = FlowState([2.0], 2, [0, 2], flows={0: [0.0], 2: [0.0]}, neighbor_load={0: (2.0,), 2: (2.0,)})
        return (yield from bal._pull(ctx, view, fs, [2.0], [2.0]))

    with pytest.raises(ProtocolError):
        run_supersteps(3, prog)


# -- whole diffusion balancer -------------------------------------------------------------


@pytest.mark.parametrize("mode", ["push", "pushpull"])
def test_balanced_input_takes_zero_iterations(mode):
    d = Domain(2, (4, 2), 1)
    ids = sorted(uniform_ids(d, 0))
    _, p = proxy_of(d, {b: i // 2 for i, b in enumerate(ids)}, 4)
    out, states = run_balancer(p, DiffusionBalancer(mode))
    assert states[0]["main_iterations"] == 0
    assert states[0]["reason"] == "converged"
    assert out.owners() == p.owners()


@pytest.mark.parametrize("mode", ["push", "pushpull"])
def test_two_rank_fixture_balances_in_two_steps(mode):
    # a refined corner concentrated on rank 0, as before the first balancing step
    d = Domain(2, (2, 1), 2)
    left = d.children(d.make_id(0))
    right = d.children(d.make_id(1))
    ids = set(left[1:]) | set(d.children(left[0])) | set(right)
    owners = {b: 0 for b in ids}
    owners.update({b: 1 for b in right})
    f, p = proxy_of(d, owners, 2)
    out, states = run_balancer(p, DiffusionBalancer(mode))
    assert states[0]["main_iterations"] <= 2
    assert per_level_max_ok(out)
    audit_links(f, out)


@pytest.mark.parametrize("mode", ["push", "pushpull"])
def test_diffusion_locality(mode):
    rng = random.Random(4)
    d = Domain(2, (4, 4), 3)
    ids = random_balanced_ids(d, rng, max_blocks=200)
    order = sorted(ids, key=lambda b: curve_key("morton")(d, b))
    f, p = proxy_of(d, {b: min(7, i * 8 // len(order) + (i % 5 == 0)) for i, b in enumerate(order)}, 8)
    net = RankNetwork(8)
    out, states = run_balancer(p, DiffusionBalancer(mode), net)
    audit_links(f, out)
    for r in range(8):
        c = net.metrics.get(r, "balancing")
        assert c.all_gathers == 0
        assert c.collectives <= 2 * states[r]["invocations"]


def test_proxy_wire_bound():
    rng = random.Random(1)
    d = Domain(3, (2, 2, 2), 4)
    ids = random_balanced_ids(d, rng, max_blocks=400)
    _, p = proxy_of(d, {b: rng.randrange(16) for b in ids}, 16)
    for q in p.blocks():
        buf = encode_proxy(d, 16, q)
        assert len(buf) <= 8 + 4 + 8 * len(q.neighbors) + PAYLOAD_CAP
        back, off = decode_proxy(d, 16, buf, 0, q.owner)
        assert off == len(buf)
        assert (back.id, back.weight, back.sources, back.neighbors) == (q.id, q.weight, q.sources, q.neighbors)
        q.payload = bytes(range(20))
        back, _ = decode_proxy(d, 16, encode_proxy(d, 16, q), 0, q.owner)
        assert back.payload == q.payload


def oracle_instance(seed):
    rng = random.Random(seed)
    d = Domain(2, (rng.randint(1, 4), rng.randint(1, 4)), rng.randint(1, 3))
    ids = sorted(random_balanced_ids(d, rng, max_blocks=rng.randint(4, 200)))
    size = min(rng.randint(1, 32), len(ids))
    while len(ids) > 8 * size:
        size += 1
    slots = [r for r in range(size) for _ in range(8)]
    rng.shuffle(slots)
    owners = dict(zip(ids, slots))
    wmode = rng.choice(["unit", "int", "real"])

    def weight(r, q):
        if wmode == "unit":
            return 1.0
        return float(rng.randint(1, 3)) if wmode == "int" else rng.uniform(0.5, 2.0)

    f, p = proxy_of(d, owners, size, weight)
    mode = rng.choice(["push", "pushpull"])
    per_level = rng.random() < 0.7
    bal = DiffusionBalancer(mode, per_level=per_level, max_main_iterations=rng.choice([3, 20]))
    return d, f, p, bal, size


@pytest.mark.parametrize("chunk", range(10))
def test_distributed_diffusion_equals_sequential_oracle(chunk):
    for seed in range(50 * chunk, 50 * chunk + 50):
        d, f, p, bal, size = oracle_instance(seed)
        items, owner = items_from_proxy(p)
        out, states = run_balancer(p, bal)
        nlev = d.max_levels + 1 if bal.per_level else 1
        ref, inv = sequential_diffusion(items, owner, size, nlev, bal.mode, bal.flow_iterations, bal.max_main_iterations, bal.per_level)
        assert out.owners() == ref, seed
        assert states[0]["main_iterations"] == inv, seed
        audit_links(f, out)
