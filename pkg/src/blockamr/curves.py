"""Morton and Hilbert keys for blocks of a forest of octrees.

Both keys are normalised to ``max_levels`` so that blocks from different
levels sort in depth-first curve order.  Root blocks are concatenated in
row-major order.

The Hilbert traversal uses the entry-point/direction state machine of
Hamilton's compact Hilbert index formulation; per-dimension lookup tables
are built once from it.
"""

from __future__ import annotations

from functools import lru_cache

from .domain import Domain


def _rotl(x: int, r: int, n: int) -> int:
    r %= n
    mask = (1 << n) - 1
    return ((x << r) | (x >> (n - r))) & mask


def _rotr(x: int, r: int, n: int) -> int:
    return _rotl(x, n - (r % n), n)


def _gray(i: int) -> int:
    return i ^ (i >> 1)


def _gray_inverse(g: int) -> int:
    i = g
    shift = 1
    while g >> shift:
        i ^= g >> shift
        shift += 1
    return i


def _trailing_ones(i: int) -> int:
    n = 0
    while i & 1:
        n += 1
        i >>= 1
    return n


def _entry(w: int) -> int:
    return 0 if w == 0 else _gray(2 * ((w - 1) // 2))


def _direction(w: int, n: int) -> int:
    if w == 0:
        return 0
    if w % 2 == 0:
        return _trailing_ones(w - 1) % n
    return _trailing_ones(w) % n


@lru_cache(maxsize=None)
def hilbert_table(dim: int):
    """State table ``{state: (position_of_digit, next_state_of_digit)}``.

    A state is ``(entry, direction)``; the initial state is ``(0, 0)``.
    """
    table = {}
    todo = [(0, 0)]
    while todo:
        state = todo.pop()
        if state in table:
            continue
        e, d = state
        pos = [0] * (1 << dim)
        nxt = [None] * (1 << dim)
        for digit in range(1 << dim):
            w = _gray_inverse(_rotr(digit ^ e, d + 1, dim))
            pos[digit] = w
            nxt[digit] = (e ^ _rotl(_entry(w), d + 1, dim), (d + _direction(w, dim) + 1) % dim)
            todo.append(nxt[digit])
        table[state] = (tuple(pos), tuple(nxt))
    return table


def morton_key(domain: Domain, bid: int) -> int:
    """Depth-first Morton position of ``bid`` (root-major, normalised depth)."""
    level = domain.level(bid)
    shift = domain.dim * (domain.max_levels - level)
    # strip the marker bit; the remaining bits are already root|digits
    body = bid ^ (1 << (domain.root_bits + domain.dim * level))
    return body << shift


def hilbert_key(domain: Domain, bid: int) -> int:
    level = domain.level(bid)
    dim = domain.dim
    table = hilbert_table(dim)
    mask = (1 << dim) - 1
    state = (0, 0)
    key = domain.root_of(bid)
    for i in range(level):
        digit = (bid >> (dim * (level - 1 - i))) & mask
        pos, nxt = table[state]
        key = (key << dim) | pos[digit]
        state = nxt[digit]
    return key << (dim * (domain.max_levels - level))


def interleave(xyz, bits: int) -> int:
    """Bit-interleave coordinates (x in the least significant slot)."""
    key = 0
    dim = len(xyz)
    for b in range(bits):
        for a, c in enumerate(xyz):
            key |= ((c >> b) & 1) << (b * dim + a)
    return key


CURVES = {"morton": morton_key, "hilbert": hilbert_key}


def curve_key(order: str):
    try:
        return CURVES[order]
    except KeyError:
        raise ValueError(f"unknown curve {order!r}; expected one of {sorted(CURVES)}") from None
