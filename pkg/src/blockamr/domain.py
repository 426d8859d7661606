"""Domain description and the packed block-id scheme.

A block id is a plain ``int``::

    1 | root index (root_bits) | digit_1 | digit_2 | ... | digit_level

The leading marker bit makes the level recoverable from the bit length.
Each child digit has ``dim`` bits; bit ``a`` of a digit is the offset of
the child along axis ``a`` (x is bit 0).  Root blocks are numbered
row-major with x fastest.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field
from functools import cached_property

from .errors import CapacityError, DomainError

ID_BITS = 64


class Adjacency(enum.IntEnum):
    """How two blocks touch; ordered from strongest to weakest."""

    FACE = 0
    EDGE = 1
    CORNER = 2

    @property
    def strength(self) -> int:
        return (4, 2, 1)[self]

    @classmethod
    def parse(cls, text: str) -> "Adjacency":
        return cls[text.upper()]


@dataclass(frozen=True)
class Domain:
    dim: int
    root_grid: tuple[int, ...]
    max_levels: int
    periodic: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {self.dim}")
        grid = tuple(int(g) for g in self.root_grid)
        if len(grid) != self.dim or any(g < 1 for g in grid):
            raise ValueError(f"root grid {self.root_grid} invalid for d={self.dim}")
        object.__setattr__(self, "root_grid", grid)
        periodic = tuple(bool(p) for p in self.periodic) or (False,) * self.dim
        if len(periodic) != self.dim:
            raise ValueError("one periodic flag per axis required")
        object.__setattr__(self, "periodic", periodic)
        if self.max_levels < 0:
            raise ValueError("max_levels must be non-negative")
        if 1 + self.root_bits + self.dim * self.max_levels > ID_BITS:
            raise CapacityError(
                f"{self.max_levels} levels at d={self.dim} with {self.root_count} roots "
                f"exceed the {ID_BITS}-bit id budget"
            )

    # -- derived constants -------------------------------------------------

    @cached_property
    def root_count(self) -> int:
        n = 1
        for g in self.root_grid:
            n *= g
        return n

    @cached_property
    def root_bits(self) -> int:
        return (self.root_count - 1).bit_length()

    @cached_property
    def children_per_split(self) -> int:
        return 1 << self.dim

    @cached_property
    def id_bits(self) -> int:
        return 1 + self.root_bits + self.dim * self.max_levels

    @cached_property
    def _box_cache(self) -> dict:
        return {}

    # -- id encoding -------------------------------------------------------

    def make_id(self, root: int, path=()) -> int:
        if not 0 <= root < self.root_count:
            raise DomainError(f"root index {root} outside 0..{self.root_count - 1}")
        if len(path) > self.max_levels:
            raise CapacityError(f"path of length {len(path)} exceeds max_levels={self.max_levels}")
        bid = (1 << self.root_bits) | root
        nchild = self.children_per_split
        for digit in path:
            if not 0 <= digit < nchild:
                raise DomainError(f"child digit {digit} invalid for d={self.dim}")
            bid = (bid << self.dim) | digit
        return bid

    def decode(self, bid: int) -> tuple[int, tuple[int, ...]]:
        level = self.level(bid)
        mask = self.children_per_split - 1
        path = tuple((bid >> (self.dim * (level - 1 - i))) & mask for i in range(level))
        root = (bid >> (self.dim * level)) & ((1 << self.root_bits) - 1)
        return root, path

    def level(self, bid: int) -> int:
        extra = bid.bit_length() - 1 - self.root_bits
        if bid <= 0 or extra < 0 or extra % self.dim:
            raise DomainError(f"{bid:#x} is not a valid block id")
        return extra // self.dim

    def root_of(self, bid: int) -> int:
        return (bid >> (self.dim * self.level(bid))) & ((1 << self.root_bits) - 1)

    def parent(self, bid: int) -> int:
        if self.level(bid) < 1:
            raise DomainError("root blocks have no parent")
        return bid >> self.dim

    def children(self, bid: int) -> list[int]:
        if self.level(bid) >= self.max_levels:
            raise DomainError(f"block {bid:#x} already at max level {self.max_levels}")
        base = bid << self.dim
        return [base | c for c in range(self.children_per_split)]

    def child_digit(self, bid: int) -> int:
        return bid & (self.children_per_split - 1)

    def siblings(self, bid: int) -> list[int]:
        base = (bid >> self.dim) << self.dim
        return [base | c for c in range(self.children_per_split)]

    # -- geometry ----------------------------------------------------------

    def root_coords(self, root: int) -> tuple[int, ...]:
        coords = []
        for g in self.root_grid:
            coords.append(root % g)
            root //= g
        return tuple(coords)

    def root_index(self, coords) -> int:
        idx = 0
        for c, g in zip(reversed(tuple(coords)), reversed(self.root_grid)):
            idx = idx * g + c
        return idx

    def coords(self, bid: int) -> tuple[int, tuple[int, ...]]:
        """Level and integer cell coordinates of ``bid`` on its own level."""
        level = self.level(bid)
        root = (bid >> (self.dim * level)) & ((1 << self.root_bits) - 1)
        xyz = [c << level for c in self.root_coords(root)]
        for i in range(level):
            digit = (bid >> (self.dim * (level - 1 - i))) & (self.children_per_split - 1)
            shift = level - 1 - i
            for a in range(self.dim):
                if digit >> a & 1:
                    xyz[a] |= 1 << shift
        return level, tuple(xyz)

    def id_from_coords(self, level: int, xyz) -> int:
        if level > self.max_levels:
            raise CapacityError(f"level {level} exceeds max_levels={self.max_levels}")
        root = self.root_index(tuple(c >> level for c in xyz))
        bid = (1 << self.root_bits) | root
        for i in range(level):
            shift = level - 1 - i
            digit = 0
            for a in range(self.dim):
                digit |= ((xyz[a] >> shift) & 1) << a
            bid = (bid << self.dim) | digit
        return bid

    def extent(self, level: int) -> tuple[int, ...]:
        return tuple(g << level for g in self.root_grid)

    def wrap(self, level: int, xyz):
        """Apply periodicity to level coordinates; None if outside the domain."""
        out = []
        for a, c in enumerate(xyz):
            n = self.root_grid[a] << level
            if 0 <= c < n:
                out.append(c)
            elif self.periodic[a]:
                out.append(c % n)
            else:
                return None
        return tuple(out)

    def box(self, bid: int) -> tuple[tuple[int, ...], int]:
        """Lower corner and edge length at max_levels resolution."""
        cache = self._box_cache
        hit = cache.get(bid)
        if hit is None:
            level, xyz = self.coords(bid)
            scale = self.max_levels - level
            hit = (tuple(c << scale for c in xyz), 1 << scale)
            if len(cache) < 1 << 20:
                cache[bid] = hit
        return hit

    def touch_kind(self, a: int, b: int):
        """Adjacency kind of two distinct blocks, or None when they do not touch.

        Periodic axes are honoured; the strongest contact wins.
        """
        (lo_a, sa), (lo_b, sb) = self.box(a), self.box(b)
        shifts = []
        for ax in range(self.dim):
            if self.periodic[ax]:
                n = self.root_grid[ax] << self.max_levels
                shifts.append((0, -n, n))
            else:
                shifts.append((0,))
        best = None
        for shift in itertools.product(*shifts):
            touching = 0
            ok = True
            for ax in range(self.dim):
                a0, a1 = lo_a[ax], lo_a[ax] + sa
                b0 = lo_b[ax] + shift[ax]
                b1 = b0 + sb
                if a1 == b0 or b1 == a0:
                    touching += 1
                elif a0 < b1 and b0 < a1:
                    continue
                else:
                    ok = False
                    break
            if not ok or touching == 0:
                continue
            if touching == 1:
                kind = Adjacency.FACE
            elif touching == 2 and self.dim == 3:
                kind = Adjacency.EDGE
            else:
                kind = Adjacency.CORNER
            if best is None or kind < best:
                best = kind
        return best

    def directions(self):
        return [d for d in itertools.product((-1, 0, 1), repeat=self.dim) if any(d)]


def make_block_id(domain: Domain, root_index: int, child_path=()) -> int:
    return domain.make_id(root_index, tuple(child_path))


def parent(domain: Domain, bid: int) -> int:
    return domain.parent(bid)


def children(domain: Domain, bid: int) -> list[int]:
    return domain.children(bid)


def level(domain: Domain, bid: int) -> int:
    return domain.level(bid)
