"""Reference block payload: a uniform scalar grid with conservative split/merge.

Values are stored with the x axis last (``values[z, y, x]`` in 3D,
``values[y, x]`` in 2D).  A child with Morton digit ``c`` covers the
half of its parent whose axis-``a`` offset is bit ``a`` of ``c``.

Splitting replicates every coarse cell into ``2^d`` fine cells; merging
takes the mean of each ``2^d`` group.  The pair is exactly conservative
for splits and mutually inverse.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

_HEAD = struct.Struct("<II")
_PART = struct.Struct("<IIB")


@dataclass
class GridPayload:
    n: int
    level: int
    values: np.ndarray

    def __post_init__(self):
        if self.n < 1:
            raise ContractError("cells per side must be at least 1")
        self.values = np.ascontiguousarray(self.values, dtype="<f8")
        if self.values.shape != (self.n,) * self.values.ndim or self.values.ndim not in (2, 3):
            raise ContractError(f"grid shape {self.values.shape} does not match n={self.n}")

    @property
    def dim(self) -> int:
        return self.values.ndim

    @property
    def nbytes(self) -> int:
        return self.values.nbytes

    @classmethod
    def constant(cls, n: int, level: int, dim: int, value: float = 0.0) -> "GridPayload":
        return cls(n, level, np.full((n,) * dim, float(value)))

    def mass(self) -> float:
        return math.fsum(self.scaled_values()) / self.n**self.dim

    def scaled_values(self) -> np.ndarray:
        """Cell values times the (power-of-two) relative block volume; exact."""
        return self.values.ravel() * 2.0 ** (-self.dim * self.level)

    def checksum(self) -> bytes:
        return encode_payload(self)

    def __eq__(self, other):
        if not isinstance(other, GridPayload):
            return NotImplemented
        return self.n == other.n and self.level == other.level and np.array_equal(self.values, other.values)


def encode_payload(p: GridPayload) -> bytes:
    """Wire form: ``n, level`` (uint32 each) then ``n^d`` little-endian float64."""
    return _HEAD.pack(p.n, p.level) + p.values.tobytes(order="C")


def decode_payload(buf: bytes, dim: int) -> GridPayload:
    n, level = _HEAD.unpack_from(buf)
    values = np.frombuffer(buf, dtype="<f8", offset=_HEAD.size)
    if values.size != n**dim:
        raise ContractError(f"payload carries {values.size} cells, expected {n ** dim}")
    return GridPayload(n, level, values.reshape((n,) * dim).copy())


def _child_offsets(c: int, dim: int) -> tuple[int, ...]:
    # array axis order is reversed relative to digit bits
    return tuple((c >> a) & 1 for a in reversed(range(dim)))


def _child_window(c: int, n: int, dim: int):
    """Fine-grid slices of child ``c`` and the coarse cells that cover them."""
    fine, coarse = [], []
    for off in _child_offsets(c, dim):
        lo, hi = off * n, off * n + n
        fine.append((lo, hi))
        coarse.append((lo // 2, (hi - 1) // 2 + 1))
    return fine, coarse


def split_payload(coarse: GridPayload) -> list[GridPayload]:
    fine = coarse.values
    for axis in range(coarse.dim):
        fine = np.repeat(fine, 2, axis=axis)
    out = []
    for c in range(1 << coarse.dim):
        window = tuple(slice(lo, hi) for lo, hi in _child_window(c, coarse.n, coarse.dim)[0])
        out.append(GridPayload(coarse.n, coarse.level + 1, fine[window].copy()))
    return out


def _pairwise_block_sum(fine: np.ndarray, dim: int) -> np.ndarray:
    # tree-ordered sums keep mean(x, x, ..., x) == x exactly
    for axis in range(dim):
        shape = list(fine.shape)
        shape[axis : axis + 1] = [shape[axis] // 2, 2]
        r = fine.reshape(shape)
        fine = np.take(r, 0, axis=axis + 1) + np.take(r, 1, axis=axis + 1)
    return fine


def merge_payloads(children) -> GridPayload:
    children = list(children)
    if not children:
        raise ContractError("merge needs child payloads")
    dim = children[0].dim
    if len(children) != 1 << dim or any(c is None for c in children):
        raise ContractError(f"merge needs exactly {1 << dim} children")
    n, level = children[0].n, children[0].level
    if any(c.n != n or c.level != level for c in children):
        raise ContractError("children disagree on grid size or level")
    if level < 1:
        raise ContractError("cannot merge level-0 blocks")
    fine = np.empty((2 * n,) * dim)
    for c, child in enumerate(children):
        window = tuple(slice(lo, hi) for lo, hi in _child_window(c, n, dim)[0])
        fine[window] = child.values
    coarse = _pairwise_block_sum(fine, dim) / float(1 << dim)
    return GridPayload(n, level - 1, coarse)


# -- streams used by the migration callbacks -----------------------------------


def split_streams(coarse: GridPayload) -> list[bytes]:
    """One stream per child holding only the coarse cells that cover it."""
    out = []
    for c in range(1 << coarse.dim):
        window = tuple(slice(lo, hi) for lo, hi in _child_window(c, coarse.n, coarse.dim)[1])
        out.append(_PART.pack(coarse.n, coarse.level, c) + coarse.values[window].tobytes())
    return out


def child_from_stream(buf: bytes, dim: int) -> GridPayload:
    n, level, c = _PART.unpack_from(buf)
    fine_win, coarse_win = _child_window(c, n, dim)
    shape = tuple(hi - lo for lo, hi in coarse_win)
    part = np.frombuffer(buf, dtype="<f8", offset=_PART.size).reshape(shape)
    for axis in range(dim):
        part = np.repeat(part, 2, axis=axis)
    # the covering coarse window starts at an even fine index
    window = tuple(slice(f_lo - 2 * c_lo, f_hi - 2 * c_lo) for (f_lo, f_hi), (c_lo, _) in zip(fine_win, coarse_win))
    return GridPayload(n, level + 1, part[window].copy())


def merge_from_streams(parts: list[bytes], dim: int) -> GridPayload:
    return merge_payloads(decode_payload(p, dim) for p in parts)


def total_mass(payloads) -> float:
    """Mass of a collection of payloads sharing one ``n`` (exactly rounded)."""
    payloads = list(payloads)
    if not payloads:
        return 0.0
    n, dim = payloads[0].n, payloads[0].dim
    scaled = np.concatenate([p.scaled_values() for p in payloads])
    return math.fsum(scaled) / n**dim


# -- per-level statistics --------------------------------------------------------


@dataclass(frozen=True)
class LevelStats:
    counts: tuple[int, ...]
    coverage: tuple[float, ...]
    workload: tuple[float, ...]
    memory: tuple[float, ...]

    def rows(self):
        for lvl, c in enumerate(self.counts):
            yield lvl, c, self.coverage[lvl], self.workload[lvl], self.memory[lvl]


def level_stats(counts, dim: int = 3) -> LevelStats:
    """Coverage, workload (weight ``2^level``) and memory shares per level."""
    counts = tuple(int(c) for c in counts)
    if any(c < 0 for c in counts):
        raise ContractError("block counts must be non-negative")
    if not any(counts):
        raise ContractError("at least one block is required")

    def shares(weights):
        total = math.fsum(weights)
        return tuple(w / total for w in weights)

    coverage = shares([c * 2.0 ** (-dim * lvl) for lvl, c in enumerate(counts)])
    workload = shares([c * 2.0**lvl for lvl, c in enumerate(counts)])
    memory = shares([float(c) for c in counts])
    return LevelStats(counts, coverage, workload, memory)
