"""Scenario configuration: a key-value text format and the forests it describes.

Format: one ``key = value`` per line, ``#`` starts a comment, keys
``refine`` and ``shift`` may repeat.  Boxes are written in root-block
units as ``lo_x lo_y [lo_z] : hi_x hi_y [hi_z] @ level`` (``shift`` boxes
omit ``@ level``); ``max`` stands for the domain extent on that axis.

``geometry = cavity`` is the built-in benchmark: a ``(T, 3, 3)`` root grid
whose two upper edges along x are refined to level 3, with ``T`` derived
from the rank count unless ``tiles`` is given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .balancing.sfc import rank_of_position
from .curves import curve_key
from .domain import Domain
from .errors import ContractError
from .forest import BlockForest, from_owners, ripple_balance, uniform_ids
from .payload import GridPayload
from .refinement import identity_marker, random_marker

Box = tuple[tuple[float, ...], tuple[float, ...]]

_BOOL = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


@dataclass
class ScenarioConfig:
    geometry: str = "cavity"
    dim: int = 3
    roots: tuple[int, ...] = ()
    tiles: int = 0
    max_levels: int = 3
    refine: list[tuple[Box, int]] = field(default_factory=list)
    shift: list[Box] = field(default_factory=list)
    trigger: str = "shift"
    p_refine: float = 0.1
    p_coarsen: float = 0.3
    ranks: int = 16
    partition: str = "morton"
    balancer: str = "diffusion:pushpull"
    per_level: bool = True
    weighted: bool = False
    weight: str = "unit"
    flow_iters: int | None = None
    max_main_iters: int = 20
    tolerance: float = 1.0
    payload_n: int = 2
    cycles: int = 1
    force_rebalance: bool = False
    seed: int = 0

    def tile_count(self) -> int:
        if self.tiles > 0:
            return self.tiles
        return max(1, round(7 * self.ranks / 128))

    def validate(self) -> "ScenarioConfig":
        if self.geometry not in ("cavity", "boxes"):
            raise ContractError(f"unknown geometry {self.geometry!r}")
        if self.trigger not in ("shift", "random", "none"):
            raise ContractError(f"unknown trigger {self.trigger!r}")
        if self.partition not in ("morton", "hilbert", "skewed"):
            raise ContractError(f"unknown partition {self.partition!r}")
        if self.weight not in ("unit", "level"):
            raise ContractError(f"unknown weight model {self.weight!r}")
        if self.ranks < 1 or self.cycles < 1 or self.payload_n < 0:
            raise ContractError("ranks and cycles must be positive, payload_n non-negative")
        if self.flow_iters is not None and self.flow_iters < 1:
            raise ContractError("flow_iters must be at least 1")
        if self.geometry == "boxes":
            if len(self.roots) != self.dim:
                raise ContractError(f"roots needs {self.dim} extents")
            for box, level in self.refine:
                if not 0 <= level <= self.max_levels:
                    raise ContractError(f"refine level {level} outside 0..{self.max_levels}")
                if len(box[0]) != self.dim or len(box[1]) != self.dim:
                    raise ContractError("refine box has the wrong dimension")
            for box in self.shift:
                if len(box[0]) != self.dim or len(box[1]) != self.dim:
                    raise ContractError("shift box has the wrong dimension")
        return self


def _parse_box(text: str, with_level: bool):
    level = None
    if with_level:
        text, sep, lvl = text.partition("@")
        if not sep:
            raise ContractError(f"refine box {text!r} lacks '@ level'")
        level = int(lvl)
    lo, sep, hi = text.partition(":")
    if not sep:
        raise ContractError(f"box {text!r} lacks ':' between corners")

    def coords(part):
        return tuple(math.inf if tok == "max" else float(tok) for tok in part.split())

    return (coords(lo), coords(hi)), level


def parse_config(text: str, **overrides) -> ScenarioConfig:
    """Parse key-value text; ``overrides`` (non-None) win over file values."""
    cfg = ScenarioConfig()
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or key not in types:
            raise ContractError(f"line {lineno}: cannot parse {raw.strip()!r}")
        try:
            if key == "refine":
                box, level = _parse_box(value, True)
                cfg.refine.append((box, level))
            elif key == "shift":
                cfg.shift.append(_parse_box(value, False)[0])
            elif key == "roots":
                cfg.roots = tuple(int(v) for v in value.split())
            elif key in ("per_level", "weighted", "force_rebalance"):
                if value.lower() not in _BOOL:
                    raise ValueError(f"not a boolean: {value!r}")
                setattr(cfg, key, _BOOL[value.lower()])
            elif key == "flow_iters":
                cfg.flow_iters = None if value in ("", "default") else int(value)
            elif key in ("p_refine", "p_coarsen", "tolerance"):
                setattr(cfg, key, float(value))
            elif key in ("dim", "tiles", "max_levels", "ranks", "max_main_iters", "payload_n", "cycles", "seed"):
                setattr(cfg, key, int(value))
            else:
                setattr(cfg, key, value)
        except ValueError as exc:
            raise ContractError(f"line {lineno}: {exc}") from exc
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def load_config(path, **overrides) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), **overrides)


# -- geometry -------------------------------------------------------------------


def cavity_boxes(tiles: int):
    """Refinement and shift boxes of the built-in benchmark."""
    refine = [(((0, 0, 2.75), (tiles, 0.25, 3)), 3), (((0, 2.75, 2.75), (tiles, 3, 3)), 3)]
    shift = [((0, 0.25, 2.75), (tiles, 0.5, 3)), ((0, 2.5, 2.75), (tiles, 2.75, 3))]
    return refine, shift


def make_domain(cfg: ScenarioConfig) -> Domain:
    if cfg.geometry == "cavity":
        return Domain(3, (cfg.tile_count(), 3, 3), 3)
    return Domain(cfg.dim, cfg.roots, cfg.max_levels)


def boxes_of(cfg: ScenarioConfig):
    if cfg.geometry == "cavity":
        return cavity_boxes(cfg.tile_count())
    return cfg.refine, cfg.shift


def _clip(domain: Domain, box: Box):
    lo, hi = box
    return tuple(max(0.0, v) for v in lo), tuple(min(float(g), v) for g, v in zip(domain.root_grid, hi))


def overlaps(domain: Domain, bid: int, box: Box) -> bool:
    corner, size = domain.box(bid)
    scale = 1 << domain.max_levels
    lo, hi = _clip(domain, box)
    return all(corner[a] < hi[a] * scale and corner[a] + size > lo[a] * scale for a in range(domain.dim))


def refined_ids(domain: Domain, regions) -> set[int]:
    """Leaves covering ``regions`` at their levels, then 2:1 balanced."""
    leaves = set(uniform_ids(domain))
    for box, level in regions:
        work = [b for b in leaves if domain.level(b) < level and overlaps(domain, b, box)]
        while work:
            bid = work.pop()
            if bid not in leaves:
                continue
            leaves.discard(bid)
            for child in domain.children(bid):
                leaves.add(child)
                if domain.level(child) < level and overlaps(domain, child, box):
                    work.append(child)
    return ripple_balance(domain, leaves)


def initial_owners(domain: Domain, ids, size: int, partition: str = "morton") -> dict[int, int]:
    """Per-level curve split, or a skewed whole-forest split (rank r gets share ~ r+1)."""
    if partition == "skewed":
        key = curve_key("morton")
        seq = sorted(ids, key=lambda b: (key(domain, b), domain.level(b)))
        bounds = np.cumsum(np.arange(1, size + 1))
        bounds = bounds / bounds[-1] * len(seq)
        return {b: int(min(size - 1, np.searchsorted(bounds, g, side="right"))) for g, b in enumerate(seq)}
    key = curve_key(partition)
    owners = {}
    for lvl in range(domain.max_levels + 1):
        seq = sorted((b for b in ids if domain.level(b) == lvl), key=lambda b: key(domain, b))
        for g, b in enumerate(seq):
            owners[b] = rank_of_position(g, len(seq), size)
    return owners


def block_payload(seed: int, bid: int, level: int, n: int, dim: int) -> GridPayload:
    rng = np.random.default_rng([seed, bid])
    return GridPayload(n, level, rng.random((n,) * dim))


def build_forest(cfg: ScenarioConfig) -> BlockForest:
    domain = make_domain(cfg)
    regions, _ = boxes_of(cfg)
    ids = refined_ids(domain, regions)
    forest = from_owners(domain, initial_owners(domain, ids, cfg.ranks, cfg.partition), cfg.ranks)
    return forest


def shift_marker(domain: Domain, shift_boxes):
    """Finest blocks coarsen; coarser blocks touching a shift box refine."""

    def mark(rank, blocks):
        out = {}
        for bid, b in blocks.items():
            if b.level == domain.max_levels:
                out[bid] = -1
            elif any(overlaps(domain, bid, box) for box in shift_boxes):
                out[bid] = 1
        return out

    return mark


def make_marker(cfg: ScenarioConfig, domain: Domain):
    if cfg.trigger == "shift":
        return shift_marker(domain, boxes_of(cfg)[1])
    if cfg.trigger == "random":
        return random_marker(cfg.seed, cfg.p_refine, cfg.p_coarsen, domain.max_levels)
    return identity_marker
