"""Patch-grid mask generators and mask-token substitution.

Masks live on the patch grid: an ``h x w`` image with ``mask_size`` pixel
cells gives a ``floor(h/mask_size) x floor(w/mask_size)`` boolean grid
(True = masked). When the mask cell is a multiple of the transformer patch
edge, each cell is repeated over the corresponding block of patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MIN_BLOCK_CELLS = 4


@dataclass(frozen=True)
class MaskConfig:
    mask_size: int = 16
    mask_ratio: float = 0.25
    aspect: float = 0.3
    seed: int = 0
    min_block: int = MIN_BLOCK_CELLS

    def __post_init__(self):
        if self.mask_size < 1:
            raise ValueError("mask_size must be >= 1")
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if not 0 < self.aspect < 1:
            raise ValueError(f"aspect must lie in (0, 1), got {self.aspect}")
        if self.min_block < 1:
            raise ValueError("min_block must be >= 1")

    def grid_shape(self, h: int, w: int) -> tuple[int, int]:
        return h // self.mask_size, w // self.mask_size


@dataclass
class Block:
    top: int
    left: int
    height: int
    width: int
    area_drawn: float
    aspect_drawn: float


@dataclass
class MaskGrid:
    grid: np.ndarray
    mask_size: int
    strategy: str
    blocks: list[Block] = field(default_factory=list)

    @property
    def achieved_ratio(self) -> float:
        return float(self.grid.mean())

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def pixels(self, h: int, w: int) -> np.ndarray:
        """Boolean ``(h, w)`` pixel mask; pixels past the last full cell stay unmasked."""
        return grid_to_pixels(self.grid, self.mask_size, h, w)

    def tokens(self, patch_edge: int) -> np.ndarray:
        """Flattened token mask for a transformer with ``patch_edge`` patches."""
        return grid_to_tokens(self.grid, self.mask_size, patch_edge).reshape(-1)


def grid_to_pixels(grid: np.ndarray, cell: int, h: int, w: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=bool)
    gh, gw = grid.shape
    out[: gh * cell, : gw * cell] = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)
    return out


def grid_to_tokens(grid: np.ndarray, cell: int, patch_edge: int) -> np.ndarray:
    if cell % patch_edge:
        raise ValueError(f"mask cell {cell} px is not a multiple of the patch edge {patch_edge} px")
    k = cell // patch_edge
    return np.repeat(np.repeat(grid, k, axis=0), k, axis=1)


def _check(cfg: MaskConfig, h: int, w: int) -> tuple[int, int, float]:
    gh, gw = cfg.grid_shape(h, w)
    if gh < 1 or gw < 1:
        raise ValueError(f"{h}x{w} image is smaller than one {cfg.mask_size}px mask cell")
    target = cfg.mask_ratio * gh * gw
    if target < 1:
        raise ValueError(f"mask ratio {cfg.mask_ratio} selects less than one of {gh * gw} cells")
    return gh, gw, target


def _extents(s: float, r: float, aspect: float, gh: int, gw: int) -> tuple[int, int]:
    """Integer block extents for area ``s`` and aspect ``r``.

    Rounding up can push ``bh/bw`` outside ``[aspect, 1/aspect]``; the short
    side is then widened, and after clipping to the grid the long side is
    trimmed, so realised blocks keep the aspect bound.
    """
    bh = max(1, math.ceil(math.sqrt(s * r) - 1e-9))
    bw = max(1, math.ceil(math.sqrt(s / r) - 1e-9))
    if bh * aspect > bw:
        bw = math.ceil(bh * aspect - 1e-9)
    elif bw * aspect > bh:
        bh = math.ceil(bw * aspect - 1e-9)
    bh, bw = min(bh, gh), min(bw, gw)
    if bh * aspect > bw:
        bh = max(1, math.floor(bw / aspect + 1e-9))
    elif bw * aspect > bh:
        bw = max(1, math.floor(bh / aspect + 1e-9))
    return bh, bw


def blockwise_mask(cfg: MaskConfig, h: int, w: int) -> MaskGrid:
    """Union random rectangles of cells until at least ``ratio * n`` are masked.

    Each block draws an area ``s`` uniformly from ``[min_block, remaining]``
    (or exactly ``min_block`` once the remaining budget is below it) and an
    aspect ``r`` uniformly from ``[aspect, 1/aspect]``; its extents are
    ``ceil(sqrt(s*r)) x ceil(sqrt(s/r))``, adjusted to respect the aspect bound
    and clipped to the grid.
    """
    gh, gw, target = _check(cfg, h, w)
    n = gh * gw
    if cfg.min_block > n:
        raise ValueError(f"minimum block of {cfg.min_block} cells exceeds the {gh}x{gw} grid")
    rng = np.random.default_rng(cfg.seed)
    grid = np.zeros((gh, gw), dtype=bool)
    blocks: list[Block] = []
    count = 0
    while True:
        remaining = target - count
        s = float(cfg.min_block) if remaining <= cfg.min_block else rng.uniform(cfg.min_block, remaining)
        r = rng.uniform(cfg.aspect, 1.0 / cfg.aspect)
        bh, bw = _extents(s, r, cfg.aspect, gh, gw)
        top = int(rng.integers(0, gh - bh + 1))
        left = int(rng.integers(0, gw - bw + 1))
        grid[top : top + bh, left : left + bw] = True
        blocks.append(Block(top, left, bh, bw, s, r))
        count = int(grid.sum())
        if count >= target:
            break
    return MaskGrid(grid, cfg.mask_size, "blockwise", blocks)


def random_mask(cfg: MaskConfig, h: int, w: int) -> MaskGrid:
    """Exactly ``max(1, round(ratio * n))`` cells, uniformly without replacement."""
    gh, gw = cfg.grid_shape(h, w)
    if gh < 1 or gw < 1:
        raise ValueError(f"{h}x{w} image is smaller than one {cfg.mask_size}px mask cell")
    n = gh * gw
    k = max(1, int(round(cfg.mask_ratio * n)))
    rng = np.random.default_rng(cfg.seed)
    flat = np.zeros(n, dtype=bool)
    flat[rng.choice(n, size=k, replace=False)] = True
    return MaskGrid(flat.reshape(gh, gw), cfg.mask_size, "random")


def make_mask(strategy: str, cfg: MaskConfig, h: int, w: int) -> MaskGrid:
    if strategy == "blockwise":
        return blockwise_mask(cfg, h, w)
    if strategy == "random":
        return random_mask(cfg, h, w)
    raise ValueError(f"unknown mask strategy {strategy!r}")


def item_seed(seed: int, index: int) -> int:
    return (int(seed) ^ int(index)) & 0xFFFFFFFFFFFFFFFF


def apply_mask(tokens, token_mask: np.ndarray | None, mask_token) -> Tensor:
    """Replace masked positions of ``(B, N, D)`` tokens by the mask embedding.

    ``token_mask`` is ``(N,)`` or ``(B, N)``; ``mask_token`` is a shared
    ``(1, D)`` embedding or a per-position ``(N, D)`` table. Unmasked tokens
    pass through unchanged.
    """
    tokens = T._as_tensor(tokens)
    if token_mask is None:
        return tokens
    token_mask = np.asarray(token_mask, dtype=bool)
    n = tokens.shape[-2]
    if token_mask.shape[-1] != n:
        raise T.ShapeError(f"mask covers {token_mask.shape[-1]} positions but sequence has {n}")
    if not token_mask.any():
        return tokens
    cond = token_mask[..., None]
    if cond.ndim < tokens.ndim:
        cond = cond.reshape((1,) * (tokens.ndim - cond.ndim) + cond.shape)
    return T.where(~cond, tokens, mask_token)
