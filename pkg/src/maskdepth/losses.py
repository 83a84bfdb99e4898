"""Photometric (SSIM + L1) and edge-aware smoothness objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, Pose, synthesize_target
from .tensor import Tensor

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
_INVALID_COST = 1e3


@dataclass(frozen=True)
class LossWeights:
    ssim: float = 0.85
    l1: float = 0.15
    smooth: float = 1e-3

    def __post_init__(self):
        if min(self.ssim, self.l1, self.smooth) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.ssim + self.l1 <= 0:
            raise ValueError("at least one photometric weight must be positive")


def _batched(x) -> Tensor:
    x = T._as_tensor(x)
    return T.reshape(x, (1,) + x.shape) if x.ndim == 3 else x


def box_filter(x, window: int = 3) -> Tensor:
    """Mean over a ``window x window`` neighbourhood of ``(B, H, W, C)``, edge padded."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    r = window // 2
    if r == 0:
        return x
    _, H, W, _ = x.shape
    xp = T.pad(x, [(0, 0), (r, r), (r, r), (0, 0)], mode="edge")
    rows = xp[:, 0:H]
    for k in range(1, window):
        rows = rows + xp[:, k : k + H]
    out = rows[:, :, 0:W]
    for k in range(1, window):
        out = out + rows[:, :, k : k + W]
    return out * (1.0 / (window * window))


def ssim_map(a, b, window: int = 3) -> Tensor:
    """Per-pixel, per-channel ``(1 - SSIM) / 2`` clamped to [0, 1]."""
    a, b = _batched(a), _batched(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    mu_a = box_filter(a, window)
    mu_b = box_filter(b, window)
    sig_a = box_filter(a * a, window) - mu_a * mu_a
    sig_b = box_filter(b * b, window) - mu_b * mu_b
    sig_ab = box_filter(a * b, window) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sig_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sig_a + sig_b + SSIM_C2)
    return T.clamp((1.0 - num / den) * 0.5, 0.0, 1.0)


def ssim_loss(a, b, window: int = 3) -> Tensor:
    return T.mean(ssim_map(a, b, window))


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty validity mask")
    return T.sum(x * mask.astype(np.float64)) * (1.0 / count)


def l1_photometric(a, b, validity=None) -> Tensor:
    """Mean absolute difference over valid pixels (channels averaged)."""
    a, b = _batched(a), _batched(b)
    if a.shape != b.shape:
        raise T.ShapeError(f"l1 inputs differ in shape: {a.shape} vs {b.shape}")
    per_pixel = T.mean(T.abs(a - b), axis=-1)
    if validity is None:
        validity = np.ones(per_pixel.shape, dtype=bool)
    return _masked_mean(per_pixel, np.broadcast_to(validity, per_pixel.shape))


def smoothness_loss(disparity, target) -> Tensor:
    """Edge-aware first-order smoothness of mean-normalised disparity."""
    disparity = T._as_tensor(disparity)
    if disparity.ndim == 2:
        disparity = T.reshape(disparity, (1,) + disparity.shape)
    target = _batched(target)
    if disparity.shape != target.shape[:3]:
        raise T.ShapeError(f"disparity {disparity.shape} vs image {target.shape}")
    mean_d = T.mean(disparity, axis=(1, 2), keepdims=True)
    if np.any(mean_d.data == 0):
        raise ValueError("disparity has zero mean")
    d = disparity / mean_d
    img = target.data
    ex = np.exp(-np.abs(img[:, :, 1:] - img[:, :, :-1]).mean(axis=-1))
    ey = np.exp(-np.abs(img[:, 1:] - img[:, :-1]).mean(axis=-1))
    dx = T.abs(d[:, :, 1:] - d[:, :, :-1])
    dy = T.abs(d[:, 1:] - d[:, :-1])
    return T.mean(dx * ex) + T.mean(dy * ey)


def photometric_map(target, synth, weights: LossWeights, window: int = 3) -> Tensor:
    """``λ_ssim·(1-SSIM)/2 + λ_l1·|a-b|`` per pixel, channel-averaged, ``(B, H, W)``."""
    target, synth = _batched(target), _batched(synth)
    out = None
    if weights.ssim:
        out = T.mean(ssim_map(target, synth, window), axis=-1) * weights.ssim
    if weights.l1:
        l1 = T.mean(T.abs(target - synth), axis=-1) * weights.l1
        out = l1 if out is None else out + l1
    return out


def depth_loss(
    target,
    sources: Sequence,
    depth,
    poses: Sequence[Pose],
    K: Intrinsics,
    weights: LossWeights = LossWeights(),
    disparity=None,
    loss_region: str = "complete",
    pixel_mask: np.ndarray | None = None,
    combine: str = "min",
    window: int = 3,
    return_parts: bool = False,
):
    """Self-supervised view-synthesis objective.

    Each source is warped into the target view with ``depth`` and its pose;
    the per-pixel photometric errors are merged across sources (``min`` or
    ``mean``) and averaged over valid pixels, restricted to ``pixel_mask``
    when ``loss_region == "masked_only"``. The smoothness term always covers
    the complete image.
    """
    if len(sources) != len(poses) or not sources:
        raise ValueError("need one pose per source frame")
    if loss_region not in ("complete", "masked_only"):
        raise ValueError(f"unknown loss_region {loss_region!r}")
    if combine not in ("min", "mean"):
        raise ValueError(f"unknown photometric combine {combine!r}")
    target = _batched(target)
    depth = T._as_tensor(depth)
    if depth.ndim == 2:
        depth = T.reshape(depth, (1,) + depth.shape)

    errors, valids = [], []
    for src, pose in zip(sources, poses):
        synth, valid = synthesize_target(_batched(src), depth, pose, K)
        errors.append(photometric_map(target, synth, weights, window))
        valids.append(valid)

    any_valid = np.logical_or.reduce(valids)
    if combine == "min":
        merged = T.where(valids[0], errors[0], _INVALID_COST)
        for err, valid in zip(errors[1:], valids[1:]):
            merged = T.minimum(merged, T.where(valid, err, _INVALID_COST))
    else:
        count = np.maximum(np.sum(valids, axis=0), 1).astype(np.float64)
        merged = None
        for err, valid in zip(errors, valids):
            term = err * valid.astype(np.float64)
            merged = term if merged is None else merged + term
        merged = merged / count

    region = any_valid
    if loss_region == "masked_only":
        if pixel_mask is None:
            raise ValueError("loss_region='masked_only' needs a pixel mask")
        region = region & np.broadcast_to(np.asarray(pixel_mask, dtype=bool), region.shape)
    photo = _masked_mean(merged, region)

    if disparity is None:
        disparity = 1.0 / depth
    smooth = smoothness_loss(disparity, target) if weights.smooth else None
    total = photo if smooth is None else photo + smooth * weights.smooth
    if return_parts:
        return total, {
            "photometric": photo.item(),
            "smoothness": smooth.item() if smooth is not None else 0.0,
            "valid_fraction": float(region.mean()),
        }
    return total
