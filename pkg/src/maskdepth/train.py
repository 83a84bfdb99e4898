"""Joint training of the depth and ego-motion networks."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import Dataset, load_dataset
from .masking import item_seed, make_mask
from .networks import DepthModel, checkpoint_bytes
from .objective import triplet_loss
from .optim import AdamW, step_lr

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class RunRecord:
    config: dict
    epoch_losses: list[float] = field(default_factory=list)
    epoch_photometric: list[float] = field(default_factory=list)
    epoch_lr: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    steps: int = 0
    checkpoint_sha256: str = ""
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())


def _step_masks(cfg: TrainConfig, stream: int, step: int, batch: int, strategy: str):
    """Per-item masks for one step: ``(token masks (B, N), pixel masks (B, H, W))``."""
    base = int(np.random.default_rng([cfg.seed, stream, step]).integers(0, 2**62))
    grids = [
        make_mask(strategy, cfg.mask_config(item_seed(base, j)), cfg.image_h, cfg.image_w) for j in range(batch)
    ]
    tokens = np.stack([g.tokens(cfg.patch_edge) for g in grids])
    pixels = np.stack([g.pixels(cfg.image_h, cfg.image_w) for g in grids])
    return tokens, pixels


def batch_loss(model: DepthModel, cfg: TrainConfig, frames: np.ndarray, K, step: int = 0, return_parts: bool = False):
    """L_depth on a ``(B, 3, H, W, 3)`` batch with this config's masking policy."""
    B = len(frames)
    depth_mask = ego_mask = pixel_mask = None
    if cfg.masks_depth:
        depth_mask, pixel_mask = _step_masks(cfg, 11, step, B, cfg.depth_mask_strategy)
    if cfg.masks_ego:
        ego_mask, _ = _step_masks(cfg, 13, step, B, cfg.ego_mask_strategy)
    return triplet_loss(
        model,
        frames[:, 0],
        frames[:, 1],
        frames[:, 2],
        K,
        cfg.loss_weights(),
        depth_mask=depth_mask,
        ego_mask=ego_mask,
        loss_region=cfg.loss_region,
        pixel_mask=pixel_mask,
        combine=cfg.photometric_combine,
        return_parts=return_parts,
    )


def schedule(cfg: TrainConfig, n_triplets: int) -> int:
    """Steps per epoch."""
    if cfg.steps_per_epoch:
        return cfg.steps_per_epoch
    return max(1, n_triplets // cfg.batch_size)


def initial_loss(model: DepthModel, cfg: TrainConfig, ds: Dataset, batches: int = 8) -> float:
    """Mean L_depth over the first ``batches`` fixed batches, without gradients."""
    B = min(cfg.batch_size, len(ds))
    vals = []
    with T.no_grad():
        for b in range(batches):
            idx = (np.arange(B) + b * B) % len(ds)
            vals.append(batch_loss(model, cfg, ds.frames[idx], ds.K, step=b).item())
    return float(np.mean(vals))


def train(
    cfg: TrainConfig,
    dataset: Dataset | None = None,
    progress: Callable[[int, int, float, dict], None] | None = None,
) -> tuple[DepthModel, RunRecord]:
    """Train both networks with one common loss; returns the model and its run record."""
    started = time.perf_counter()
    if dataset is None:
        if not cfg.dataset:
            raise ValueError("no dataset given and cfg.dataset is empty")
        if not Path(cfg.dataset).is_dir():
            raise FileNotFoundError(f"dataset directory not found: {cfg.dataset}")
        dataset = load_dataset(cfg.dataset)
    ds = dataset
    H, W = ds.frames.shape[2:4]
    if (H, W) != (cfg.image_h, cfg.image_w):
        raise ValueError(f"dataset images are {H}x{W} but the model expects {cfg.image_h}x{cfg.image_w}")

    model = DepthModel(cfg.model_config(), seed=cfg.seed)
    opt = AdamW(model.parameters(), cfg.optim_config())
    rng = np.random.default_rng([cfg.seed, 5])
    B = min(cfg.batch_size, len(ds))
    per_epoch = schedule(cfg, len(ds))
    record = RunRecord(config=cfg.to_dict())
    record.initial_loss = initial_loss(model, cfg, ds)

    step = 0
    for epoch in range(cfg.epochs):
        opt.lr = step_lr(cfg.lr, epoch, cfg.lr_decay_epoch, cfg.lr_decay_factor)
        order = rng.permutation(len(ds))
        losses, photos = [], []
        for s in range(per_epoch):
            idx = order[(np.arange(B) + s * B) % len(ds)]
            loss, parts = batch_loss(model, cfg, ds.frames[idx], ds.K, step=step, return_parts=True)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}, lr {opt.lr:g}): "
                    f"total={value}, photometric={parts['photometric']}, smoothness={parts['smoothness']}"
                )
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            losses.append(value)
            photos.append(parts["photometric"])
            step += 1
            if progress is not None:
                progress(epoch, step, value, parts)
        record.epoch_losses.append(float(np.mean(losses)))
        record.epoch_photometric.append(float(np.mean(photos)))
        record.epoch_lr.append(opt.lr)
        log.info("epoch %d  loss %.5f  lr %g", epoch, record.epoch_losses[-1], opt.lr)

    record.steps = step
    blob = checkpoint_bytes(model)
    record.checkpoint_sha256 = hashlib.sha256(blob).hexdigest()
    if cfg.checkpoint:
        Path(cfg.checkpoint).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.checkpoint).write_bytes(blob)
    record.wall_time = time.perf_counter() - started
    if cfg.record:
        record.save(cfg.record)
    return model, record
