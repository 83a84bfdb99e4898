"""Evaluation suites (clean, corruption, occlusion, attack) and the ablation grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .config import TrainConfig
from .data import Dataset
from .metrics import DEFAULT_CLAMP, MetricRow, depth_metrics
from .robustness import (
    CORRUPTIONS,
    AttackSpec,
    corrupt_batch,
    occlusion_mask,
    run_attack,
)
from .train import RunRecord, train

log = logging.getLogger(__name__)

SUITES = ("clean", "corruption", "occlusion", "attack")
REGIONS = ("complete", "unmasked", "masked")
SUITE_PARAMS = {
    "clean": {},
    "corruption": {"kinds": CORRUPTIONS, "severities": (1, 2, 3, 4, 5), "seed": 0},
    "occlusion": {"strategies": ("blockwise", "random"), "ratio": 0.25, "mask_size": 8, "seed": 0},
    "attack": {"untargeted": (1, 2, 4, 8, 16), "flip_horizontal": (1, 2, 4), "flip_vertical": (1, 2, 4)},
}


class OracleDepthModel:
    """Returns ground-truth depth for images it has seen; a plumbing check for the evaluator."""

    differentiable = False

    def __init__(self, ds: Dataset):
        self._lookup = {img.tobytes(): d for img, d in zip(ds.targets, ds.depth)}

    def predict_depth(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        batch = images[None] if single else images
        try:
            out = np.array([self._lookup[img.tobytes()] for img in batch])
        except KeyError:
            raise KeyError("oracle model was asked about an image it has not seen") from None
        return out[0] if single else out


def _params(suite: str, params: dict | None) -> dict:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    defaults = SUITE_PARAMS[suite]
    params = dict(params or {})
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"suite {suite!r} does not take parameters {sorted(unknown)}")
    return {**defaults, **params}


def _rows(run_id, suite, perturbation, level, region, preds, gts, valids=None, clamp=DEFAULT_CLAMP):
    out = []
    for i, (p, g) in enumerate(zip(preds, gts)):
        m = depth_metrics(p, g, clamp, valid=None if valids is None else valids[i])
        out.append(MetricRow.from_metrics(m, run_id=run_id, suite=suite, perturbation=perturbation,
                                          level=str(level), region=region, image=i))
    return out


def evaluate(
    model,
    ds: Dataset,
    suite: str = "clean",
    params: dict | None = None,
    run_id: str = "run",
    clamp: tuple[float, float] = DEFAULT_CLAMP,
) -> list[MetricRow]:
    """Per-image depth metrics for one suite."""
    p = _params(suite, params)
    gts = ds.depth
    if suite == "clean":
        return _rows(run_id, suite, "none", 0, "complete", model.predict_depth(ds.targets), gts, clamp=clamp)

    rows: list[MetricRow] = []
    if suite == "corruption":
        for kind in p["kinds"]:
            if kind not in CORRUPTIONS:
                raise ValueError(f"unsupported corruption {kind!r}")
            for sev in p["severities"]:
                imgs = corrupt_batch(ds.targets, kind, int(sev), int(p["seed"]))
                rows += _rows(run_id, suite, kind, sev, "complete", model.predict_depth(imgs), gts, clamp=clamp)
        return rows

    if suite == "occlusion":
        H, W = ds.targets.shape[1:3]
        for strategy in p["strategies"]:
            masks = np.stack(
                [occlusion_mask((H, W), strategy, p["ratio"], int(p["seed"]) + i, p["mask_size"]) for i in range(len(ds))]
            )
            imgs = ds.targets.copy()
            for i in range(len(ds)):
                imgs[i][masks[i]] = ds.targets[i].mean(axis=(0, 1))
            preds = model.predict_depth(imgs)
            rows += _rows(run_id, suite, strategy, p["ratio"], "complete", preds, gts, clamp=clamp)
            rows += _rows(run_id, suite, strategy, p["ratio"], "unmasked", preds, gts, ~masks, clamp)
            rows += _rows(run_id, suite, strategy, p["ratio"], "masked", preds, gts, masks, clamp)
        return rows

    # attack
    for mode in ("untargeted", "flip_horizontal", "flip_vertical"):
        for eps in p[mode]:
            res = run_attack(model, ds.frames, ds.K, AttackSpec(mode, float(eps)))
            rows += _rows(run_id, suite, mode, eps, "complete", model.predict_depth(res.adversarial), gts, clamp=clamp)
    return rows


# ----------------------------------------------------------------------
# ablation grid
# ----------------------------------------------------------------------
# Arms of the two ablation tables. Mask sizes are expressed relative to the
# patch edge: "16" is one patch, "32" is two.
ARMS: dict[str, dict] = {
    "B,-": {"mask_target": "depth_only", "depth_mask_strategy": "blockwise"},
    "R,-": {"mask_target": "depth_only", "depth_mask_strategy": "random"},
    "B,B": {"mask_target": "both", "depth_mask_strategy": "blockwise", "ego_mask_strategy": "blockwise"},
    "B,R": {"mask_target": "both", "depth_mask_strategy": "blockwise", "ego_mask_strategy": "random"},
    "16/40%/Complete": {"mask_ratio": 0.40},
    "32/25%/Complete": {"mask_size": "2x"},
    "16/25%/Masked": {"loss_region": "masked_only"},
}
STRATEGY_TABLE = ("B,-", "R,-", "B,B", "B,R")
SIZE_TABLE = ("B,-", "16/40%/Complete", "32/25%/Complete", "16/25%/Masked")
ARM_ALIASES = {"16/25%/Complete": "B,-"}


def arm_config(base: TrainConfig, arm: str) -> TrainConfig:
    arm = ARM_ALIASES.get(arm, arm)
    if arm not in ARMS:
        raise ValueError(f"unknown ablation arm {arm!r}; choose from {list(ARMS)}")
    over = dict(ARMS[arm])
    if over.get("mask_size") == "2x":
        over["mask_size"] = 2 * base.patch_edge
    # every arm shares the default masking settings except what it changes
    defaults = {
        "mask_target": "depth_only",
        "depth_mask_strategy": "blockwise",
        "mask_size": base.patch_edge,
        "mask_ratio": 0.25,
        "loss_region": "complete",
    }
    return base.replace(**{**defaults, **over})


@dataclass
class ArmResult:
    arm: str
    seed: int
    record: RunRecord
    clean: float
    blockwise: float
    random: float

    @property
    def mean(self) -> float:
        return (self.clean + self.blockwise + self.random) / 3.0


@dataclass
class AblationResult:
    results: list[ArmResult] = field(default_factory=list)

    def cell(self, arm: str, column: str) -> float:
        vals = [getattr(r, column) for r in self.results if r.arm == arm]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def arms(self) -> list[str]:
        seen: list[str] = []
        for r in self.results:
            if r.arm not in seen:
                seen.append(r.arm)
        return seen

    def ordering(self) -> list[tuple[str, float]]:
        """Arms sorted by mean RMSE over clean and both occlusion sets."""
        return sorted(((a, self.cell(a, "mean")) for a in self.arms), key=lambda t: t[1])

    def table(self) -> str:
        def block(title: str, arms: Sequence[str]) -> list[str]:
            arms = [a for a in arms if a in self.arms]
            if not arms:
                return []
            lines = [title, f"{'arm':<18}{'clean':>10}{'blockwise':>11}{'random':>10}{'mean':>10}"]
            for a in arms:
                lines.append(
                    f"{a:<18}{self.cell(a, 'clean'):>10.4f}{self.cell(a, 'blockwise'):>11.4f}"
                    f"{self.cell(a, 'random'):>10.4f}{self.cell(a, 'mean'):>10.4f}"
                )
            return lines + [""]

        seeds = sorted({r.seed for r in self.results})
        lines = [f"mean RMSE over seeds {seeds}", ""]
        lines += block("masking strategy (depth, ego-motion)", STRATEGY_TABLE)
        lines += block("mask size / ratio / loss region", SIZE_TABLE)
        extra = [a for a in self.arms if a not in STRATEGY_TABLE + SIZE_TABLE]
        lines += block("other arms", extra)
        lines.append("ordering by mean: " + " < ".join(f"{a} ({v:.4f})" for a, v in self.ordering()))
        return "\n".join(lines)


def _mean_rmse(rows: Iterable[MetricRow], perturbation: str | None = None) -> float:
    vals = [r.rmse for r in rows if r.region == "complete" and (perturbation is None or r.perturbation == perturbation)]
    return float(np.mean(vals))


def ablation_grid(
    base: TrainConfig,
    train_set: Dataset,
    eval_set: Dataset,
    arms: Sequence[str] | None = None,
    seeds: Sequence[int] = (0, 1, 2),
    occlusion_seed: int = 0,
) -> AblationResult:
    """Train and evaluate every arm for every seed."""
    result = AblationResult()
    for arm in arms or list(ARMS):
        for seed in seeds:
            cfg = arm_config(base, arm).replace(seed=int(seed), checkpoint="", record="")
            log.info("ablation arm %s seed %d", arm, seed)
            model, record = train(cfg, train_set)
            run_id = f"{arm}@{seed}"
            clean = evaluate(model, eval_set, "clean", run_id=run_id)
            occl = evaluate(model, eval_set, "occlusion", {"seed": occlusion_seed, "mask_size": cfg.patch_edge}, run_id=run_id)
            record.metrics = {
                "clean_rmse": _mean_rmse(clean),
                "blockwise_rmse": _mean_rmse(occl, "blockwise"),
                "random_rmse": _mean_rmse(occl, "random"),
            }
            result.results.append(
                ArmResult(arm, int(seed), record, record.metrics["clean_rmse"],
                          record.metrics["blockwise_rmse"], record.metrics["random_rmse"])
            )
    return result
