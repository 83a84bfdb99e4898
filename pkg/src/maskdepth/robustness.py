"""Natural corruptions, mean-fill occlusions and gradient-sign attacks."""

from __future__ import annotations

import configparser
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import Intrinsics, bilinear_sample
from .losses import LossWeights
from .masking import MaskConfig, make_mask
from .objective import triplet_loss
from .tensor import Tensor

CORRUPTIONS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "motion_blur",
    "zoom_blur",
    "fog",
    "brightness",
    "contrast",
    "pixelate",
)
STANDARD_EPSILONS = (1, 2, 4, 8, 16)


# ----------------------------------------------------------------------
# severity tables
# ----------------------------------------------------------------------
def _parse_value(text: str):
    parts = [p.strip() for p in text.split(",")]
    vals = [float(p) for p in parts]
    return vals if len(vals) > 1 else vals[0]


def load_severity_table(path=None) -> dict[str, dict]:
    """Read a severity table INI; defaults to the one shipped with the package."""
    cp = configparser.ConfigParser()
    if path is None:
        cp.read_string(resources.files("maskdepth").joinpath("configs/corruptions.ini").read_text())
    else:
        if not Path(path).is_file():
            raise FileNotFoundError(f"severity table not found: {path}")
        cp.read(path)
    table = {sec: {k: _parse_value(v) for k, v in cp[sec].items()} for sec in cp.sections()}
    missing = set(CORRUPTIONS) - set(table)
    if missing:
        raise ValueError(f"severity table lacks sections {sorted(missing)}")
    return table


@lru_cache(maxsize=1)
def default_table() -> dict[str, dict]:
    return load_severity_table()


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unsupported corruption {self.kind!r}; choose from {', '.join(CORRUPTIONS)}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


# ----------------------------------------------------------------------
# helpers
# ----------------------------------------------------------------------
def _shift_add(img: np.ndarray, offsets) -> np.ndarray:
    """Average of edge-clamped copies of ``img`` shifted by integer ``(dy, dx)`` offsets."""
    H, W = img.shape[:2]
    r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    pad = np.pad(img, [(r, r), (r, r), (0, 0)], mode="edge")
    out = np.zeros_like(img)
    for dy, dx in offsets:
        out += pad[r + dy : r + dy + H, r + dx : r + dx + W]
    return out / len(offsets)


def disk_offsets(radius: float) -> list[tuple[int, int]]:
    r = int(math.floor(radius))
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if dy * dy + dx * dx <= radius * radius]


def line_offsets(length: int, angle: float) -> list[tuple[int, int]]:
    ts = np.linspace(-(length - 1) / 2.0, (length - 1) / 2.0, int(length))
    return [(int(round(t * math.sin(angle))), int(round(t * math.cos(angle)))) for t in ts]


def _zoom(img: np.ndarray, z: float) -> np.ndarray:
    """Centre crop by ``1/z`` rescaled back to full size (bilinear)."""
    H, W, _ = img.shape
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    with T.no_grad():
        out, _ = bilinear_sample(img[None], (cx + (u - cx) / z)[None], (cy + (v - cy) / z)[None])
    return out.data[0]


def fog_pattern(h: int, w: int, seed: int, waves: int = 6) -> np.ndarray:
    """Smooth field in [0, 1] built from a few random low-frequency waves."""
    rng = np.random.default_rng([seed, 7])
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    field = np.zeros((h, w))
    for k in range(waves):
        theta = rng.uniform(0, 2 * np.pi)
        freq = rng.uniform(0.5, 2.5) * 2 * np.pi / max(h, w)
        field += np.cos(freq * (u * np.cos(theta) + v * np.sin(theta)) + rng.uniform(0, 2 * np.pi)) / (k + 1)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.full((h, w), 0.5)


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Replace each ``block x block`` tile by its mean; ragged edge tiles average what they hold."""
    H, W, C = img.shape
    out = np.empty_like(img)
    for y in range(0, H, block):
        for x in range(0, W, block):
            tile = img[y : y + block, x : x + block]
            out[y : y + block, x : x + block] = tile.reshape(-1, C).mean(axis=0)
    return out


# ----------------------------------------------------------------------
# corruptions
# ----------------------------------------------------------------------
def corrupt(image: np.ndarray, spec: CorruptionSpec, table: dict | None = None) -> np.ndarray:
    """Apply one corruption to an ``(H, W, 3)`` image in [0, 1]; output is clipped to [0, 1]."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3:
        raise T.ShapeError(f"expected an (H, W, C) image, got {x.shape}")
    p = (table or default_table())[spec.kind]
    i = int(spec.severity) - 1
    rng = np.random.default_rng(spec.seed)
    k = spec.kind
    if k == "gaussian_noise":
        out = x + rng.normal(0.0, p["sigma"][i], x.shape)
    elif k == "shot_noise":
        rate = p["rate"][i]
        out = rng.poisson(x * rate) / rate
    elif k == "impulse_noise":
        hit = rng.random(x.shape) < p["amount"][i]
        salt = rng.random(x.shape) < 0.5
        out = np.where(hit, salt.astype(np.float64), x)
    elif k == "defocus_blur":
        out = _shift_add(x, disk_offsets(p["radius"][i]))
    elif k == "motion_blur":
        out = _shift_add(x, line_offsets(int(p["length"][i]), rng.uniform(0, np.pi)))
    elif k == "zoom_blur":
        zooms = np.arange(1.0, p["max_zoom"][i] + 1e-9, p["zoom_step"])
        out = np.mean([_zoom(x, z) for z in zooms], axis=0)
    elif k == "fog":
        m = p["density"][i] * fog_pattern(x.shape[0], x.shape[1], spec.seed)[..., None]
        out = x * (1.0 - m) + m * p["colour"]
    elif k == "brightness":
        out = x + p["delta"][i]
    elif k == "contrast":
        mean = x.mean(axis=(0, 1), keepdims=True)
        out = (x - mean) * p["factor"][i] + mean
    else:  # pixelate
        out = pixelate(x, int(p["block"][i]))
    return np.clip(out, 0.0, 1.0)


def corrupt_batch(images: np.ndarray, kind: str, severity: int, seed: int = 0, table=None) -> np.ndarray:
    """Corrupt each image of a batch with per-image seed ``seed + index``."""
    return np.stack(
        [corrupt(img, CorruptionSpec(kind, severity, seed + n), table) for n, img in enumerate(images)]
    )


# ----------------------------------------------------------------------
# occlusion
# ----------------------------------------------------------------------
def occlusion_mask(
    shape: tuple[int, int], strategy: str, ratio: float = 0.25, seed: int = 0, mask_size: int = 8, aspect: float = 0.3
) -> np.ndarray:
    """Boolean ``(H, W)`` pixel mask from the patch-grid generators."""
    h, w = shape
    cfg = MaskConfig(mask_size=mask_size, mask_ratio=ratio, aspect=aspect, seed=seed)
    return make_mask(strategy, cfg, h, w).pixels(h, w)


def occlude(
    image: np.ndarray, strategy: str, ratio: float = 0.25, seed: int = 0, mask_size: int = 8, aspect: float = 0.3
) -> np.ndarray:
    """Fill masked patches with the mean RGB of the complete image."""
    x = np.asarray(image, dtype=np.float64)
    mask = occlusion_mask(x.shape[:2], strategy, ratio, seed, mask_size, aspect)
    out = x.copy()
    out[mask] = x.mean(axis=(0, 1))
    return out


# ----------------------------------------------------------------------
# attacks
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class AttackSpec:
    mode: str  # untargeted | flip_horizontal | flip_vertical
    epsilon: float

    def __post_init__(self):
        if self.mode not in ("untargeted", "flip_horizontal", "flip_vertical"):
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @property
    def iterations(self) -> int:
        return attack_iterations(self.epsilon)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    iterations: int
    objective_clean: np.ndarray  # per image
    objective_adv: np.ndarray


def attack_iterations(eps: float) -> int:
    """``min(eps + 4, ceil(1.25 * eps))``."""
    return int(min(eps + 4, math.ceil(1.25 * eps)))


def _require_gradients(model) -> None:
    if not getattr(model, "differentiable", False) or not hasattr(model, "depth_net"):
        raise TypeError(f"{type(model).__name__} does not expose gradients; attacks need a differentiable model")


def _check_eps(eps: float) -> None:
    if eps <= 0:
        raise ValueError("epsilon must be positive")
    if eps not in STANDARD_EPSILONS:
        warnings.warn(f"epsilon {eps} is outside the standard set {STANDARD_EPSILONS}", stacklevel=3)


def _sign_steps(x0: np.ndarray, eps: float, grad_fn, ascend: bool) -> tuple[np.ndarray, int]:
    """Iterated sign-gradient steps of size eps/N (on the 0..255 scale) with box projection."""
    n = attack_iterations(eps)
    radius = eps / 255.0
    alpha = radius / n
    lo, hi = np.maximum(x0 - radius, 0.0), np.minimum(x0 + radius, 1.0)
    x = x0.copy()
    direction = 1.0 if ascend else -1.0
    for _ in range(n):
        x = np.clip(x + direction * alpha * np.sign(grad_fn(x)), lo, hi)
    return x, n


def _triplet_objective(model, frames: np.ndarray, K: Intrinsics, weights: LossWeights, combine: str):
    def value_and_grad(target: np.ndarray, need_grad: bool = True):
        x = Tensor(target[None], requires_grad=need_grad)
        if need_grad:
            loss = triplet_loss(model, frames[None, 0], x, frames[None, 2], K, weights, combine=combine)
            T.backward(loss)
            model.zero_grad()
            return loss.item(), x.grad[0]
        with T.no_grad():
            loss = triplet_loss(model, frames[None, 0], x, frames[None, 2], K, weights, combine=combine)
        return loss.item(), None

    return value_and_grad


def untargeted_attack(
    model,
    triplets: np.ndarray,
    K: Intrinsics,
    eps: float,
    weights: LossWeights = LossWeights(),
    combine: str = "min",
) -> AttackResult:
    """Raise L_depth by perturbing the target frame I0 of each triplet.

    ``triplets`` is ``(3, H, W, 3)`` or ``(B, 3, H, W, 3)``; each triplet is
    attacked on its own so that one image's loss never steers another's.
    Starts at the clean image (no random start).
    """
    _require_gradients(model)
    _check_eps(eps)
    triplets = np.asarray(triplets, dtype=np.float64)
    single = triplets.ndim == 4
    if single:
        triplets = triplets[None]
    adv, before, after = [], [], []
    n = attack_iterations(eps)
    for frames in triplets:
        fn = _triplet_objective(model, frames, K, weights, combine)
        x, n = _sign_steps(frames[1], eps, lambda x: fn(x)[1], ascend=True)
        adv.append(x)
        before.append(fn(frames[1], False)[0])
        after.append(fn(x, False)[0])
    out = np.array(adv)
    return AttackResult(out[0] if single else out, n, np.array(before), np.array(after))


def flip_depth(depth: np.ndarray, direction: str) -> np.ndarray:
    if direction == "horizontal":
        return depth[..., :, ::-1]
    if direction == "vertical":
        return depth[..., ::-1, :]
    raise ValueError(f"flip direction must be 'horizontal' or 'vertical', got {direction!r}")


def targeted_flip_attack(model, images: np.ndarray, eps: float, direction: str) -> AttackResult:
    """Steer the predicted depth of each image toward its own flipped prediction.

    Descends ``RMSE(depth(x), flip(depth(I0)))``. The step direction uses
    the sign of the squared-error gradient, which matches the RMSE gradient
    wherever the RMSE is nonzero and stays defined at zero.
    """
    _require_gradients(model)
    _check_eps(eps)
    flip_depth(np.zeros((1, 1)), direction)  # validate early
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    adv, before, after = [], [], []
    n = attack_iterations(eps)
    for img in images:
        target = flip_depth(model.predict_depth(img[None])[0], direction).copy()

        def grad_fn(x):
            xt = Tensor(x[None], requires_grad=True)
            d = model.depth_net(xt).depth
            T.backward(T.mean((d - target[None]) ** 2))
            model.zero_grad()
            return xt.grad[0]

        def rmse(x):
            return float(np.sqrt(np.mean((model.predict_depth(x[None])[0] - target) ** 2)))

        r0 = rmse(img)
        if r0 == 0.0:
            x = img.copy()
        else:
            x, n = _sign_steps(img, eps, grad_fn, ascend=False)
        adv.append(x)
        before.append(r0)
        after.append(rmse(x))
    out = np.array(adv)
    return AttackResult(out[0] if single else out, n, np.array(before), np.array(after))


def run_attack(model, triplets: np.ndarray, K: Intrinsics, spec: AttackSpec, weights=LossWeights()) -> AttackResult:
    triplets = np.asarray(triplets, dtype=np.float64)
    if spec.mode == "untargeted":
        return untargeted_attack(model, triplets, K, spec.epsilon, weights)
    targets = triplets[..., 1, :, :, :]
    return targeted_flip_attack(model, targets, spec.epsilon, spec.mode.split("_", 1)[1])
