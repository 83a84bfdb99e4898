"""Toy vision-transformer depth and ego-motion networks plus checkpoint I/O."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .geometry import Pose
from .masking import apply_mask
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MIMD"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 64
    image_w: int = 64
    patch_edge: int = 8
    width: int = 64
    depth_layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if self.image_h % self.patch_edge or self.image_w % self.patch_edge:
            raise ValueError(
                f"image {self.image_h}x{self.image_w} not divisible by patch edge {self.patch_edge}"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_h // self.patch_edge, self.image_w // self.patch_edge

    @property
    def num_tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig = field(default_factory=ViTConfig)
    d_min: float = 0.1
    d_max: float = 100.0
    pose_scale: float = 0.01
    mask_token_std: float = 0.02
    per_position_mask_tokens: bool = False
    init_std: float = 0.02

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["vit"] = ViTConfig(**d.get("vit", {}))
        return cls(**d)


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(trunc_normal(rng, (d_in, d_out), std))
        self.bias = param(np.zeros(d_out))

    def __call__(self, x) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, std: float):
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, std)
        self.proj = Linear(dim, dim, rng, std)
        self.last_attention: np.ndarray | None = None

    def __call__(self, x: Tensor) -> Tensor:
        B, N, D = x.shape
        h = self.heads
        dh = D // h
        qkv = T.transpose(T.reshape(self.qkv(x), (B, N, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (dh**-0.5), axis=-1)
        self.last_attention = att.data
        out = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, N, D))
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, std: float):
        self.fc1 = Linear(dim, hidden, rng, std)
        self.fc2 = Linear(hidden, dim, rng, std)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng, std: float):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, std)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, int(round(dim * mlp_ratio)), rng, std)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def patchify(images, patch: int) -> Tensor:
    """``(B, H, W, C) -> (B, N, patch*patch*C)`` in row-major patch order."""
    images = T._as_tensor(images)
    B, H, W, C = images.shape
    gh, gw = H // patch, W // patch
    x = T.reshape(images, (B, gh, patch, gw, patch, C))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, gh * gw, patch * patch * C))


def unpatchify(tokens, patch: int, gh: int, gw: int, channels: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = T._as_tensor(tokens)
    B = tokens.shape[0]
    x = T.reshape(tokens, (B, gh, gw, patch, patch, channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    return T.reshape(x, (B, gh * patch, gw * patch, channels))


class Encoder(Module):
    def __init__(self, cfg: ViTConfig, in_channels: int, rng, std: float = 0.02):
        self.cfg = cfg
        self.in_channels = in_channels
        self.patch_proj = Linear(cfg.patch_edge**2 * in_channels, cfg.width, rng, std)
        self.pos_embed = param(trunc_normal(rng, (cfg.num_tokens, cfg.width), std))
        self.blocks = [Block(cfg.width, cfg.heads, cfg.mlp_ratio, rng, std) for _ in range(cfg.depth_layers)]
        self.norm = LayerNorm(cfg.width)

    def embed(self, images) -> Tensor:
        images = T._as_tensor(images)
        expect = (self.cfg.image_h, self.cfg.image_w, self.in_channels)
        if images.ndim != 4 or images.shape[1:] != expect:
            raise T.ShapeError(f"expected (B, {expect[0]}, {expect[1]}, {expect[2]}) images, got {images.shape}")
        return self.patch_proj(patchify(images, self.cfg.patch_edge))

    def tokens_in(self, images, token_mask=None, mask_token=None) -> Tensor:
        """Token sequence entering the first block: embed, substitute masks, add positions."""
        x = self.embed(images)
        x = apply_mask(x, token_mask, mask_token)
        return x + self.pos_embed

    def encode(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)

    def __call__(self, images, token_mask=None, mask_token=None) -> Tensor:
        return self.encode(self.tokens_in(images, token_mask, mask_token))


@dataclass
class DepthNetOutput:
    disparity: Tensor
    depth: Tensor


def disparity_to_depth(disp, d_min: float, d_max: float):
    lo, hi = 1.0 / d_max, 1.0 / d_min
    return 1.0 / (lo + (hi - lo) * disp)


class DepthNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        v = cfg.vit
        self.encoder = Encoder(v, 3, rng, cfg.init_std)
        rows = v.num_tokens if cfg.per_position_mask_tokens else 1
        self.mask_token = param(rng.normal(0.0, cfg.mask_token_std, size=(rows, v.width)))
        self.head = Linear(v.width, v.patch_edge**2, rng, cfg.init_std)

    def __call__(self, images, token_mask=None) -> DepthNetOutput:
        v = self.cfg.vit
        feats = self.encoder(images, token_mask, self.mask_token)
        logits = unpatchify(self.head(feats), v.patch_edge, *v.grid, 1)
        B = logits.shape[0]
        disp = T.sigmoid(T.reshape(logits, (B, v.image_h, v.image_w)))
        return DepthNetOutput(disp, disparity_to_depth(disp, self.cfg.d_min, self.cfg.d_max))


class EgoMotionNet(Module):
    """Predicts the pose taking the first frame of a 6-channel pair to the second."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        v = cfg.vit
        self.encoder = Encoder(v, 6, rng, cfg.init_std)
        rows = v.num_tokens if cfg.per_position_mask_tokens else 1
        self.mask_token = param(rng.normal(0.0, cfg.mask_token_std, size=(rows, v.width)))
        self.head = Linear(v.width, 6, rng, cfg.init_std)

    def __call__(self, pairs, token_mask=None) -> Pose:
        feats = self.encoder(pairs, token_mask, self.mask_token)
        out = self.head(T.mean(feats, axis=1)) * self.cfg.pose_scale
        return Pose(out[:, 0:3], out[:, 3:6])


class DepthModel(Module):
    """Depth and ego-motion networks trained together."""

    differentiable = True

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.depth_net = DepthNet(cfg, rng)
        self.ego_net = EgoMotionNet(cfg, rng)

    def predict_depth(self, images: np.ndarray, batch: int = 16) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        single = images.ndim == 3
        if single:
            images = images[None]
        outs = []
        with T.no_grad():
            for i in range(0, len(images), batch):
                outs.append(self.depth_net(images[i : i + batch]).depth.data)
        out = np.concatenate(outs)
        return out[0] if single else out

    def predict_pose(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        """4x4 transforms taking first-camera points to second-camera points."""
        first = np.asarray(first, dtype=np.float64)
        second = np.asarray(second, dtype=np.float64)
        single = first.ndim == 3
        if single:
            first, second = first[None], second[None]
        with T.no_grad():
            pose = self.ego_net(np.concatenate([first, second], axis=-1))
        M = pose.matrix()
        return M[0] if single else M

    # -- persistence -----------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
            p.zero_grad()


def checkpoint_bytes(model: DepthModel) -> bytes:
    """Serialise ``model`` in the little-endian ``MIMD`` layout.

    ``magic[4] | u32 version | u32 config_len | config (UTF-8 JSON) |
    u32 n_records | n_records * (u32 name_len | name | u32 rank |
    rank * u64 extent | float64 payload)``
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}Q", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> DepthModel:
    view = memoryview(data)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint: bad magic")
    pos = 4

    def u32():
        nonlocal pos
        (x,) = struct.unpack_from("<I", view, pos)
        pos += 4
        return x

    version = u32()
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    n = u32()
    cfg = ModelConfig.from_dict(json.loads(bytes(view[pos : pos + n]).decode("utf-8")))
    pos += n
    state = {}
    for _ in range(u32()):
        n = u32()
        name = bytes(view[pos : pos + n]).decode("utf-8")
        pos += n
        rank = u32()
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(view, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise ValueError(f"trailing bytes in checkpoint ({len(data) - pos})")
    model = DepthModel(cfg)
    model.load_state_dict(state)
    return model


def save_checkpoint(model: DepthModel, path) -> bytes:
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> DepthModel:
    return model_from_bytes(Path(path).read_bytes())
