"""Ray-cast synthetic scenes, triplet datasets and PPM/PFM/manifest I/O.

Scenes are a textured ground plane plus axis-aligned boxes, seen by a
downward-pitched pinhole camera moving forward with a sinusoidal lateral
sway and yaw. World coordinates share the camera convention (x right,
y down, z forward); the ground is the plane ``y = camera_height``.
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, invert_matrix

TILE_LENGTH = 2.0
_MANIFEST_FORMAT = "maskdepth-dataset"


# ----------------------------------------------------------------------
# scene description
# ----------------------------------------------------------------------
@dataclass
class Texture:
    directions: np.ndarray  # (k, 3) world-space wave vectors (unit)
    freqs: np.ndarray  # (k,) cycles per scene unit
    phases: np.ndarray  # (k, 3) per-channel phase
    amps: np.ndarray  # (k,)
    base: np.ndarray  # (3,)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        proj = points @ self.directions.T  # (..., k)
        arg = 2 * np.pi * proj[..., :, None] * self.freqs[:, None] + self.phases
        val = self.base + (self.amps[:, None] * np.sin(arg)).sum(axis=-2)
        return np.clip(val, 0.0, 1.0)


@dataclass
class Scene:
    plane_normals: np.ndarray  # (P, 3)
    plane_offsets: np.ndarray  # (P,)  n . x = offset
    plane_textures: list
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_hi: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_albedo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_texture: Texture | None = None


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_boxes: int = 3
    texture_freq: float = 1.5
    camera_height: float = 0.5
    pitch: float = 0.75
    speed: float = 0.05
    sway_amplitude: float = 0.15
    sway_period: float = 40.0
    yaw_amplitude: float = 0.08
    width: int = 64
    height: int = 64
    focal_scale: float = 0.8
    supersample: int = 3

    @property
    def intrinsics(self) -> Intrinsics:
        return Intrinsics.default(self.width, self.height, self.focal_scale)

    def camera_position(self, k: float) -> np.ndarray:
        phase = 2 * np.pi * k / self.sway_period
        return np.array([self.sway_amplitude * np.sin(phase), 0.0, self.speed * k])

    def trajectory(self, k: int) -> np.ndarray:
        """Camera-to-world 4x4 transform of frame ``k``."""
        phase = 2 * np.pi * k / self.sway_period
        yaw = self.yaw_amplitude * np.cos(phase)
        cy, sy = np.cos(yaw), np.sin(yaw)
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        R_yaw = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        R_pitch = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])
        M = np.eye(4)
        M[:3, :3] = R_yaw @ R_pitch
        M[:3, 3] = self.camera_position(k)
        return M

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                val = d[f.name]
                if f.type == "int":
                    val = int(val)
                elif f.type == "float":
                    val = float(val)
                kw[f.name] = val
        return cls(**kw)


def _texture(rng: np.random.Generator, freq: float, planar_normal=None, k: int = 3) -> Texture:
    dirs = rng.normal(size=(k, 3))
    if planar_normal is not None:
        n = np.asarray(planar_normal, dtype=np.float64)
        dirs -= np.outer(dirs @ n, n)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freqs = freq * np.array([1.0, 1.9, 3.1])[:k]
    return Texture(
        directions=dirs,
        freqs=freqs,
        phases=rng.uniform(0, 2 * np.pi, size=(k, 3)),
        amps=np.array([0.2, 0.13, 0.08])[:k],
        base=rng.uniform(0.35, 0.65, size=3),
    )


def build_scene(spec: SceneSpec, z_lo: float, z_hi: float) -> Scene:
    """Ground plane plus the boxes of every corridor tile overlapping ``[z_lo, z_hi]``."""
    rng = np.random.default_rng([spec.seed, 0])
    ground = _texture(rng, spec.texture_freq, planar_normal=(0, 1, 0))
    box_tex = _texture(rng, spec.texture_freq * 1.5)
    los, his, albedo = [], [], []
    for tile in range(int(math.floor(z_lo / TILE_LENGTH)), int(math.floor(z_hi / TILE_LENGTH)) + 1):
        trng = np.random.default_rng([spec.seed, 1, tile & 0xFFFFFFFF])
        for _ in range(spec.n_boxes):
            z0 = (tile + trng.uniform(0, 1)) * TILE_LENGTH
            x0 = spec.camera_position(z0 / spec.speed)[0] + trng.uniform(-0.55, 0.55)
            wx, wz = trng.uniform(0.12, 0.3, size=2)
            h = trng.uniform(0.1, 0.35)
            lo = np.array([x0 - wx / 2, spec.camera_height - h, z0 - wz / 2])
            hi = np.array([x0 + wx / 2, spec.camera_height, z0 + wz / 2])
            los.append(lo)
            his.append(hi)
            albedo.append(trng.uniform(0.3, 1.0, size=3))
    return Scene(
        plane_normals=np.array([[0.0, 1.0, 0.0]]),
        plane_offsets=np.array([spec.camera_height]),
        plane_textures=[ground],
        box_lo=np.array(los).reshape(-1, 3),
        box_hi=np.array(his).reshape(-1, 3),
        box_albedo=np.array(albedo).reshape(-1, 3),
        box_texture=box_tex,
    )


# ----------------------------------------------------------------------
# ray casting
# ----------------------------------------------------------------------
def _cast(scene: Scene, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit parameter and colour for rays ``origin + t * dirs``."""
    shape = dirs.shape[:-1]
    best_t = np.full(shape, np.inf)
    color = np.zeros(shape + (3,))
    for n, off, tex in zip(scene.plane_normals, scene.plane_offsets, scene.plane_textures):
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (off - origin @ n) / denom
        hit = (np.abs(denom) > 1e-12) & (t > 0) & (t < best_t)
        if hit.any():
            best_t = np.where(hit, t, best_t)
            pts = origin + t[hit][:, None] * dirs[hit]
            color[hit] = tex(pts)
    for lo, hi, alb in zip(scene.box_lo, scene.box_hi, scene.box_albedo):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
        tmin = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
        tmax = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
        t_near = tmin.max(axis=-1)
        t_far = tmax.min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 0) & (t_near < best_t)
        if hit.any():
            best_t = np.where(hit, t_near, best_t)
            pts = origin + t_near[hit][:, None] * dirs[hit]
            color[hit] = alb * (0.6 + 0.4 * (2 * scene.box_texture(pts) - 1))
    return best_t, np.clip(color, 0.0, 1.0)


def render(scene: Scene, cam_to_world: np.ndarray, K: Intrinsics, supersample: int = 1):
    """Render ``(image (H, W, 3), depth (H, W))``; depth is camera-frame z."""
    R = cam_to_world[:3, :3]
    c = cam_to_world[:3, 3]
    rays = K.rays()  # z component is 1, so the hit parameter is the z-depth
    depth, _ = _cast(scene, c, rays @ R.T)
    if not np.all(np.isfinite(depth)):
        raise ValueError("scene does not cover every pixel; adjust the camera or add a backdrop")
    s = supersample
    if s <= 1:
        _, img = _cast(scene, c, rays @ R.T)
        return img, depth
    offs = (np.arange(s) + 0.5) / s - 0.5
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    dv, du = np.meshgrid(offs, offs, indexing="ij")
    uu = u[None] + du.reshape(-1, 1, 1)
    vv = v[None] + dv.reshape(-1, 1, 1)
    sub = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], axis=-1)
    _, col = _cast(scene, c, sub @ R.T)
    return col.mean(axis=0), depth


def render_scene(spec: SceneSpec, frame_index: int):
    pose = spec.trajectory(frame_index)
    z = pose[2, 3]
    scene = build_scene(spec, z - TILE_LENGTH, z + 3 * TILE_LENGTH)
    return render(scene, pose, spec.intrinsics, spec.supersample)


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------
@dataclass
class Dataset:
    """Triplets in memory. ``frames`` ``(n, 3, H, W, 3)`` hold I-1, I0, I1."""

    frames: np.ndarray
    depth: np.ndarray
    poses: np.ndarray  # (n, 3, 4, 4) camera-to-world
    K: Intrinsics
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def targets(self) -> np.ndarray:
        return self.frames[:, 1]

    def relative_pose(self, i: int, slot: int) -> np.ndarray:
        """Transform taking target-camera points to the camera of ``slot`` (0 or 2)."""
        return invert_matrix(self.poses[i, slot]) @ self.poses[i, 1]

    def relative_poses(self, slot: int) -> np.ndarray:
        return invert_matrix(self.poses[:, slot]) @ self.poses[:, 1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.frames[idx], self.depth[idx], self.poses[idx], self.K, dict(self.meta))

    def with_frames(self, frames: np.ndarray, **meta) -> "Dataset":
        m = dict(self.meta)
        m.update(meta)
        return Dataset(np.asarray(frames, dtype=np.float64), self.depth, self.poses, self.K, m)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid that PPM storage uses."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def generate_triplets(spec: SceneSpec, n_triplets: int) -> Dataset:
    if n_triplets < 1:
        raise ValueError("need at least one triplet")
    K = spec.intrinsics
    frames = np.zeros((n_triplets, 3, K.height, K.width, 3))
    depth = np.zeros((n_triplets, K.height, K.width))
    poses = np.zeros((n_triplets, 3, 4, 4))
    for i in range(n_triplets):
        rng = np.random.default_rng([spec.seed, 2, i])
        sub = replace(spec, seed=int(rng.integers(0, 2**31)))
        k0 = int(rng.integers(1, 100_000))
        for slot, k in enumerate((k0 - 1, k0, k0 + 1)):
            img, d = render_scene(sub, k)
            frames[i, slot] = quantize(img)
            poses[i, slot] = sub.trajectory(k)
            if slot == 1:
                depth[i] = d.astype(np.float32).astype(np.float64)
    meta = {"seed": spec.seed, "n_triplets": n_triplets, "spec": spec.to_dict()}
    return Dataset(frames, depth, poses, K, meta)


def generate_sequence(spec: SceneSpec, n_frames: int, start: int = 0):
    """Consecutive frames of one scene: ``(images, depths, cam_to_world)``."""
    imgs, depths, poses = [], [], []
    for k in range(start, start + n_frames):
        img, d = render_scene(spec, k)
        imgs.append(quantize(img))
        depths.append(d)
        poses.append(spec.trajectory(k))
    return np.array(imgs), np.array(depths), np.array(poses)


# -- file formats ------------------------------------------------------
def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM needs (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(raw.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def write_pgm(path, image: np.ndarray) -> None:
    """Greyscale ``(H, W)`` image in [0, 1] as binary PGM (maxval 255)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM needs an (H, W) image, got {image.shape}")
    h, w = image.shape
    raw = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(raw.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if m is None:
            raise ValueError("truncated header")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (float32, bottom row first)."""
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError(f"PFM writer expects (H, W), got {depth.shape}")
    h, w = depth.shape
    try:
        with open(path, "wb") as f:
            f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            f.write(np.flipud(depth).astype("<f4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def read_pfm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    (magic, w, h, scale), pos = _header_tokens(data, 4)
    if magic != b"Pf":
        raise ValueError(f"{path}: not a grayscale PFM")
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return np.flipud(raw.reshape(h, w)).astype(np.float64)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, out_dir, extra: dict | None = None) -> Path:
    """Write ``frames/%06d.ppm``, ``depth/%06d.pfm`` and ``manifest.txt``."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    K = ds.K
    lines = [
        "# synthetic triplet dataset",
        f"format={_MANIFEST_FORMAT}",
        "version=1",
        f"width={K.width}",
        f"height={K.height}",
        f"fx={_fmt(K.fx)}",
        f"fy={_fmt(K.fy)}",
        f"cx={_fmt(K.cx)}",
        f"cy={_fmt(K.cy)}",
        f"n_triplets={len(ds)}",
    ]
    meta = dict(ds.meta)
    if extra:
        meta.update(extra)
    spec = meta.pop("spec", None)
    meta.pop("n_triplets", None)
    for key, val in sorted(meta.items()):
        lines.append(f"{key}={val}")
    if spec:
        for key, val in spec.items():
            if isinstance(val, (list, tuple)):
                val = ",".join(_fmt(v) for v in val)
            lines.append(f"spec.{key}={val}")
    lines.append("# frame <index> <triplet> <slot -1|0|1> then the camera-to-world 3x4 matrix, row-major")
    for i in range(len(ds)):
        for slot in range(3):
            idx = 3 * i + slot
            write_ppm(out / "frames" / f"{idx:06d}.ppm", ds.frames[i, slot])
            row = " ".join(_fmt(x) for x in ds.poses[i, slot, :3, :].reshape(-1))
            lines.append(f"frame {idx:06d} {i} {slot - 1} {row}")
        write_pfm(out / "depth" / f"{i:06d}.pfm", ds.depth[i])
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out


def make_dataset(spec: SceneSpec, n_triplets: int, out_dir) -> Dataset:
    ds = generate_triplets(spec, n_triplets)
    write_dataset(ds, out_dir)
    return ds


def read_manifest(path) -> tuple[dict, list]:
    header: dict[str, str] = {}
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("frame "):
            parts = line.split()
            rows.append((int(parts[1]), int(parts[2]), int(parts[3]), [float(x) for x in parts[4:]]))
        else:
            key, _, val = line.partition("=")
            header[key.strip()] = val.strip()
    return header, rows


def load_dataset(path) -> Dataset:
    root = Path(path)
    header, rows = read_manifest(root / "manifest.txt")
    if header.get("format") != _MANIFEST_FORMAT:
        raise ValueError(f"{root}: manifest is not a {_MANIFEST_FORMAT} manifest")
    w, h = int(header["width"]), int(header["height"])
    K = Intrinsics(float(header["fx"]), float(header["fy"]), float(header["cx"]), float(header["cy"]), w, h)
    n = int(header["n_triplets"])
    frames = np.zeros((n, 3, h, w, 3))
    poses = np.zeros((n, 3, 4, 4))
    poses[:, :, 3, 3] = 1.0
    for idx, trip, slot, vals in rows:
        frames[trip, slot + 1] = read_ppm(root / "frames" / f"{idx:06d}.ppm")
        poses[trip, slot + 1, :3, :] = np.array(vals).reshape(3, 4)
    depth = np.stack([read_pfm(root / "depth" / f"{i:06d}.pfm") for i in range(n)])
    meta: dict = {}
    spec = {}
    for key, val in header.items():
        if key.startswith("spec."):
            spec[key[5:]] = val
        elif key not in {"format", "version", "width", "height", "fx", "fy", "cx", "cy", "n_triplets"}:
            meta[key] = val
    if spec:
        meta["spec"] = spec
    meta["n_triplets"] = n
    return Dataset(frames, depth, poses, K, meta)
