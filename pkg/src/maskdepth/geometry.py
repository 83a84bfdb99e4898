"""Pinhole camera, rigid poses and the differentiable inverse warp.

Conventions: camera coordinates are x right, y down, z forward. A
:class:`Pose` maps points expressed in the *target* camera into the *source*
camera, ``p_src = R(rotation) @ p_tgt + translation``. Images are
``(B, H, W, C)`` arrays, depths ``(B, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, Tensor

Z_EPS = 1e-3
_INSIDE_TOL = 1e-6

# K = sum_i r_i * _SKEW[i] is the cross-product matrix of r
_SKEW = np.array(
    [
        [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
        [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
        [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
    ],
    dtype=np.float64,
)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def default(cls, width: int = 64, height: int = 64, focal_scale: float = 0.8) -> "Intrinsics":
        f = focal_scale * width
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def rays(self) -> np.ndarray:
        """K^-1 (u, v, 1) for every pixel, shape ``(H, W, 3)``."""
        v, u = np.mgrid[0 : self.height, 0 : self.width].astype(np.float64)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, width, height
        )


@dataclass
class Pose:
    """Axis-angle rotation and translation, each ``(..., 3)``."""

    rotation: Tensor
    translation: Tensor

    def __post_init__(self):
        self.rotation = T._as_tensor(self.rotation)
        self.translation = T._as_tensor(self.translation)
        if self.rotation.shape != self.translation.shape or self.rotation.shape[-1:] != (3,):
            raise T.ShapeError(
                f"pose rotation {self.rotation.shape} and translation {self.translation.shape} must both be (..., 3)"
            )

    @classmethod
    def identity(cls, batch: int | None = None) -> "Pose":
        shape = (3,) if batch is None else (batch, 3)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def rotation_matrix(self) -> Tensor:
        return axis_angle_to_matrix(self.rotation)

    def inverse(self) -> "Pose":
        # R(-r) == R(r)^T, so the inverse rotation is just the negated vector
        R = self.rotation_matrix()
        t = T.reshape(self.translation, self.translation.shape + (1,))
        t_inv = -T.reshape(T.matmul(T.transpose(R, _swap_last(R.ndim)), t), self.translation.shape)
        return Pose(-self.rotation, t_inv)

    def matrix(self) -> np.ndarray:
        """Homogeneous ``(..., 4, 4)`` numpy matrix (no gradient)."""
        return pose_matrix(self.rotation.data, self.translation.data)

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.rotation[idx], self.translation[idx])


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def axis_angle_to_matrix(r) -> Tensor:
    """Rodrigues' formula, ``(..., 3) -> (..., 3, 3)``, with a Taylor branch near zero."""
    r = T._as_tensor(r)
    lead = r.shape[:-1]
    K = T.reshape(T.matmul(r, _SKEW.reshape(3, 9)), lead + (3, 3))
    th2 = T.reshape(T.sum(r * r, axis=-1), lead + (1, 1))
    small = th2.data < 1e-14
    safe = T.where(small, 1.0, th2)
    th = T.sqrt(safe)
    a = T.where(small, 1.0 - th2 / 6.0, T.sin(th) / th)
    b = T.where(small, 0.5 - th2 / 24.0, (1.0 - T.cos(th)) / safe)
    return np.eye(3) + a * K + b * T.matmul(K, K)


def axis_angle_to_matrix_np(r: np.ndarray) -> np.ndarray:
    with T.no_grad():
        return axis_angle_to_matrix(np.asarray(r, dtype=np.float64)).data


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    """Inverse of Rodrigues for a single ``3x3`` rotation (numpy only)."""
    R = np.asarray(R, dtype=np.float64)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-7:
        return 0.5 * w
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = A[np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return th * axis
    return th / (2.0 * np.sin(th)) * w


def pose_matrix(rotation: np.ndarray, translation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    lead = rotation.shape[:-1]
    M = np.zeros(lead + (4, 4))
    M[..., :3, :3] = axis_angle_to_matrix_np(rotation)
    M[..., :3, 3] = translation
    M[..., 3, 3] = 1.0
    return M


def pose_from_matrix(M: np.ndarray) -> Pose:
    """Pose from a ``(..., 4, 4)`` rigid transform."""
    M = np.asarray(M, dtype=np.float64)
    R = M[..., :3, :3].reshape(-1, 3, 3)
    rot = np.stack([matrix_to_axis_angle(r) for r in R]).reshape(M.shape[:-2] + (3,))
    return Pose(Tensor(rot), Tensor(M[..., :3, 3].copy()))


def invert_matrix(M: np.ndarray) -> np.ndarray:
    R, t = M[..., :3, :3], M[..., :3, 3]
    out = np.zeros_like(M)
    Rt = np.swapaxes(R, -1, -2)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -(Rt @ t[..., None])[..., 0]
    out[..., 3, 3] = 1.0
    return out


# ----------------------------------------------------------------------
# projection
# ----------------------------------------------------------------------
def backproject(depth, K: Intrinsics) -> Tensor:
    """Lift a ``(B, H, W)`` depth map to camera points ``(B, H, W, 3)``."""
    depth = T._as_tensor(depth)
    if depth.shape[-2:] != (K.height, K.width):
        raise T.ShapeError(f"depth {depth.shape} does not match intrinsics {K.height}x{K.width}")
    if np.any(depth.data <= 0):
        raise DomainError("depth must be strictly positive")
    return T.reshape(depth, depth.shape + (1,)) * K.rays()


def transform_points(points, pose: Pose) -> Tensor:
    """Apply ``R p + t`` to ``(B, H, W, 3)`` points."""
    points = T._as_tensor(points)
    lead = points.shape[:-3]
    hw = points.shape[-3] * points.shape[-2]
    flat = T.reshape(points, lead + (hw, 3))
    R = pose.rotation_matrix()
    Rt = T.transpose(R, _swap_last(R.ndim))
    t = T.reshape(pose.translation, pose.translation.shape[:-1] + (1, 3))
    moved = T.matmul(flat, Rt) + t
    return T.reshape(moved, points.shape)


def project(points, pose: Pose, K: Intrinsics, z_eps: float = Z_EPS):
    """Transform points by ``pose`` and project with ``K``.

    Returns ``(u, v, valid)`` where ``u``/``v`` are ``(B, H, W)`` tensors and
    ``valid`` is a boolean array that is False where the transformed depth is
    at or below ``z_eps``.
    """
    moved = transform_points(points, pose)
    X = moved[..., 0]
    Y = moved[..., 1]
    Z = moved[..., 2]
    valid = Z.data > z_eps
    Zs = T.clamp(Z, lo=z_eps)
    u = X / Zs * K.fx + K.cx
    v = Y / Zs * K.fy + K.cy
    return u, v, valid


def pixel_grid(K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0 : K.height, 0 : K.width].astype(np.float64)
    return u, v


def bilinear_sample(src, u, v, valid=None):
    """Sample ``src`` ``(B, H, W, C)`` at sub-pixel locations ``(u, v)``.

    Coordinates are in pixels; samples are border-clamped. Locations outside
    the image (or flagged invalid by the caller) yield 0 and are reported as
    False in the returned validity mask. Differentiable with respect to both
    ``src`` and the coordinates.
    """
    src = T._as_tensor(src)
    u = T._as_tensor(u)
    v = T._as_tensor(v)
    if src.ndim != 4:
        raise T.ShapeError(f"src must be (B, H, W, C), got {src.shape}")
    B, H, W, C = src.shape
    if u.shape != v.shape or u.shape[0] != B:
        raise T.ShapeError(f"grid {u.shape}/{v.shape} does not match batch of {src.shape}")
    ud, vd = u.data, v.data
    inside = (
        np.isfinite(ud)
        & np.isfinite(vd)
        & (ud >= -_INSIDE_TOL)
        & (ud <= W - 1 + _INSIDE_TOL)
        & (vd >= -_INSIDE_TOL)
        & (vd <= H - 1 + _INSIDE_TOL)
    )
    if valid is not None:
        inside &= np.asarray(valid, dtype=bool)

    uc = T.clamp(T.where(np.isfinite(ud), u, 0.0), 0.0, W - 1.0)
    vc = T.clamp(T.where(np.isfinite(vd), v, 0.0), 0.0, H - 1.0)
    x0 = np.clip(np.floor(uc.data), 0, max(W - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(vc.data), 0, max(H - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = T.reshape(uc - x0.astype(np.float64), u.shape + (1,))
    wy = T.reshape(vc - y0.astype(np.float64), v.shape + (1,))

    b = np.arange(B).reshape((B,) + (1,) * (u.ndim - 1))
    ch = np.arange(C)

    def corner(y, x):
        return T.gather(src, (((b * H + y) * W + x) * C)[..., None] + ch)

    top = (1.0 - wx) * corner(y0, x0) + wx * corner(y0, x1)
    bottom = (1.0 - wx) * corner(y1, x0) + wx * corner(y1, x1)
    out = top * (1.0 - wy) + bottom * wy
    return out * inside[..., None].astype(np.float64), inside


def synthesize_target(src, depth, pose: Pose, K: Intrinsics):
    """Warp ``src`` into the target view: backproject, transform, project, sample."""
    points = backproject(depth, K)
    u, v, zvalid = project(points, pose, K)
    return bilinear_sample(src, u, v, zvalid)
