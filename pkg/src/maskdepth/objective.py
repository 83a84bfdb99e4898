"""The joint depth/ego-motion objective evaluated on a batch of triplets."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .geometry import Intrinsics
from .losses import LossWeights, depth_loss
from .tensor import Tensor


def ego_pairs(prev, target, nxt) -> Tensor:
    """Stack ``cat(I-1, I0)`` and ``cat(I0, I1)`` channel-wise into one ``(2B, H, W, 6)`` batch."""
    first = T.concat([T._as_tensor(prev), T._as_tensor(target)], axis=-1)
    second = T.concat([T._as_tensor(target), T._as_tensor(nxt)], axis=-1)
    return T.concat([first, second], axis=0)


def source_poses(model, prev, target, nxt, ego_mask: np.ndarray | None = None):
    """Poses mapping target-camera points into the I-1 and I1 cameras.

    The ego-motion network predicts the transform taking its first input's
    camera to its second's, so the I-1 pose is the inverse of its output on
    ``(I-1, I0)`` while the I1 pose is used as predicted on ``(I0, I1)``.
    """
    B = T._as_tensor(target).shape[0]
    if ego_mask is not None:
        ego_mask = np.asarray(ego_mask, dtype=bool)
        if ego_mask.ndim == 2:
            ego_mask = np.concatenate([ego_mask, ego_mask], axis=0)
    pose = model.ego_net(ego_pairs(prev, target, nxt), ego_mask)
    return pose[0:B].inverse(), pose[B : 2 * B]


def triplet_loss(
    model,
    prev,
    target,
    nxt,
    K: Intrinsics,
    weights: LossWeights = LossWeights(),
    depth_mask: np.ndarray | None = None,
    ego_mask: np.ndarray | None = None,
    loss_region: str = "complete",
    pixel_mask: np.ndarray | None = None,
    combine: str = "min",
    return_parts: bool = False,
):
    """L_depth for ``(B, H, W, 3)`` frame batches with optional token masks."""
    out = model.depth_net(target, depth_mask)
    pose_prev, pose_next = source_poses(model, prev, target, nxt, ego_mask)
    return depth_loss(
        target,
        [prev, nxt],
        out.depth,
        [pose_prev, pose_next],
        K,
        weights,
        disparity=out.disparity,
        loss_region=loss_region,
        pixel_mask=pixel_mask,
        combine=combine,
        return_parts=return_parts,
    )
