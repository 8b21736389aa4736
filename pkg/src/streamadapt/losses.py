"""Training objectives with analytic gradients.

Each loss returns a small result object holding the value, the gradients
with respect to its differentiable inputs, and ``branches``: the discrete
decisions (interpolation cells, residual signs, winners of a min, selected
pixels) the value depends on.  Finite-difference checks use ``branches`` to
tell when a perturbation crossed a non-differentiable point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import IGNORE_INDEX, InvalidInputError, UnusableFrameError
from .imaging import bilinear_sample, reproject, rotation_from_axis_angle, rotation_jacobian


@dataclass(frozen=True)
class LossWeights:
    lambda_pr: float = 1.0
    lambda_sm: float = 1e-3
    lambda_center: float = 200.0 / 255.0**2
    lambda_offset: float = 0.01
    bootstrap_fraction: float = 0.2
    motion_threshold: float = 0.03
    center_sigma: float = 8.0

    def __post_init__(self):
        for name in ("lambda_pr", "lambda_sm", "lambda_center", "lambda_offset", "motion_threshold"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be non-negative")
        if not 0 < self.bootstrap_fraction <= 1:
            raise InvalidInputError("bootstrap_fraction must lie in (0, 1]")
        if self.center_sigma <= 0:
            raise InvalidInputError("center_sigma must be positive")


@dataclass
class PhotometricResult:
    value: float
    reprojection: float
    smoothness: float
    grad_depth: np.ndarray
    grad_pose: np.ndarray
    valid: np.ndarray
    branches: tuple = field(repr=False, default=())


def _reprojection_terms(key, neighbor, depth, pose, intrinsics):
    w, t = pose[:3], pose[3:]
    rot = rotation_from_axis_angle(w)
    coords, ok, points, cam = reproject(depth, rot, t, intrinsics)
    sampled, inb, (gu, gv) = bilinear_sample(neighbor, coords, with_grad=True)
    valid = ok & inb
    resid = sampled - key
    err = np.abs(resid).mean(axis=-1)
    return dict(rot=rot, coords=coords, points=points, cam=cam, gu=gu, gv=gv, valid=valid,
                resid=resid, err=err, w=w)


def _smoothness(depth, image):
    """Edge-aware smoothness of mean-normalised disparity and its depth gradient."""
    disp = 1.0 / depth
    mean = disp.mean()
    dn = disp / mean
    gx = dn[:, 1:] - dn[:, :-1]
    gy = dn[1:, :] - dn[:-1, :]
    wx = np.exp(-np.abs(image[:, 1:] - image[:, :-1]).mean(axis=-1))
    wy = np.exp(-np.abs(image[1:, :] - image[:-1, :]).mean(axis=-1))
    value = 0.0
    g_dn = np.zeros_like(dn)
    if gx.size:
        value += float((np.abs(gx) * wx).mean())
        g = np.sign(gx) * wx / gx.size
        g_dn[:, 1:] += g
        g_dn[:, :-1] -= g
    if gy.size:
        value += float((np.abs(gy) * wy).mean())
        g = np.sign(gy) * wy / gy.size
        g_dn[1:, :] += g
        g_dn[:-1, :] -= g
    g_disp = g_dn / mean - (g_dn * disp).sum() / (mean**2 * disp.size)
    return value, -g_disp / depth**2, (np.sign(gx), np.sign(gy))


def photometric_loss(frames, depth, poses, intrinsics, weights=LossWeights()):
    """Min-reprojection L1 error plus edge-aware disparity smoothness.

    Parameters
    ----------
    frames : three (H, W, 3) images, oldest first; the last is the key frame.
    depth : (H, W) positive depth of the key frame.
    poses : (2, 6) array; row ``j`` maps key-camera points into the camera of
        ``frames[j]`` as ``(axis-angle, translation)``.
    intrinsics : CameraIntrinsics shared by the triplet.

    The reprojection term is the per-pixel minimum of the two neighbours'
    channel-mean absolute errors, averaged over pixels where at least one
    neighbour is valid.
    """
    key = np.asarray(frames[2], dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    poses = np.asarray(poses, dtype=np.float64).reshape(2, 6)
    if depth.shape != key.shape[:2]:
        raise InvalidInputError(f"depth shape {depth.shape} does not match frame {key.shape[:2]}")
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise InvalidInputError("predicted depth must be finite and positive")
    terms = [_reprojection_terms(key, frames[j], depth, poses[j], intrinsics) for j in range(2)]
    v0, v1 = terms[0]["valid"], terms[1]["valid"]
    e0, e1 = terms[0]["err"], terms[1]["err"]
    pick1 = np.where(v0 & v1, e1 < e0, v1)
    valid = v0 | v1
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UnusableFrameError("no pixel reprojects into either neighbour")
    per_pixel = np.where(pick1, e1, e0)
    reprojection = float(per_pixel[valid].sum() / n_valid)

    grad_depth = np.zeros_like(depth)
    grad_pose = np.zeros((2, 6))
    fx, fy = intrinsics.fx, intrinsics.fy
    rays = None
    for j, term in enumerate(terms):
        chosen = valid & (pick1 if j == 1 else ~pick1)
        g_err = np.where(chosen, weights.lambda_pr / n_valid, 0.0)
        g_s = g_err[..., None] * np.sign(term["resid"]) / key.shape[2]
        g_u = (g_s * term["gu"]).sum(axis=-1)
        g_v = (g_s * term["gv"]).sum(axis=-1)
        cam = term["cam"]
        z = np.where(chosen, cam[..., 2], 1.0)
        g_cam = np.stack(
            [g_u * fx / z, g_v * fy / z, -(g_u * fx * cam[..., 0] + g_v * fy * cam[..., 1]) / z**2],
            axis=-1,
        )
        g_cam[~chosen] = 0.0
        points = term["points"]
        if rays is None:
            rays = points / depth[..., None]
        grad_depth += (g_cam * (rays @ term["rot"].T)).sum(axis=-1)
        grad_pose[j, 3:] = g_cam.reshape(-1, 3).sum(axis=0)
        outer = g_cam.reshape(-1, 3).T @ points.reshape(-1, 3)
        grad_pose[j, :3] = np.einsum("ijk,ij->k", rotation_jacobian(term["w"]), outer)

    smooth, g_smooth, smooth_signs = _smoothness(depth, key)
    grad_depth += weights.lambda_sm * g_smooth
    value = weights.lambda_pr * reprojection + weights.lambda_sm * smooth
    branches = (
        v0, v1, pick1 & valid,
        *(np.floor(t["coords"]).astype(np.int64)[t["valid"]] for t in terms),
        *(np.sign(t["resid"])[t["valid"]] for t in terms),
        *smooth_signs,
    )
    return PhotometricResult(value, reprojection, smooth, grad_depth, grad_pose, valid, branches)


@dataclass
class DepthAggregate:
    value: float
    weights: np.ndarray
    gated: bool


def batch_depth_loss(sample_losses, online_motion=math.inf, threshold=0.03):
    """Average per-sample depth losses; the first entry is the online sample.

    The online term is dropped (and the denominator reduced by one) when the
    predicted online translation is below ``threshold`` or its loss is None
    (an unusable frame).  Replay samples are never gated.
    """
    losses = list(sample_losses)
    if not losses:
        raise InvalidInputError("no sample losses given")
    gated = losses[0] is None or online_motion < threshold
    if any(v is None for v in losses[1:]):
        raise InvalidInputError("replay samples must all provide a depth loss")
    weights = np.ones(len(losses))
    if gated:
        weights[0] = 0.0
    denom = weights.sum()
    if denom == 0:
        return DepthAggregate(0.0, weights, gated)
    weights /= denom
    value = sum(w * v for w, v in zip(weights, losses) if w)
    return DepthAggregate(float(value), weights, gated)


@dataclass
class CrossEntropyResult:
    value: float
    grad_logits: np.ndarray
    n_selected: int
    branches: tuple = field(repr=False, default=())


def pixel_cross_entropy(logits, labels):
    """Per-pixel cross-entropy and softmax for integer ``labels`` (no ignore handling)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=-1, keepdims=True)
    probs = exp / denom
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    return np.log(denom[..., 0]) - picked, probs


def bootstrapped_ce(logits, labels, bootstrap_fraction=0.2, ignore_index=IGNORE_INDEX):
    """Mean cross-entropy over the hardest ``bootstrap_fraction`` of labeled pixels."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[:-1] != labels.shape:
        raise InvalidInputError(f"logits {logits.shape} and labels {labels.shape} disagree")
    if not 0 < bootstrap_fraction <= 1:
        raise InvalidInputError("bootstrap_fraction must lie in (0, 1]")
    n_classes = logits.shape[-1]
    flat_logits = logits.reshape(-1, n_classes)
    flat_labels = labels.reshape(-1).astype(np.int64)
    valid = flat_labels != ignore_index
    if not np.any(valid):
        raise InvalidInputError("label map has no non-ignored pixels")
    if flat_labels[valid].max() >= n_classes:
        raise InvalidInputError("label id exceeds the number of classes")
    idx = np.flatnonzero(valid)
    loss, probs = pixel_cross_entropy(flat_logits[idx], flat_labels[idx])
    k = max(1, math.ceil(bootstrap_fraction * idx.size - 1e-9))
    order = np.argsort(-loss, kind="stable")[:k]
    value = float(loss[order].mean())
    grad = np.zeros_like(flat_logits)
    sel = idx[order]
    g = probs[order]
    g[np.arange(k), flat_labels[sel]] -= 1.0
    grad[sel] = g / k
    return CrossEntropyResult(value, grad.reshape(logits.shape), k, (np.sort(sel),))


def instance_targets(instance_gt, sigma=8.0):
    """Centre heatmap, offsets ``(dy, dx)`` to the instance centroid, and thing mask."""
    inst = np.asarray(instance_gt)
    h, w = inst.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    heatmap = np.zeros((h, w))
    offsets = np.zeros((h, w, 2))
    centers = {}
    for iid in np.unique(inst):
        if iid == 0:
            continue
        mask = inst == iid
        cy, cx = yy[mask].mean(), xx[mask].mean()
        centers[int(iid)] = (cy, cx)
        heatmap = np.maximum(heatmap, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        offsets[mask, 0] = cy - yy[mask]
        offsets[mask, 1] = cx - xx[mask]
    return heatmap, offsets, inst > 0, centers


@dataclass
class InstanceResult:
    value: float
    center: float
    offset: float
    grad_center: np.ndarray
    grad_offset: np.ndarray
    branches: tuple = field(repr=False, default=())


def instance_loss(center_pred, offset_pred, instance_gt, weights=LossWeights()):
    """Weighted centre-heatmap MSE plus offset L1 over thing pixels."""
    center_pred = np.asarray(center_pred, dtype=np.float64)
    offset_pred = np.asarray(offset_pred, dtype=np.float64)
    heatmap, offsets, things, _ = instance_targets(instance_gt, weights.center_sigma)
    if center_pred.shape != heatmap.shape or offset_pred.shape != offsets.shape:
        raise InvalidInputError("instance predictions do not match the annotation shape")
    diff = center_pred - heatmap
    center = float((diff**2).mean())
    g_center = weights.lambda_center * 2.0 * diff / diff.size
    n_things = int(things.sum())
    g_offset = np.zeros_like(offset_pred)
    offset = 0.0
    signs = np.zeros((0, 2))
    if n_things:
        resid = offset_pred[things] - offsets[things]
        offset = float(np.abs(resid).sum() / (2 * n_things))
        signs = np.sign(resid)
        g_offset[things] = weights.lambda_offset * signs / (2 * n_things)
    value = weights.lambda_center * center + weights.lambda_offset * offset
    return InstanceResult(value, center, offset, g_center, g_offset, (signs,))


@dataclass
class LossBreakdown:
    """Adaptation objective split into its terms.

    ``depth_weights`` scales each batch sample's photometric gradients,
    ``source_weight`` each source-replay cross-entropy gradient, and
    ``mixed_weight`` the mixed-sample cross-entropy gradient.
    """

    terms: dict
    total: float
    depth_weights: np.ndarray
    source_weight: float
    mixed_weight: float
    gated: bool = False


def adaptation_total_loss(depth_losses, source_ce, mixed_ce=None, online_motion=math.inf,
                          weights=LossWeights()):
    """Combine the batch depth loss, mean source-replay CE and mixed-sample CE.

    ``depth_losses`` lists per-sample photometric values (online first, None
    for an unusable online frame); ``source_ce`` lists source-replay CE
    values; ``mixed_ce`` is the mixed-sample CE value or None.  Instance
    losses are not part of the adaptation objective.
    """
    agg = batch_depth_loss(depth_losses, online_motion, weights.motion_threshold)
    source_ce = list(source_ce)
    source_weight = 1.0 / len(source_ce) if source_ce else 0.0
    source_term = float(sum(source_ce) * source_weight) if source_ce else 0.0
    mixed_term = float(mixed_ce) if mixed_ce is not None else 0.0
    terms = {"depth": agg.value, "source_ce": source_term, "mixed_ce": mixed_term}
    total = agg.value + source_term + mixed_term
    return LossBreakdown(terms, total, agg.weights, source_weight, 1.0 if mixed_ce is not None else 0.0,
                         agg.gated)
