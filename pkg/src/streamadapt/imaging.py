"""Dense image primitives: bilinear sampling, intrinsics warps, view synthesis
and per-channel histogram matching.

Images are float64 arrays of shape ``(H, W, C)`` with values in [0, 1].
Pixel coordinates are ``(u, v)`` = (column, row).  Every resampling
operation returns the resampled array together with a boolean validity mask;
invalid pixels are filled with 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import InvalidInputError, UnusableFrameError, check_depth_map, check_image

# Coordinates this close outside the image still count as in bounds, so that
# round-off in K @ inv(K) does not invalidate the border of an identity warp.
BORDER_TOLERANCE = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        for v in (self.fx, self.fy, self.cx, self.cy):
            if not np.isfinite(v):
                raise InvalidInputError("intrinsics must be finite")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse_matrix(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


def skew(w):
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _rodrigues_coefficients(theta):
    # A = sin(t)/t, B = (1-cos t)/t^2 and their derivatives divided by t.
    if theta < 1e-3:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0 - t2 * t2 / 840.0
        db = -1.0 / 12.0 + t2 / 180.0 - t2 * t2 / 6720.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        a = s / theta
        b = (1.0 - c) / theta**2
        da = (theta * c - s) / theta**3
        db = (theta * s - 2.0 * (1.0 - c)) / theta**4
    return a, b, da, db


def rotation_from_axis_angle(w):
    """Rodrigues' formula, stable near the zero rotation."""
    w = np.asarray(w, dtype=np.float64)
    a, b, _, _ = _rodrigues_coefficients(float(np.linalg.norm(w)))
    wx = skew(w)
    return np.eye(3) + a * wx + b * (wx @ wx)


def rotation_jacobian(w):
    """Return ``dR/dw`` as an array of shape (3, 3, 3), last axis = component of ``w``."""
    w = np.asarray(w, dtype=np.float64)
    a, b, da, db = _rodrigues_coefficients(float(np.linalg.norm(w)))
    wx = skew(w)
    wx2 = wx @ wx
    out = np.empty((3, 3, 3))
    for k in range(3):
        ek = np.zeros(3)
        ek[k] = 1.0
        ekx = skew(ek)
        out[:, :, k] = da * w[k] * wx + a * ekx + db * w[k] * wx2 + b * (ekx @ wx + wx @ ekx)
    return out


@dataclass(frozen=True)
class PoseTransform:
    """Rigid transform mapping points of a reference camera into another camera."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidInputError(f"rotation must be 3x3, got {r.shape}")
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise InvalidInputError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params):
        """Build from a 6-vector ``(axis-angle, translation)``."""
        params = np.asarray(params, dtype=np.float64)
        return cls(rotation_from_axis_angle(params[:3]), params[3:6])

    def inverse(self):
        rt = self.rotation.T
        return PoseTransform(rt, -rt @ self.translation)

    def compose(self, other):
        """Return the transform applying ``other`` first, then ``self``."""
        return PoseTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation


def bilinear_sample(image, coords, with_grad=False):
    """Sample ``image`` at real-valued pixel coordinates.

    Parameters
    ----------
    image : array of shape (H, W) or (H, W, C)
    coords : array of shape (h, w, 2) holding ``(u, v)`` per output pixel.
    with_grad : bool
        Also return the derivatives of the output with respect to ``u`` and ``v``.

    Returns
    -------
    out : array of shape (h, w) or (h, w, C); 0 where invalid.
    valid : bool array of shape (h, w); False where ``(u, v)`` falls outside
        ``[0, W-1] x [0, H-1]``.
    grads : tuple ``(d_out/du, d_out/dv)``, only when ``with_grad`` is set.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise InvalidInputError(f"cannot sample from an empty image of shape {np.shape(image)}")
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise InvalidInputError(f"coords must have shape (h, w, 2), got {coords.shape}")
    h_img, w_img = img.shape[:2]
    u, v = coords[..., 0], coords[..., 1]
    with np.errstate(invalid="ignore"):
        valid = (
            np.isfinite(u)
            & np.isfinite(v)
            & (u >= -BORDER_TOLERANCE)
            & (u <= w_img - 1 + BORDER_TOLERANCE)
            & (v >= -BORDER_TOLERANCE)
            & (v <= h_img - 1 + BORDER_TOLERANCE)
        )
    uc = np.clip(np.where(valid, u, 0.0), 0.0, w_img - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0.0, h_img - 1)
    u0 = np.minimum(np.floor(uc).astype(np.int64), max(w_img - 2, 0))
    v0 = np.minimum(np.floor(vc).astype(np.int64), max(h_img - 2, 0))
    u1 = np.minimum(u0 + 1, w_img - 1)
    v1 = np.minimum(v0 + 1, h_img - 1)
    du = (uc - u0)[..., None]
    dv = (vc - v0)[..., None]
    i00 = img[v0, u0]
    i01 = img[v0, u1]
    i10 = img[v1, u0]
    i11 = img[v1, u1]
    out = (1 - du) * (1 - dv) * i00 + du * (1 - dv) * i01 + (1 - du) * dv * i10 + du * dv * i11
    mask = valid[..., None]
    out = np.where(mask, out, 0.0)
    if squeeze:
        out = out[..., 0]
    if not with_grad:
        return out, valid
    gu = np.where(mask, (1 - dv) * (i01 - i00) + dv * (i11 - i10), 0.0)
    gv = np.where(mask, (1 - du) * (i10 - i00) + du * (i11 - i01), 0.0)
    if w_img == 1:
        gu = np.zeros_like(gu)
    if h_img == 1:
        gv = np.zeros_like(gv)
    if squeeze:
        gu, gv = gu[..., 0], gv[..., 0]
    return out, valid, (gu, gv)


def pixel_grid(shape):
    """Return an (H, W, 2) array of integer ``(u, v)`` coordinates."""
    h, w = shape
    vv, uu = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([uu, vv], axis=-1)


def pixel_rays(intrinsics, shape):
    """Back-projected rays ``K^-1 [u, v, 1]`` with unit z, shape (H, W, 3)."""
    grid = pixel_grid(shape)
    x = (grid[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (grid[..., 1] - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def intrinsic_warp(target, K_source, K_target, out_shape=None):
    """Resample ``target`` (seen by ``K_target``) as if seen by ``K_source``.

    With a constant scene depth the lift/reproject round trip reduces to the
    homography ``K_target @ inv(K_source)``; output pixel ``p`` takes the
    value of ``target`` at ``K_target @ inv(K_source) @ p``.
    """
    img = check_image(target, "target")
    if out_shape is None:
        out_shape = img.shape[:2]
    out_shape = tuple(int(s) for s in out_shape)
    if len(out_shape) != 2 or min(out_shape) <= 0:
        raise InvalidInputError(f"out_shape must be two positive sizes, got {out_shape}")
    homography = K_target.matrix @ K_source.inverse_matrix
    grid = pixel_grid(out_shape)
    coords = grid @ homography[:2, :2].T + homography[:2, 2]
    out, valid = bilinear_sample(img, coords)
    return np.clip(out, 0.0, 1.0), valid


def reproject(depth, rotation, translation, intrinsics):
    """Lift pixels with ``depth``, transform them, and project them again.

    Returns ``(coords, valid, points, cam_points)`` where ``points`` are the
    lifted reference-camera points and ``cam_points`` the transformed ones.
    """
    depth = np.asarray(depth, dtype=np.float64)
    rays = pixel_rays(intrinsics, depth.shape)
    points = depth[..., None] * rays
    cam = points @ np.asarray(rotation).T + np.asarray(translation)
    z = cam[..., 2]
    valid = (depth > 0) & (z > 1e-6)
    z_safe = np.where(valid, z, 1.0)
    u = intrinsics.fx * cam[..., 0] / z_safe + intrinsics.cx
    v = intrinsics.fy * cam[..., 1] / z_safe + intrinsics.cy
    coords = np.stack([np.where(valid, u, -1.0), np.where(valid, v, -1.0)], axis=-1)
    return coords, valid, points, cam


def synthesize_view(src, depth, pose, intrinsics):
    """Render the reference view by sampling ``src`` through ``depth`` and ``pose``.

    ``pose`` maps reference-camera points into the camera of ``src``.  Pixels
    with invalid depth, behind the camera, or projecting outside ``src`` are
    returned as invalid.
    """
    img = check_image(src, "src")
    depth = check_depth_map(depth, "depth", shape=img.shape[:2])
    if not np.any(depth > 0):
        raise UnusableFrameError("depth map has no valid pixels")
    coords, ok, _, _ = reproject(depth, pose.rotation, pose.translation, intrinsics)
    out, valid = bilinear_sample(img, coords)
    valid &= ok
    out[~valid] = 0.0
    return np.clip(out, 0.0, 1.0), valid


def quantize(image, bins=256):
    """Map [0, 1] values onto integer levels ``0 .. bins-1``."""
    return np.clip(np.rint(np.asarray(image) * (bins - 1)), 0, bins - 1).astype(np.int64)


def channel_cdf(levels, bins=256):
    counts = np.bincount(np.asarray(levels).ravel(), minlength=bins).astype(np.float64)
    return np.cumsum(counts) / counts.sum()


def histogram_match(source, reference, bins=256):
    """Per-channel CDF matching of ``source`` onto the histogram of ``reference``.

    Each quantized source level ``l`` maps to the smallest reference level
    whose CDF reaches the source CDF at ``l``.  This is monotone in ``l`` and
    the identity when both images agree.
    """
    src = check_image(source, "source", channels=3)
    ref = check_image(reference, "reference", channels=3)
    src_levels = quantize(src, bins)
    ref_levels = quantize(ref, bins)
    out = np.empty_like(src)
    for c in range(3):
        src_cdf = channel_cdf(src_levels[..., c], bins)
        ref_cdf = channel_cdf(ref_levels[..., c], bins)
        # Guard the top level against cdf round-off slightly below 1.
        lut = np.searchsorted(ref_cdf, src_cdf - 1e-12, side="left")
        lut = np.minimum(lut, bins - 1)
        out[..., c] = lut[src_levels[..., c]] / (bins - 1)
    return out


def to_uint8(image):
    return quantize(image, 256).astype(np.uint8)


def from_uint8(data):
    return np.asarray(data, dtype=np.float64) / 255.0
