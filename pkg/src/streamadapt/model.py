"""A small multi-head perception network with hand-written reverse mode.

Layout
------
encoder   enc1 3x3/2 -> tanh -> enc2 3x3/2 -> tanh            (1/4 resolution)
semantic  sem1 3x3 -> tanh -> sem2 1x1 -> bilinear x4           logits
depth     dep1 3x3 -> tanh -> dep2 1x1 -> bilinear x4 -> sigmoid disparity
instance  ins1 3x3 -> tanh -> ctr 1x1 / off 1x1 -> bilinear x4  centre, offset
pose      GAP of the three frames' encoder features -> affine   two 6-vectors

All tensors are ``(N, H, W, C)`` float64 arrays.  Convolution weights are
stored as ``(k, k, C_in, C_out)``.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._validation import ContractViolation, InvalidInputError

ENCODER = ("enc1.w", "enc1.b", "enc2.w", "enc2.b")
INSTANCE_HEAD = ("ins1.w", "ins1.b", "ctr.w", "ctr.b", "off.w", "off.b")


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 96
    n_classes: int = 8
    enc_channels: tuple = (8, 16)
    head_channels: int = 16
    min_disp: float = 0.01
    max_disp: float = 10.0
    offset_scale: float = 8.0
    rotation_scale: float = 0.01
    translation_scale: float = 0.1

    def __post_init__(self):
        if self.height % 4 or self.width % 4 or self.height <= 0 or self.width <= 0:
            raise InvalidInputError("image height and width must be positive multiples of 4")
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))

    @property
    def feature_dim(self):
        return self.enc_channels[-1]


def init_params(config, seed=0):
    """Scaled-normal weights, zero biases; pose and output layers start at zero motion."""
    rng = np.random.default_rng(seed)
    c1, c2 = config.enc_channels
    h = config.head_channels
    shapes = {
        "enc1.w": (3, 3, 3, c1), "enc1.b": (c1,),
        "enc2.w": (3, 3, c1, c2), "enc2.b": (c2,),
        "sem1.w": (3, 3, c2, h), "sem1.b": (h,),
        "sem2.w": (1, 1, h, config.n_classes), "sem2.b": (config.n_classes,),
        "dep1.w": (3, 3, c2, h), "dep1.b": (h,),
        "dep2.w": (1, 1, h, 1), "dep2.b": (1,),
        "ins1.w": (3, 3, c2, h), "ins1.b": (h,),
        "ctr.w": (1, 1, h, 1), "ctr.b": (1,),
        "off.w": (1, 1, h, 2), "off.b": (2,),
        "pose.w": (3 * c2, 12), "pose.b": (12,),
    }
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b") or name == "pose.w":
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
    return params


def _conv_forward(x, w, b, stride):
    k = w.shape[0]
    pad = k // 2
    n, h, wid, c = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    cols = np.empty((n, ho, wo, k, k, c))
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    out = cols @ w.reshape(k * k * c, -1) + b
    return out.reshape(n, ho, wo, -1), (cols, x.shape, stride)


def _conv_backward(dout, w, cache, need_input_grad=True):
    cols, xshape, stride = cache
    k = w.shape[0]
    pad = k // 2
    n, h, wid, c = xshape
    _, ho, wo, cout = dout.shape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_input_grad:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * pad, wid + 2 * pad, c))
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, pad:pad + h, pad:pad + wid, :], dw, db


def _interp_matrix(out_size, in_size):
    """Half-pixel-centre bilinear interpolation matrix of shape (out, in)."""
    scale = in_size / out_size
    src = np.clip((np.arange(out_size) + 0.5) * scale - 0.5, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m = np.zeros((out_size, in_size))
    m[np.arange(out_size), lo] += 1.0 - frac
    m[np.arange(out_size), hi] += frac
    return m


@dataclass
class ModelOutputs:
    """Per-sample head outputs; absent heads are None."""

    logits: np.ndarray | None = None
    center: np.ndarray | None = None
    offset: np.ndarray | None = None
    disparity: np.ndarray | None = None
    depth: np.ndarray | None = None
    pose: np.ndarray | None = None
    features: np.ndarray | None = None
    _cache: dict | None = None

    def pose_transforms(self, i):
        from .imaging import PoseTransform

        return [PoseTransform.from_params(p) for p in self.pose[i]]


class PerceptionModel:
    """Parameters, freeze mask and forward/backward passes of the toy network.

    Parameters
    ----------
    config : ModelConfig
    params : dict of arrays, optional
        Defaults to :func:`init_params` with ``seed``.
    frozen : iterable of str
        Names of parameter arrays that never receive gradients.
    """

    def __init__(self, config=None, params=None, frozen=(), seed=0):
        self.config = config or ModelConfig()
        self.seed = seed
        self.params = params if params is not None else init_params(self.config, seed)
        self.frozen = set(frozen)
        unknown = self.frozen - set(self.params)
        if unknown:
            raise InvalidInputError(f"unknown parameter names in freeze mask: {sorted(unknown)}")
        self._up_h = _interp_matrix(self.config.height, self.config.height // 4)
        self._up_w = _interp_matrix(self.config.width, self.config.width // 4)

    def copy(self):
        return PerceptionModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.frozen, self.seed)

    def freeze(self, names):
        self.frozen |= set(names)
        return self

    @property
    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))

    def parameter_hash(self, params=None):
        params = self.params if params is None else params
        digest = hashlib.sha256()
        for name in sorted(params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
        return digest.hexdigest()

    def _upsample(self, x):
        return np.einsum("Yy,nyxc,Xx->nYXc", self._up_h, x, self._up_w, optimize=True)

    def _upsample_backward(self, g):
        return np.einsum("Yy,nYXc,Xx->nyxc", self._up_h, g, self._up_w, optimize=True)

    def _check_frames(self, frames):
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim == 4:
            x = x[:, None]
        cfg = self.config
        if x.ndim != 5 or x.shape[2:] != (cfg.height, cfg.width, 3) or x.shape[1] not in (1, 3):
            raise InvalidInputError(
                f"expected frames of shape (N, 1|3, {cfg.height}, {cfg.width}, 3), got {x.shape}"
            )
        return x

    def encode(self, images, params=None):
        """Final encoder feature maps of ``(N, H, W, 3)`` images."""
        p = self.params if params is None else params
        x = np.asarray(images, dtype=np.float64)
        a1, _ = _conv_forward(x, p["enc1.w"], p["enc1.b"], 2)
        a2, _ = _conv_forward(np.tanh(a1), p["enc2.w"], p["enc2.b"], 2)
        return np.tanh(a2)

    def forward(self, frames, heads=("semantic", "instance", "depth", "pose"), params=None):
        """Run the network.

        ``frames`` is ``(N, 3, H, W, 3)`` (triplets, oldest first) or
        ``(N, H, W, 3)`` (key frames only).  Heads other than pose use the last
        frame of each triplet; pose needs triplets.
        """
        p = self.params if params is None else params
        x = self._check_frames(frames)
        heads = set(heads)
        if "pose" in heads and x.shape[1] != 3:
            raise InvalidInputError("the pose head needs frame triplets")
        n, t = x.shape[:2]
        enc_in = x.reshape(n * t, *x.shape[2:]) if "pose" in heads else x[:, -1]
        cache = {"heads": heads, "n": n, "t": t if "pose" in heads else 1, "params": p}
        a1, cache["enc1"] = _conv_forward(enc_in, p["enc1.w"], p["enc1.b"], 2)
        h1 = np.tanh(a1)
        a2, cache["enc2"] = _conv_forward(h1, p["enc2.w"], p["enc2.b"], 2)
        feats = np.tanh(a2)
        cache["h1"], cache["feats"] = h1, feats
        all_feats = feats.reshape(n, cache["t"], *feats.shape[1:])
        key = all_feats[:, -1]
        out = ModelOutputs(features=key)
        cfg = self.config

        if "semantic" in heads:
            s1, cache["sem1"] = _conv_forward(key, p["sem1.w"], p["sem1.b"], 1)
            hs = np.tanh(s1)
            s2, cache["sem2"] = _conv_forward(hs, p["sem2.w"], p["sem2.b"], 1)
            cache["hs"] = hs
            out.logits = self._upsample(s2)
        if "depth" in heads:
            d1, cache["dep1"] = _conv_forward(key, p["dep1.w"], p["dep1.b"], 1)
            hd = np.tanh(d1)
            d2, cache["dep2"] = _conv_forward(hd, p["dep2.w"], p["dep2.b"], 1)
            sig = 1.0 / (1.0 + np.exp(-self._upsample(d2)[..., 0]))
            cache["hd"], cache["sig"] = hd, sig
            out.disparity = cfg.min_disp + (cfg.max_disp - cfg.min_disp) * sig
            out.depth = 1.0 / out.disparity
        if "instance" in heads:
            i1, cache["ins1"] = _conv_forward(key, p["ins1.w"], p["ins1.b"], 1)
            hi = np.tanh(i1)
            c, cache["ctr"] = _conv_forward(hi, p["ctr.w"], p["ctr.b"], 1)
            o, cache["off"] = _conv_forward(hi, p["off.w"], p["off.b"], 1)
            cache["hi"] = hi
            out.center = self._upsample(c)[..., 0]
            out.offset = cfg.offset_scale * self._upsample(o)
        if "pose" in heads:
            pooled = all_feats.mean(axis=(2, 3)).reshape(n, -1)
            raw = pooled @ p["pose.w"] + p["pose.b"]
            cache["pooled"] = pooled
            scale = np.tile(np.r_[np.full(3, cfg.rotation_scale), np.full(3, cfg.translation_scale)], 2)
            cache["pose_scale"] = scale
            out.pose = (raw * scale).reshape(n, 2, 6)
        out._cache = cache
        return out

    def backward(self, outputs, grads):
        """Gradients of a scalar loss with respect to every parameter array.

        ``grads`` maps output names (``logits``, ``center``, ``offset``,
        ``depth``, ``disparity``, ``pose``) to loss gradients of matching
        shape.  Frozen arrays receive zeros.
        """
        cache = outputs._cache
        if cache is None:
            raise ContractViolation("backward needs the intermediates of a forward pass")
        p = cache["params"]
        cfg = self.config
        out = {name: np.zeros_like(v) for name, v in p.items()}
        live = lambda *names: any(nm not in self.frozen for nm in names)  # noqa: E731
        n, t = cache["n"], cache["t"]
        d_feats = np.zeros((n, t) + cache["feats"].shape[1:])
        encoder_live = live(*ENCODER)

        def head(first, second, hidden, g_low):
            d_hid, dw2, db2 = _conv_backward(g_low, p[f"{second}.w"], cache[second])
            out[f"{second}.w"] += dw2
            out[f"{second}.b"] += db2
            d_pre = d_hid * (1.0 - cache[hidden] ** 2)
            d_key, dw1, db1 = _conv_backward(d_pre, p[f"{first}.w"], cache[first], encoder_live)
            out[f"{first}.w"] += dw1
            out[f"{first}.b"] += db1
            return d_key if encoder_live else 0.0

        g = grads.get("logits")
        if g is not None:
            d_feats[:, -1] += head("sem1", "sem2", "hs", self._upsample_backward(g))
        g_depth, g_disp = grads.get("depth"), grads.get("disparity")
        if g_depth is not None or g_disp is not None:
            disp = outputs.disparity
            total = np.zeros_like(disp)
            if g_depth is not None:
                total -= g_depth / disp**2
            if g_disp is not None:
                total += g_disp
            sig = cache["sig"]
            g_pre = total * (cfg.max_disp - cfg.min_disp) * sig * (1.0 - sig)
            d_feats[:, -1] += head("dep1", "dep2", "hd", self._upsample_backward(g_pre[..., None]))
        g_c, g_o = grads.get("center"), grads.get("offset")
        if (g_c is not None or g_o is not None) and live(*INSTANCE_HEAD, *ENCODER):
            hi = cache["hi"]
            d_hi = np.zeros_like(hi)
            if g_c is not None:
                d, dw, db = _conv_backward(self._upsample_backward(g_c[..., None]), p["ctr.w"], cache["ctr"])
                d_hi += d
                out["ctr.w"] += dw
                out["ctr.b"] += db
            if g_o is not None:
                d, dw, db = _conv_backward(self._upsample_backward(cfg.offset_scale * g_o), p["off.w"], cache["off"])
                d_hi += d
                out["off.w"] += dw
                out["off.b"] += db
            d_pre = d_hi * (1.0 - hi**2)
            d_key, dw, db = _conv_backward(d_pre, p["ins1.w"], cache["ins1"], encoder_live)
            out["ins1.w"] += dw
            out["ins1.b"] += db
            if encoder_live:
                d_feats[:, -1] += d_key
        g_p = grads.get("pose")
        if g_p is not None:
            g_raw = np.asarray(g_p).reshape(n, 12) * cache["pose_scale"]
            out["pose.w"] += cache["pooled"].T @ g_raw
            out["pose.b"] += g_raw.sum(axis=0)
            if encoder_live:
                g_pool = (g_raw @ p["pose.w"].T).reshape(n, t, 1, 1, -1)
                hw = cache["feats"].shape[1] * cache["feats"].shape[2]
                d_feats += np.broadcast_to(g_pool / hw, d_feats.shape)

        if encoder_live:
            d_a2 = d_feats.reshape(cache["feats"].shape) * (1.0 - cache["feats"] ** 2)
            d_h1, dw, db = _conv_backward(d_a2, p["enc2.w"], cache["enc2"])
            out["enc2.w"] += dw
            out["enc2.b"] += db
            d_a1 = d_h1 * (1.0 - cache["h1"] ** 2)
            _, dw, db = _conv_backward(d_a1, p["enc1.w"], cache["enc1"], need_input_grad=False)
            out["enc1.w"] += dw
            out["enc1.b"] += db
        for name in self.frozen:
            out[name][...] = 0.0
        return out

    def feature_embed(self, images, params=None):
        """Global-average-pooled final encoder features, one row per image."""
        x = np.asarray(images, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        feats = self.encode(x, params).mean(axis=(1, 2))
        return feats[0] if single else feats


class Adam:
    """Adam with bias correction; frozen arrays are never touched."""

    def __init__(self, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, params, grads, frozen=()):
        """Update ``params`` in place; returns False (and changes nothing) on non-finite gradients."""
        frozen = set(frozen)
        live = [k for k in params if k not in frozen and k in grads]
        if any(not np.all(np.isfinite(grads[k])) for k in live):
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in live:
            g = grads[k]
            if g.shape != params[k].shape:
                raise InvalidInputError(f"gradient for {k} has shape {g.shape}, expected {params[k].shape}")
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def sgd_step(params, grads, learning_rate, optimizer=None, frozen=()):
    """Apply one Adam step; returns ``(params, accepted)``."""
    optimizer = optimizer or Adam(learning_rate)
    accepted = optimizer.step(params, grads, frozen)
    return params, accepted


def round_to_float32(params):
    """Round every array through float32 so it survives a checkpoint round trip unchanged."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def save_checkpoint(model, path, extra=None):
    """Write ``manifest.txt`` (config, freeze mask, array index) and ``arrays.bin`` (float32 LE)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["format=streamadapt-checkpoint-1", f"seed={model.seed}"]
    for f in fields(model.config):
        value = getattr(model.config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"config.{f.name}={value}")
    lines.append("frozen=" + ",".join(sorted(model.frozen)))
    for k, v in sorted((extra or {}).items()):
        lines.append(f"extra.{k}={v}")
    offset = 0
    with open(path / "arrays.bin", "wb") as fh:
        for name in sorted(model.params):
            arr = np.ascontiguousarray(model.params[name], dtype="<f4")
            shape = "x".join(str(s) for s in arr.shape)
            lines.append(f"array={name} {shape} {offset} {arr.size}")
            fh.write(arr.tobytes())
            offset += arr.size
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Read a checkpoint directory; returns ``(model, extra)``."""
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {manifest}")
    flat = np.fromfile(path / "arrays.bin", dtype="<f4")
    cfg, extra, params, frozen, seed = {}, {}, {}, [], 0
    types = {f.name: f.type for f in fields(ModelConfig)}
    defaults = asdict(ModelConfig())
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        if key == "seed":
            seed = int(value)
        elif key.startswith("config."):
            name = key[len("config."):]
            if name not in types:
                raise InvalidInputError(f"{manifest}:{lineno}: unknown config field {name!r}")
            default = defaults[name]
            if isinstance(default, tuple):
                cfg[name] = tuple(int(v) for v in value.split(","))
            else:
                cfg[name] = type(default)(value)
        elif key == "frozen":
            frozen = [v for v in value.split(",") if v]
        elif key.startswith("extra."):
            extra[key[len("extra."):]] = value
        elif key == "array":
            name, shape, start, count = value.split()
            shape = tuple(int(s) for s in shape.split("x")) if shape else ()
            start, count = int(start), int(count)
            if start + count > flat.size:
                raise InvalidInputError(f"{manifest}:{lineno}: array {name} runs past the end of arrays.bin")
            params[name] = flat[start:start + count].astype(np.float64).reshape(shape)
        elif key != "format":
            raise InvalidInputError(f"{manifest}:{lineno}: unrecognised entry {key!r}")
    model = PerceptionModel(ModelConfig(**cfg), params, frozen, seed)
    return model, extra
