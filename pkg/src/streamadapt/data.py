"""Synthetic street-scene sequences and their on-disk layout.

Scenes are axis-aligned boxes (buildings, tree crowns, cars, pedestrians)
on a ground plane split into road, sidewalk and terrain strips.  Frames are
ray cast from a camera driving along the road; colours come from a
per-class palette modulated by a smooth texture fixed in world
coordinates, so consecutive frames are photometrically consistent.

Layout of a sequence directory::

    <seq>/rgb/000000.png         8-bit RGB
    <seq>/semantic/000000.png    8-bit class ids (palette PNG)
    <seq>/instance/000000.png    16-bit instance ids, 0 = no instance
    <seq>/depth/000000.png       16-bit millimetres, 0 = invalid
    <seq>/intrinsics.txt         fx fy cx cy
    <seq>/classes.txt            one "<id> <name> stuff|thing" line per class
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from ._validation import InvalidInputError, check_random_state
from .imaging import CameraIntrinsics, PoseTransform, from_uint8, pixel_rays, to_uint8
from .replay import Sample

CLASS_NAMES = ("road", "sidewalk", "building", "vegetation", "terrain", "sky", "car", "person")
THING_CLASSES = (6, 7)
ROAD, SIDEWALK, BUILDING, VEGETATION, TERRAIN, SKY, CAR, PERSON = range(8)

ROAD_HALF_WIDTH = 3.0
SIDEWALK_OUTER = 5.0
BUILDING_LINE = 8.0
CAMERA_HEIGHT = 1.5
MAX_DEPTH = 65.0  # 16-bit millimetres

DEFAULT_PALETTE = (
    (0.36, 0.34, 0.38),  # road
    (0.62, 0.55, 0.50),  # sidewalk
    (0.55, 0.30, 0.22),  # building
    (0.20, 0.48, 0.18),  # vegetation
    (0.52, 0.58, 0.28),  # terrain
    (0.45, 0.65, 0.92),  # sky
    (0.12, 0.16, 0.55),  # car
    (0.80, 0.20, 0.35),  # person
)


@dataclass(frozen=True)
class DomainSpec:
    """Everything that defines one synthetic domain.

    ``color_gain``, ``color_gamma`` and ``color_bias`` describe a per-channel
    monotone transform ``gain * x**gamma + bias`` applied after shading.
    ``palette_noise`` is the per-object colour jitter and ``texture`` the
    amplitude of the world-anchored texture.
    """

    name: str
    intrinsics: CameraIntrinsics
    height: int = 64
    width: int = 96
    palette: tuple = DEFAULT_PALETTE
    palette_noise: float = 0.04
    texture: float = 0.25
    color_gain: tuple = (1.0, 1.0, 1.0)
    color_gamma: tuple = (1.0, 1.0, 1.0)
    color_bias: tuple = (0.0, 0.0, 0.0)
    layout_seed: int = 0
    object_density: float = 1.0
    speed: float = 0.5
    heading_noise: float = 0.01
    n_frames: int = 100

    def __post_init__(self):
        if len(self.palette) != len(CLASS_NAMES):
            raise InvalidInputError(f"palette needs {len(CLASS_NAMES)} colours")
        if self.n_frames < 3:
            raise InvalidInputError("a sequence needs at least 3 frames")
        if self.object_density < 0 or self.speed < 0 or self.heading_noise < 0:
            raise InvalidInputError("density, speed and heading noise must be non-negative")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


STOCK_DOMAINS = {
    "domain-urban-a": DomainSpec(
        name="domain-urban-a",
        intrinsics=CameraIntrinsics(80.0, 80.0, 47.5, 31.5),
        layout_seed=11,
    ),
    "domain-urban-b": DomainSpec(
        name="domain-urban-b",
        intrinsics=CameraIntrinsics(60.0, 60.0, 51.5, 28.5),
        color_gain=(0.7, 0.9, 0.8),
        color_gamma=(0.7, 1.3, 0.85),
        color_bias=(0.2, 0.04, 0.0),
        layout_seed=23,
        object_density=1.3,
    ),
}


def stock_domain(name, **changes):
    if name not in STOCK_DOMAINS:
        raise InvalidInputError(f"unknown domain {name!r}; stock domains are {sorted(STOCK_DOMAINS)}")
    return STOCK_DOMAINS[name].replace(**changes) if changes else STOCK_DOMAINS[name]


@dataclass
class Scene:
    """Boxes ``lo``/``hi`` (world X right, Y up, Z forward) with class, instance id and colour."""

    lo: np.ndarray
    hi: np.ndarray
    classes: np.ndarray
    instances: np.ndarray
    colors: np.ndarray
    ground_colors: np.ndarray
    texture_freqs: np.ndarray = field(repr=False, default=None)
    texture_phases: np.ndarray = field(repr=False, default=None)


def build_scene(spec, length):
    """Lay out boxes along both sides of a straight road covering ``[-10, length]``."""
    rng = np.random.default_rng(spec.layout_seed)
    palette = np.asarray(spec.palette, dtype=np.float64)
    lo, hi, classes, instances = [], [], [], []

    def add(x0, x1, y1, z0, z1, cls, inst=0):
        lo.append((min(x0, x1), 0.0, z0))
        hi.append((max(x0, x1), y1, z1))
        classes.append(cls)
        instances.append(inst)

    for side in (-1.0, 1.0):
        z = -10.0
        while z < length:
            if rng.random() < 0.65:
                extent = rng.uniform(6.0, 16.0)
                depth = rng.uniform(6.0, 12.0)
                add(side * BUILDING_LINE, side * (BUILDING_LINE + depth), rng.uniform(4.0, 12.0),
                    z, z + extent, BUILDING)
            else:
                extent = rng.uniform(4.0, 9.0)
                for tz in np.arange(z + 1.0, z + extent - 1.0, 2.5):
                    x0 = rng.uniform(5.6, 6.4)
                    add(side * x0, side * (x0 + rng.uniform(1.4, 2.2)), rng.uniform(2.5, 4.5),
                        tz, tz + 1.8, VEGETATION)
            z += extent + rng.uniform(0.0, 1.5)

    next_id = 1
    density = spec.object_density
    z = 4.0
    while z < length and density > 0:
        z += rng.exponential(9.0 / density)
        side = rng.choice((-1.0, 1.0))
        x = side * rng.uniform(2.0, 2.6)
        add(x - 0.9, x + 0.9, rng.uniform(1.3, 1.7), z, z + rng.uniform(3.6, 4.6), CAR, next_id)
        next_id += 1
    z = 2.0
    while z < length and density > 0:
        z += rng.exponential(7.0 / density)
        side = rng.choice((-1.0, 1.0))
        x = side * rng.uniform(3.4, 4.6)
        add(x - 0.3, x + 0.3, rng.uniform(1.6, 1.9), z, z + 0.5, PERSON, next_id)
        next_id += 1

    classes = np.array(classes, dtype=np.int64)
    jitter = rng.normal(0.0, spec.palette_noise, size=(len(classes), 3))
    colors = np.clip(palette[classes] + jitter, 0.0, 1.0)
    return Scene(
        lo=np.array(lo, dtype=np.float64).reshape(-1, 3),
        hi=np.array(hi, dtype=np.float64).reshape(-1, 3),
        classes=classes,
        instances=np.array(instances, dtype=np.int64),
        colors=colors,
        ground_colors=palette[[ROAD, SIDEWALK, TERRAIN]],
        texture_freqs=rng.normal(0.0, 1.2, size=(4, 3)),
        texture_phases=rng.uniform(0.0, 2 * np.pi, size=4),
    )


def camera_path(spec, random_state=None):
    """Camera-to-world poses ``(R, c)`` of a car wandering within its lane."""
    rng = np.random.default_rng(spec.layout_seed + 1) if random_state is None else check_random_state(random_state)
    x, z, heading = -1.0, 0.0, 0.0
    poses = []
    for _ in range(spec.n_frames):
        forward = np.array([np.sin(heading), 0.0, np.cos(heading)])
        down = np.array([0.0, -1.0, 0.0])
        right = np.cross(down, forward)  # keeps the camera frame right-handed
        poses.append((np.stack([right, down, forward], axis=1), np.array([x, CAMERA_HEIGHT, z])))
        heading = 0.9 * heading - 0.02 * (x + 1.0) + rng.normal(0.0, spec.heading_noise)
        x += spec.speed * np.sin(heading)
        z += spec.speed * np.cos(heading)
    return poses


def relative_pose(pose_key, pose_other):
    """Transform taking key-camera points into the other camera."""
    (rk, ck), (ro, co) = pose_key, pose_other
    return PoseTransform(ro.T @ rk, ro.T @ (ck - co))


def _texture(scene, points):
    phase = points @ scene.texture_freqs.T + scene.texture_phases
    return np.sin(phase).mean(axis=-1)


def render_frame(spec, scene, pose):
    """Ray cast one frame; returns ``(rgb, semantic, instance, depth)``."""
    rotation, center = pose
    rays = pixel_rays(spec.intrinsics, (spec.height, spec.width)).reshape(-1, 3)
    dirs = rays @ rotation.T  # camera z = 1, so ray parameter t equals depth
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    semantic = np.full(n, SKY, dtype=np.int64)
    instance = np.zeros(n, dtype=np.int64)
    base = np.zeros((n, 3))
    shade = np.ones(n)

    ground_t = np.where(dirs[:, 1] < -1e-9, -center[1] / np.where(dirs[:, 1] < -1e-9, dirs[:, 1], -1.0), np.inf)
    hit = np.isfinite(ground_t)
    best_t[hit] = ground_t[hit]
    gx = np.abs(center[0] + ground_t * dirs[:, 0])
    strip = np.where(gx < ROAD_HALF_WIDTH, 0, np.where(gx < SIDEWALK_OUTER, 1, 2))
    semantic[hit] = np.array([ROAD, SIDEWALK, TERRAIN])[strip[hit]]
    base[hit] = scene.ground_colors[strip[hit]]

    near = (scene.hi[:, 2] > center[2] - 5.0) & (scene.lo[:, 2] < center[2] + MAX_DEPTH + 20.0)
    if np.any(near):
        lo, hi = scene.lo[near], scene.hi[near]
        safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        t1 = (lo[None] - center) / safe[:, None]
        t2 = (hi[None] - center) / safe[:, None]
        t_lo = np.minimum(t1, t2)
        t_near = t_lo.max(axis=2)
        t_far = np.maximum(t1, t2).min(axis=2)
        ok = (t_near <= t_far) & (t_near > 0)
        t_near = np.where(ok, t_near, np.inf)
        j = np.argmin(t_near, axis=1)
        t_box = t_near[np.arange(n), j]
        closer = t_box < best_t
        idx = np.flatnonzero(near)[j[closer]]
        best_t[closer] = t_box[closer]
        semantic[closer] = scene.classes[idx]
        instance[closer] = scene.instances[idx]
        base[closer] = scene.colors[idx]
        # Fixed directional light: side faces darker than fronts.
        axis = np.argmax(t_lo[np.arange(n), j], axis=1)[closer]
        shade[closer] = np.array([0.75, 1.0, 0.9])[axis]

    surface = np.isfinite(best_t)
    points = center + np.where(surface, best_t, 0.0)[:, None] * dirs
    rgb = base * (shade * (1.0 + spec.texture * _texture(scene, points) * surface))[:, None]
    elevation = -dirs[:, 1] / np.linalg.norm(dirs, axis=1)
    sky = np.asarray(spec.palette[SKY]) * (0.85 + 0.3 * elevation[:, None])
    rgb[~surface] = sky[~surface]
    rgb = np.clip(rgb, 0.0, 1.0)
    rgb = np.clip(np.asarray(spec.color_gain) * rgb ** np.asarray(spec.color_gamma) + np.asarray(spec.color_bias),
                  0.0, 1.0)
    depth = np.where(surface & (best_t <= MAX_DEPTH), best_t, 0.0)
    h, w = spec.height, spec.width
    return rgb.reshape(h, w, 3), semantic.reshape(h, w), instance.reshape(h, w), depth.reshape(h, w)


@dataclass
class RenderedSequence:
    spec: DomainSpec
    rgb: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    depth: np.ndarray
    poses: list

    def samples(self, quantized=True):
        frames = [from_uint8(to_uint8(f)) if quantized else f for f in self.rgb]
        return [
            Sample(
                frames=tuple(frames[i - 2:i + 1]),
                intrinsics=self.spec.intrinsics,
                semantic=self.semantic[i],
                instance=self.instance[i],
                gt_depth=self.depth[i],
                domain_tag=self.spec.name,
                sequence_index=i,
                frame_path=f"rgb/{i:06d}.png",
            )
            for i in range(2, len(frames))
        ]


def render_sequence(spec):
    """Render every frame of ``spec`` in memory."""
    poses = camera_path(spec)
    length = max(c[2] for _, c in poses) + MAX_DEPTH + 20.0
    scene = build_scene(spec, length)
    frames = [render_frame(spec, scene, p) for p in poses]
    rgb, sem, inst, depth = (np.stack(x) for x in zip(*frames))
    return RenderedSequence(spec, rgb, sem, inst, depth, poses)


_LABEL_PALETTE = [int(255 * v) for c in DEFAULT_PALETTE for v in c] + [0] * (3 * (256 - len(DEFAULT_PALETTE)))


def write_classes(path):
    lines = [f"{i} {name} {'thing' if i in THING_CLASSES else 'stuff'}" for i, name in enumerate(CLASS_NAMES)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_classes(path):
    """Parse ``classes.txt`` into ``(names, thing_ids)``."""
    path = Path(path)
    names, things = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("stuff", "thing") or not parts[0].isdigit():
            raise InvalidInputError(f"{path}:{lineno}: expected '<id> <name> stuff|thing', got {line!r}")
        if int(parts[0]) != len(names):
            raise InvalidInputError(f"{path}:{lineno}: class ids must be consecutive from 0")
        names.append(parts[1])
        if parts[2] == "thing":
            things.append(int(parts[0]))
    return tuple(names), tuple(things)


def write_sequence(rendered, out_dir):
    """Write a rendered sequence in the directory layout described above."""
    out = Path(out_dir)
    for sub in ("rgb", "semantic", "instance", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    k = rendered.spec.intrinsics
    (out / "intrinsics.txt").write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r}\n")
    write_classes(out / "classes.txt")
    for i in range(len(rendered.rgb)):
        name = f"{i:06d}.png"
        Image.fromarray(to_uint8(rendered.rgb[i])).save(out / "rgb" / name)
        sem = Image.fromarray(rendered.semantic[i].astype(np.uint8), mode="P")
        sem.putpalette(_LABEL_PALETTE)
        sem.save(out / "semantic" / name)
        Image.fromarray(rendered.instance[i].astype(np.uint16)).save(out / "instance" / name)
        mm = np.round(rendered.depth[i] * 1000.0).astype(np.uint16)
        Image.fromarray(mm).save(out / "depth" / name)
    return out


def generate_domain(spec, out_dir):
    """Render ``spec`` and write it to ``out_dir``; returns the rendered arrays."""
    rendered = render_sequence(spec)
    write_sequence(rendered, out_dir)
    return rendered


def read_intrinsics(path):
    path = Path(path)
    try:
        values = [float(v) for v in path.read_text().split()]
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"{path}: cannot parse intrinsics ({exc})") from exc
    if len(values) != 4:
        raise InvalidInputError(f"{path}: expected four reals 'fx fy cx cy', got {len(values)} values")
    return CameraIntrinsics(*values)


_FRAME_NAME = re.compile(r"^(\d+)\.png$")


def _read_png(path, dtype, channels):
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except OSError as exc:
        raise InvalidInputError(f"{path}: unreadable image ({exc})") from exc
    if channels and (arr.ndim != 3 or arr.shape[2] < channels):
        raise InvalidInputError(f"{path}: expected an RGB image, got shape {arr.shape}")
    if channels:
        arr = arr[..., :channels]
    elif arr.ndim != 2:
        raise InvalidInputError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(dtype)


class SequenceDataset:
    """Ordered, lazily loaded samples of one sequence directory.

    Sample ``k`` has key frame ``k + 2``; the first two frames only serve as
    neighbours.  Labels are attached when the ``semantic`` folder exists.
    """

    def __init__(self, path, cache_size=8):
        self.path = Path(path)
        rgb_dir = self.path / "rgb"
        if not rgb_dir.is_dir():
            raise InvalidInputError(f"{self.path}: missing rgb/ folder")
        indexed = []
        for p in rgb_dir.iterdir():
            m = _FRAME_NAME.match(p.name)
            if m:
                indexed.append((int(m.group(1)), p.name))
        indexed.sort()
        if len(indexed) < 3:
            raise InvalidInputError(f"{rgb_dir}: need at least 3 frames, found {len(indexed)}")
        self.frame_ids = [i for i, _ in indexed]
        self.frame_names = [n for _, n in indexed]
        self.intrinsics = read_intrinsics(self.path / "intrinsics.txt")
        classes = self.path / "classes.txt"
        if not classes.exists():
            classes = self.path.parent / "classes.txt"
        self.class_names, self.thing_classes = read_classes(classes) if classes.exists() else (CLASS_NAMES,
                                                                                               THING_CLASSES)
        self.labeled = (self.path / "semantic").is_dir()
        self.has_depth = (self.path / "depth").is_dir()
        self.domain_tag = self.path.name
        self._frame = lru_cache(maxsize=cache_size)(self._load_frame)

    def __len__(self):
        return len(self.frame_names) - 2

    def _load_frame(self, pos):
        return from_uint8(_read_png(self.path / "rgb" / self.frame_names[pos], np.uint8, 3))

    def _annotations(self, pos):
        name = self.frame_names[pos]
        semantic = instance = depth = None
        if self.labeled:
            semantic = _read_png(self.path / "semantic" / name, np.int64, 0)
            inst_path = self.path / "instance" / name
            instance = _read_png(inst_path, np.int64, 0) if inst_path.exists() else np.zeros_like(semantic)
        if self.has_depth and (self.path / "depth" / name).exists():
            depth = _read_png(self.path / "depth" / name, np.float64, 0) / 1000.0
        return semantic, instance, depth

    def __getitem__(self, k):
        if k < 0:
            k += len(self)
        if not 0 <= k < len(self):
            raise IndexError(k)
        pos = k + 2
        semantic, instance, depth = self._annotations(pos)
        return Sample(
            frames=tuple(self._frame(p) for p in (pos - 2, pos - 1, pos)),
            intrinsics=self.intrinsics,
            semantic=semantic,
            instance=instance,
            gt_depth=depth,
            domain_tag=self.domain_tag,
            sequence_index=self.frame_ids[pos],
            frame_path=f"rgb/{self.frame_names[pos]}",
        )

    def __iter__(self):
        for k in range(len(self)):
            yield self[k]

    def sample_from_path(self, frame_path):
        """Load the sample whose key frame is ``frame_path`` (as written in buffer manifests)."""
        name = Path(frame_path).name
        try:
            pos = self.frame_names.index(name)
        except ValueError:
            raise InvalidInputError(f"{self.path}: no frame {frame_path!r}") from None
        if pos < 2:
            raise InvalidInputError(f"{frame_path}: the first two frames have no predecessors")
        return self[pos - 2]


def load_sequence(path, cache_size=8):
    return SequenceDataset(path, cache_size)
