"""Fixed-size replay buffers.

The source buffer is filled once with rare class sampling (RCS): a class is
drawn from a temperature softmax over ``1 - f_c``, then an image containing
that class is drawn with probability proportional to its pixel count.  The
target buffer admits online frames whose encoder features are dissimilar to
everything stored, and evicts the most redundant entry when full.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._validation import (
    IGNORE_INDEX,
    ContractViolation,
    InvalidInputError,
    check_positive,
    check_random_state,
)
from .imaging import CameraIntrinsics, histogram_match


@dataclass(frozen=True, eq=False)
class Sample:
    """An image triplet with optional annotations of its key frame.

    ``frames`` is ordered oldest to newest.  The newest frame is the key
    frame: it is the online image, carries the annotations, and is the frame
    whose depth is predicted; the two older frames only feed the photometric
    loss.
    """

    frames: tuple
    intrinsics: CameraIntrinsics
    semantic: np.ndarray | None = None
    instance: np.ndarray | None = None
    gt_depth: np.ndarray | None = None
    domain_tag: str = ""
    sequence_index: int = 0
    frame_path: str | None = None

    def __post_init__(self):
        frames = tuple(np.asarray(f, dtype=np.float64) for f in self.frames)
        if len(frames) != 3:
            raise InvalidInputError(f"a sample needs 3 frames, got {len(frames)}")
        shape = frames[0].shape
        if len(shape) != 3 or shape[2] != 3 or any(f.shape != shape for f in frames):
            raise InvalidInputError("all frames must be (H, W, 3) arrays of one shape")
        object.__setattr__(self, "frames", frames)
        for name in ("semantic", "instance", "gt_depth"):
            value = getattr(self, name)
            if value is not None and np.shape(value) != shape[:2]:
                raise InvalidInputError(f"{name} shape {np.shape(value)} does not match frames {shape[:2]}")

    @property
    def image(self):
        return self.frames[-1]

    @property
    def shape(self):
        return self.frames[0].shape[:2]

    @property
    def labeled(self):
        return self.semantic is not None

    def unlabeled(self):
        return dataclasses.replace(self, semantic=None, instance=None, gt_depth=None)

    def with_frames(self, frames):
        return dataclasses.replace(self, frames=tuple(frames))


@dataclass
class ClassStats:
    """Per-image class pixel counts of a labeled dataset."""

    per_image: np.ndarray
    height: int
    width: int

    @property
    def n_images(self):
        return self.per_image.shape[0]

    @property
    def n_classes(self):
        return self.per_image.shape[1]

    @property
    def pixel_counts(self):
        return self.per_image.sum(axis=0)

    @property
    def frequencies(self):
        # Denominator keeps ignore pixels, so frequencies may sum below 1.
        return self.pixel_counts / float(self.n_images * self.height * self.width)


def class_pixel_frequencies(dataset, n_classes=None, ignore_index=IGNORE_INDEX):
    """Count class pixels over ``dataset`` and return its :class:`ClassStats`."""
    label_maps = []
    for i, sample in enumerate(dataset):
        labels = sample.semantic if isinstance(sample, Sample) else sample
        if labels is None:
            raise InvalidInputError(f"sample {i} carries no semantic labels")
        label_maps.append(np.asarray(labels, dtype=np.int64))
    if not label_maps:
        raise InvalidInputError("empty dataset")
    h, w = label_maps[0].shape
    if any(m.shape != (h, w) for m in label_maps):
        raise InvalidInputError("all label maps must share one shape")
    if n_classes is None:
        n_classes = 1 + max(int(m[m != ignore_index].max(initial=-1)) for m in label_maps)
    per_image = np.zeros((len(label_maps), n_classes), dtype=np.int64)
    for i, m in enumerate(label_maps):
        ids = m[m != ignore_index]
        per_image[i] = np.bincount(ids.ravel(), minlength=n_classes)[:n_classes]
    return ClassStats(per_image=per_image, height=h, width=w)


def rcs_probabilities(stats, temperature):
    """Class sampling distribution ``softmax((1 - f_c) / T)``.

    ``stats`` is a :class:`ClassStats` or an array of class frequencies.
    """
    temperature = check_positive(temperature, "temperature")
    freqs = stats.frequencies if isinstance(stats, ClassStats) else np.asarray(stats, dtype=np.float64)
    logits = (1.0 - freqs) / temperature
    logits = logits - logits.max()
    weights = np.exp(logits)
    return weights / weights.sum()


def sample_rare_classes(stats, temperature, size=None, random_state=None):
    """Draw class ids from the rare class sampling distribution.

    With a :class:`ClassStats`, classes without pixels are never drawn.
    """
    rng = check_random_state(random_state)
    if isinstance(stats, ClassStats):
        classes = np.flatnonzero(stats.pixel_counts > 0)
        freqs = stats.frequencies[classes]
    else:
        freqs = np.asarray(stats, dtype=np.float64)
        classes = np.arange(len(freqs))
    return classes[rng.choice(len(classes), size=size, p=rcs_probabilities(freqs, temperature))]


@dataclass
class SourceBuffer:
    capacity: int
    samples: list = field(default_factory=list)
    indices: list = field(default_factory=list)
    _order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    _pos: int = 0

    def __len__(self):
        return len(self.samples)

    def draw(self, k, rng):
        """Return ``k`` buffer positions; every entry is drawn once before any repeats."""
        out = []
        for _ in range(k):
            if self._pos >= len(self._order):
                self._order = rng.permutation(len(self.samples))
                self._pos = 0
            out.append(int(self._order[self._pos]))
            self._pos += 1
        return out


def build_source_buffer(dataset, capacity, temperature=0.01, random_state=None, sampling="rcs",
                        stats=None, max_redraws=50):
    """Select ``capacity`` distinct samples of ``dataset`` for source replay.

    ``sampling="rcs"`` uses rare class sampling; ``"uniform"`` draws a plain
    random subset.  Classes without pixels in the dataset are excluded from
    the class distribution.  When a drawn class has no unselected image left,
    the class is redrawn up to ``max_redraws`` times before falling back to a
    uniform choice among the unselected images.
    """
    dataset = list(dataset)
    rng = check_random_state(random_state)
    n = len(dataset)
    if capacity <= 0 or capacity > n:
        raise InvalidInputError(f"capacity {capacity} must be in [1, {n}]")
    if sampling == "uniform":
        chosen = [int(i) for i in rng.choice(n, size=capacity, replace=False)]
    elif sampling == "rcs":
        if stats is None:
            stats = class_pixel_frequencies(dataset)
        per_image = stats.per_image.astype(np.float64)
        available = np.ones(n, dtype=bool)
        chosen = []
        for _ in range(capacity):
            pick = None
            for _ in range(max_redraws):
                c = int(sample_rare_classes(stats, temperature, random_state=rng))
                weights = per_image[:, c] * available
                total = weights.sum()
                if total > 0:
                    pick = int(rng.choice(n, p=weights / total))
                    break
            if pick is None:
                pick = int(rng.choice(np.flatnonzero(available)))
            available[pick] = False
            chosen.append(pick)
    else:
        raise InvalidInputError(f"unknown sampling mode {sampling!r}")
    return SourceBuffer(capacity=capacity, samples=[dataset[i] for i in chosen], indices=chosen)


@dataclass
class TargetBuffer:
    capacity: int
    samples: list = field(default_factory=list)
    features: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    @property
    def full(self):
        return len(self.samples) >= self.capacity

    def feature_matrix(self):
        return np.array(self.features, dtype=np.float64)


@dataclass(frozen=True)
class AdmissionDecision:
    admitted: bool
    similarity: float
    evicted: int | None = None


def _unit_rows(features):
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(features)):
        raise InvalidInputError("feature vectors must be finite and non-zero")
    return features / norms[:, None]


def max_cosine_similarity(feature, buffer):
    """Largest cosine similarity between ``feature`` and any buffer entry; -inf if empty."""
    query = _unit_rows(feature)[0]
    if len(buffer) == 0:
        return -math.inf
    stored = _unit_rows(buffer.feature_matrix())
    if stored.shape[1] != query.shape[0]:
        raise InvalidInputError(f"feature dimension {query.shape[0]} != buffer dimension {stored.shape[1]}")
    return float(np.max((stored * query).sum(axis=1)))


def redundancy_scores(features):
    """Row sums of the cosine-similarity matrix, ``sum_j cos(f_i, f_j)``."""
    unit = _unit_rows(features)
    total = unit.sum(axis=0)
    # Elementwise product + row sum keeps identical rows bit-identical.
    return (unit * total).sum(axis=1)


# Scores this close to the maximum are ties (round-off), broken by lowest index.
TIE_TOLERANCE = 1e-12


def _most_redundant(features):
    scores = redundancy_scores(features)
    return int(np.flatnonzero(scores >= scores.max() - TIE_TOLERANCE)[0])


def eviction_index(buffer):
    """Index of the entry whose summed similarity to the buffer is largest."""
    if not buffer.full:
        raise ContractViolation(f"eviction requires a full buffer ({len(buffer)}/{buffer.capacity})")
    return _most_redundant(buffer.feature_matrix())


def update_target_buffer(buffer, sample, feature, threshold=0.95, diversity=True, random_state=None):
    """Offer an online sample to the target buffer.

    With ``diversity`` the sample is admitted only when its maximum cosine
    similarity to the stored features is below ``threshold``; a full buffer
    then evicts the most redundant of its entries plus the candidate (possibly
    the candidate itself).  Without ``diversity`` every sample is admitted and
    a full buffer evicts a uniformly random entry.
    """
    feature = np.asarray(feature, dtype=np.float64).ravel()
    similarity = max_cosine_similarity(feature, buffer)
    if diversity:
        if similarity >= threshold:
            return AdmissionDecision(False, similarity)
        if not buffer.full:
            buffer.samples.append(sample)
            buffer.features.append(feature)
            return AdmissionDecision(True, similarity)
        candidates = np.vstack([buffer.feature_matrix(), feature[None]])
        victim = _most_redundant(candidates)
        if victim == len(buffer):
            return AdmissionDecision(False, similarity, evicted=victim)
    else:
        if not buffer.full:
            buffer.samples.append(sample)
            buffer.features.append(feature)
            return AdmissionDecision(True, similarity)
        victim = int(check_random_state(random_state).integers(len(buffer)))
    del buffer.samples[victim]
    del buffer.features[victim]
    buffer.samples.append(sample)
    buffer.features.append(feature)
    return AdmissionDecision(True, similarity, evicted=victim)


@dataclass
class Batch:
    online: Sample
    target_replay: list
    source_replay: list
    source_originals: list
    clamped: bool = False

    @property
    def samples(self):
        return [self.online, *self.target_replay, *self.source_replay]

    @property
    def origins(self):
        return ["online"] + ["target"] * len(self.target_replay) + ["source"] * len(self.source_replay)

    def __len__(self):
        return 1 + len(self.target_replay) + len(self.source_replay)


def compose_batch(online, target_buffer, source_buffer, counts=(1, 2, 2), random_state=None,
                  match_histograms=True):
    """Assemble the update batch: the online sample plus replayed samples.

    Target entries are drawn uniformly without replacement; source entries
    follow the buffer's no-repeat cursor and every frame is histogram-matched
    to the online image.  Requests beyond a buffer's occupancy are clamped and
    reported through ``Batch.clamped``.
    """
    rng = check_random_state(random_state)
    n_current, n_target, n_source = counts
    if n_current != 1 or n_target < 0 or n_source < 0:
        raise InvalidInputError(f"invalid batch counts {counts}")
    k_t = min(n_target, len(target_buffer))
    k_s = min(n_source, len(source_buffer)) if source_buffer is not None else 0
    clamped = k_t < n_target or k_s < n_source
    target_replay = []
    if k_t:
        target_replay = [target_buffer.samples[int(i)] for i in rng.choice(len(target_buffer), k_t, replace=False)]
    originals = [source_buffer.samples[i] for i in source_buffer.draw(k_s, rng)] if k_s else []
    if match_histograms:
        source_replay = [
            s.with_frames(histogram_match(f, online.image) for f in s.frames) for s in originals
        ]
    else:
        source_replay = list(originals)
    return Batch(online, target_replay, source_replay, originals, clamped)


def write_buffer_manifest(path, samples, features=None):
    """Write ``<domain_tag> <sequence_index> <relative_frame_path>`` lines.

    When ``features`` is given they go to ``<path>.features`` as raw
    little-endian float32 values, one row per manifest line.
    """
    path = Path(path)
    lines = []
    for s in samples:
        if not s.frame_path:
            raise InvalidInputError(f"sample {s.domain_tag}:{s.sequence_index} has no frame path")
        lines.append(f"{s.domain_tag} {s.sequence_index} {s.frame_path}\n")
    path.write_text("".join(lines))
    if features is not None:
        arr = np.asarray(features, dtype="<f4")
        if arr.shape[0] != len(lines):
            raise InvalidInputError("one feature row per sample required")
        arr.tofile(str(path) + ".features")


def read_buffer_manifest(path):
    """Parse a manifest into ``(domain_tag, sequence_index, frame_path)`` tuples and features."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise InvalidInputError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            entries.append((parts[0], int(parts[1]), parts[2]))
        except ValueError as exc:
            raise InvalidInputError(f"{path}:{lineno}: bad sequence index {parts[1]!r}") from exc
    features = None
    sidecar = Path(str(path) + ".features")
    if sidecar.exists():
        flat = np.fromfile(sidecar, dtype="<f4").astype(np.float64)
        if entries and flat.size % len(entries):
            raise InvalidInputError(f"{sidecar}: {flat.size} floats do not split into {len(entries)} rows")
        features = flat.reshape(len(entries), -1) if entries else flat.reshape(0, 0)
    return entries, features


def save_target_buffer(buffer, path):
    write_buffer_manifest(path, buffer.samples, buffer.features if buffer.features else np.zeros((0, 0)))


def load_target_buffer(path, capacity, load_sample):
    """Rebuild a :class:`TargetBuffer`; ``load_sample(frame_path)`` returns a Sample."""
    entries, features = read_buffer_manifest(path)
    if entries and features is None:
        raise InvalidInputError(f"{path}: feature sidecar {path}.features is missing")
    if len(entries) > capacity:
        raise InvalidInputError(f"manifest holds {len(entries)} entries, capacity is {capacity}")
    buf = TargetBuffer(capacity=capacity)
    for i, (_, _, rel) in enumerate(entries):
        buf.samples.append(load_sample(rel))
        buf.features.append(features[i])
    return buf
