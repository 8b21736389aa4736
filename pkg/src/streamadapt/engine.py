"""Online adaptation loop, panoptic fusion and the evaluation protocols.

Protocol 1 evaluates each of the first ``split`` fraction of a target
sequence's frames and then adapts on it; protocol 2 evaluates the remaining
frames with frozen weights; protocol 3 evaluates frozen weights on the
source validation set.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter
from sklearn.base import BaseEstimator

from ._validation import IGNORE_INDEX, InvalidInputError, UnusableFrameError, check_fraction, check_random_state
from .imaging import to_uint8
from .losses import LossWeights, adaptation_total_loss, bootstrapped_ce, photometric_loss
from .metrics import ConfusionMatrix, DepthMetrics, PanopticAccumulator, depth_metrics
from .mixing import EmaState, MixConfig, ema_update, generate_mixed_sample, teacher_predictor
from .model import ENCODER, INSTANCE_HEAD, Adam, save_checkpoint
from .replay import TargetBuffer, build_source_buffer, compose_batch, update_target_buffer

log = logging.getLogger(__name__)

THING_CLASSES = (6, 7)


def panoptic_fuse(logits, center, offset, thing_classes=THING_CLASSES, threshold=0.1, nms_kernel=3):
    """Group thing pixels into instances around predicted centres.

    Centres are local maxima of ``center`` (``nms_kernel`` window) above
    ``threshold``; of several equal maxima within one window only the first
    in raster order is kept.  A thing pixel joins the centre nearest to its
    position plus its predicted ``(dy, dx)`` offset.  Instance ids start at 1
    in centre order; thing pixels stay at 0 when no centre exists.
    """
    semantic = np.argmax(logits, axis=-1)
    h, w = semantic.shape
    peaks = (center == maximum_filter(center, size=nms_kernel, mode="constant", cval=-np.inf)) & (center > threshold)
    centers = []
    r = nms_kernel // 2
    for y, x in zip(*np.nonzero(peaks)):
        if all(max(abs(y - cy), abs(x - cx)) > r for cy, cx in centers):
            centers.append((y, x))
    instance = np.zeros((h, w), dtype=np.int64)
    things = np.isin(semantic, thing_classes)
    if centers and np.any(things):
        cs = np.array(centers, dtype=np.float64)
        yy, xx = np.nonzero(things)
        ty = yy + offset[yy, xx, 0]
        tx = xx + offset[yy, xx, 1]
        d2 = (ty[:, None] - cs[None, :, 0]) ** 2 + (tx[:, None] - cs[None, :, 1]) ** 2
        instance[yy, xx] = np.argmin(d2, axis=1) + 1
    return semantic, instance


@dataclass
class ProtocolReport:
    protocol: int
    domain: str
    depth: DepthMetrics | None
    miou: float
    iou: list
    pq: float
    sq: float
    rq: float
    n_frames: int
    frame_span: tuple
    stage: str = ""

    def to_record(self):
        rec = asdict(self)
        rec["frame_span"] = list(self.frame_span)
        return rec


class Evaluator:
    """Accumulates depth, semantic and panoptic metrics over frames."""

    def __init__(self, n_classes, thing_classes=THING_CLASSES, median_scaling=True, max_depth=None,
                 center_threshold=0.1):
        self.n_classes = n_classes
        self.thing_classes = tuple(thing_classes)
        self.median_scaling = median_scaling
        self.max_depth = max_depth
        self.center_threshold = center_threshold
        self.confusion = ConfusionMatrix(n_classes)
        self.panoptic = PanopticAccumulator(n_classes, thing_classes)
        self.depth = []
        self.indices = []

    def update(self, prediction, sample):
        semantic, instance, depth = prediction
        self.indices.append(sample.sequence_index)
        if sample.semantic is not None:
            self.confusion.update(semantic, sample.semantic)
            gt_inst = sample.instance if sample.instance is not None else np.zeros_like(sample.semantic)
            self.panoptic.update((semantic, instance), (sample.semantic, gt_inst))
        if sample.gt_depth is not None and np.any(sample.gt_depth > 0):
            self.depth.append(depth_metrics(depth, sample.gt_depth, self.median_scaling, self.max_depth))

    def report(self, protocol, domain, stage=""):
        if not self.indices:
            raise InvalidInputError("no frames were evaluated")
        pan = self.panoptic.compute()
        iou = [None if np.isnan(v) else float(v) for v in self.confusion.iou()]
        return ProtocolReport(
            protocol=protocol,
            domain=domain,
            depth=DepthMetrics.mean(self.depth) if self.depth else None,
            miou=self.confusion.miou(),
            iou=iou,
            pq=pan.pq,
            sq=pan.sq,
            rq=pan.rq,
            n_frames=len(self.indices),
            frame_span=(min(self.indices), max(self.indices)),
            stage=stage,
        )


@dataclass
class AdaptationConfig:
    """Settings of one adaptation run.

    ``counts`` is (online, target replay, source replay) per batch.
    ``alpha_schedule`` gives the EMA rate per adapted domain in order; the
    last value is reused for further domains.  ``source_replay=False`` keeps
    the source buffer for mixing but removes supervised source samples from
    the batch; ``diversity=False`` builds the source buffer uniformly and
    evicts target entries at random.
    """

    counts: tuple = (1, 2, 2)
    source_capacity: int = 300
    target_capacity: int = 300
    similarity_threshold: float = 0.998
    temperature: float = 0.01
    alpha_schedule: tuple = (0.9, 0.7)
    learning_rate: float = 1e-4
    split: float = 0.7
    seed: int = 0
    diversity: bool = True
    source_replay: bool = True
    mixing: bool = True
    match_histograms: bool = True
    steps_per_frame: int = 1
    mix: MixConfig = field(default_factory=MixConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    median_scaling: bool = True
    max_depth: float | None = None
    center_threshold: float = 0.1
    thing_classes: tuple = THING_CLASSES

    def __post_init__(self):
        self.thing_classes = tuple(int(c) for c in self.thing_classes)
        self.counts = tuple(int(c) for c in self.counts)
        self.alpha_schedule = tuple(float(a) for a in self.alpha_schedule)
        if len(self.counts) != 3 or self.counts[0] != 1 or min(self.counts) < 0:
            raise InvalidInputError(f"batch counts must be (1, n_target, n_source), got {self.counts}")
        check_fraction(self.split, "split", high_open=True)
        if not self.alpha_schedule:
            raise InvalidInputError("alpha_schedule must not be empty")
        for a in self.alpha_schedule:
            check_fraction(a, "alpha", low_open=False)
        if self.source_capacity < 1 or self.target_capacity < 1:
            raise InvalidInputError("buffer capacities must be positive")
        if self.learning_rate < 0 or self.steps_per_frame < 1:
            raise InvalidInputError("learning_rate must be >= 0 and steps_per_frame >= 1")


def _triplets(samples):
    return np.stack([np.stack(s.frames) for s in samples])


class OnlineAdapter(BaseEstimator):
    """Continual adaptation of a pretrained model to an unlabelled image stream.

    ``fit`` takes the labelled source training set and prepares the source
    buffer, the EMA teacher, the optimizer and an empty target buffer.
    ``partial_fit`` performs one adaptation step per online sample;
    ``predict`` returns ``(semantic, instance, depth)`` for a sample.

    Parameters
    ----------
    pretrained : PerceptionModel
        Never modified; the adapter works on a copy.
    config : AdaptationConfig, optional
    debug_dir : path, optional
        When set, every mixed image and its pseudo-labels are written there.
    """

    def __init__(self, pretrained=None, config=None, debug_dir=None):
        self.pretrained = pretrained
        self.config = config
        self.debug_dir = debug_dir

    # setup -------------------------------------------------------------

    def fit(self, source_samples, y=None):
        if self.pretrained is None:
            raise InvalidInputError("OnlineAdapter needs a pretrained model")
        cfg = self.config or AdaptationConfig()
        self.config_ = cfg
        self.rng_ = check_random_state(cfg.seed)
        source = list(source_samples)
        self.model_ = self.pretrained.copy().freeze(ENCODER + INSTANCE_HEAD)
        # Encoder snapshot for feature embeddings; the encoder is frozen, so this never changes.
        self.feature_params_ = {k: self.pretrained.params[k].copy() for k in ENCODER}
        self.teacher_ = EmaState.from_params(self.model_.params, cfg.alpha_schedule[0])
        self.optimizer_ = Adam(cfg.learning_rate)
        capacity = min(cfg.source_capacity, len(source))
        self.source_buffer_ = build_source_buffer(
            source, capacity, cfg.temperature, self.rng_, sampling="rcs" if cfg.diversity else "uniform")
        self.target_buffer_ = TargetBuffer(cfg.target_capacity)
        self.n_steps_ = 0
        self.log_ = []
        return self

    def set_alpha(self, alpha):
        self.teacher_.alpha = check_fraction(alpha, "alpha", low_open=False)

    @property
    def n_classes(self):
        return self.model_.config.n_classes

    # inference ---------------------------------------------------------

    def predict(self, sample):
        """Frozen-weight ``(semantic, instance, depth)`` for the key frame of ``sample``."""
        out = self.model_.forward(sample.image[None], heads=("semantic", "instance", "depth"))
        semantic, instance = panoptic_fuse(out.logits[0], out.center[0], out.offset[0],
                                           self.config_.thing_classes, self.config_.center_threshold)
        return semantic, instance, out.depth[0]

    def embed(self, sample):
        feature = self.model_.feature_embed(sample.image, params=self.feature_params_)
        return feature.astype(np.float32).astype(np.float64)

    # adaptation --------------------------------------------------------

    def _mix(self, batch):
        cfg = self.config_
        if not cfg.mixing or len(self.source_buffer_) == 0:
            return None
        if batch.source_originals:
            source = batch.source_originals[0]
        else:
            source = self.source_buffer_.samples[self.source_buffer_.draw(1, self.rng_)[0]]
        target = batch.target_replay[0] if batch.target_replay else batch.online
        teacher = teacher_predictor(self.model_, self.teacher_)
        return generate_mixed_sample(source, target, teacher, cfg.mix, self.rng_)

    def _gradient_step(self, batch, mixed):
        cfg = self.config_
        model = self.model_
        samples = batch.samples
        out = model.forward(_triplets(samples), heads=("semantic", "depth", "pose"))
        depth_losses, photo = [], []
        for i, s in enumerate(samples):
            try:
                r = photometric_loss(s.frames, out.depth[i], out.pose[i], s.intrinsics, cfg.weights)
            except UnusableFrameError:
                if i != 0:
                    raise
                r = None
            photo.append(r)
            depth_losses.append(None if r is None else r.value)
        motion = float(np.linalg.norm(out.pose[0, 1, 3:]))
        n_src = len(batch.source_replay)
        first_src = len(samples) - n_src
        ce = [bootstrapped_ce(out.logits[first_src + j], s.semantic, cfg.weights.bootstrap_fraction)
              for j, s in enumerate(batch.source_replay)]
        mixed_ce = mixed_out = None
        if mixed is not None and np.any(mixed.pseudo_labels != IGNORE_INDEX):
            mixed_out = model.forward(mixed.image[None], heads=("semantic",))
            mixed_ce = bootstrapped_ce(mixed_out.logits[0], mixed.pseudo_labels, cfg.weights.bootstrap_fraction)
        total = adaptation_total_loss(depth_losses, [c.value for c in ce],
                                      None if mixed_ce is None else mixed_ce.value, motion, cfg.weights)

        g_depth = np.zeros_like(out.depth)
        g_pose = np.zeros_like(out.pose)
        for i, (w, r) in enumerate(zip(total.depth_weights, photo)):
            if w and r is not None:
                g_depth[i] = w * r.grad_depth
                g_pose[i] = w * r.grad_pose
        g_logits = np.zeros_like(out.logits)
        for j, c in enumerate(ce):
            g_logits[first_src + j] = total.source_weight * c.grad_logits
        grads = model.backward(out, {"depth": g_depth, "pose": g_pose, "logits": g_logits})
        if mixed_out is not None:
            g_mix = model.backward(mixed_out, {"logits": total.mixed_weight * mixed_ce.grad_logits[None]})
            for k in grads:
                grads[k] = grads[k] + g_mix[k]
        accepted = self.optimizer_.step(model.params, grads, model.frozen)
        return total, motion, accepted

    def partial_fit(self, sample, y=None):
        """One online adaptation step on ``sample``; target labels are never read."""
        cfg = self.config_
        online = sample.unlabeled()
        reports = []
        for _ in range(cfg.steps_per_frame):
            counts = cfg.counts if cfg.source_replay else (cfg.counts[0], cfg.counts[1], 0)
            batch = compose_batch(online, self.target_buffer_, self.source_buffer_, counts, self.rng_,
                                  cfg.match_histograms)
            mixed = self._mix(batch)
            total, motion, accepted = self._gradient_step(batch, mixed)
            reports.append((batch, mixed, total, motion, accepted))
            if mixed is not None and self.debug_dir is not None:
                self._dump_mix(mixed)
        decision = update_target_buffer(self.target_buffer_, online, self.embed(online),
                                        cfg.similarity_threshold, cfg.diversity, self.rng_)
        ema_update(self.teacher_, self.model_.params)
        batch, mixed, total, motion, accepted = reports[-1]
        record = {
            "step": self.n_steps_,
            "frame": sample.sequence_index,
            "domain": sample.domain_tag,
            "loss": total.total,
            **{f"loss_{k}": v for k, v in total.terms.items()},
            "gated": bool(total.gated),
            "motion": motion,
            "accepted": bool(accepted),
            "batch": len(batch),
            "clamped": bool(batch.clamped),
            "mix_cell": None if mixed is None else mixed.cell,
            "admitted": bool(decision.admitted),
            "similarity": None if math.isinf(decision.similarity) else float(decision.similarity),
            "evicted": decision.evicted,
            "target_buffer": len(self.target_buffer_),
            "source_buffer": len(self.source_buffer_),
        }
        log.debug("step %d loss %.5f depth %.5f source_ce %.5f mixed_ce %.5f buffer %d",
                  self.n_steps_, total.total, total.terms["depth"], total.terms["source_ce"],
                  total.terms["mixed_ce"], len(self.target_buffer_))
        self.log_.append(record)
        self.n_steps_ += 1
        return self

    def _dump_mix(self, mixed):
        out = Path(self.debug_dir)
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(to_uint8(mixed.image)).save(out / f"mix_{self.n_steps_:06d}.png")
        Image.fromarray(mixed.pseudo_labels.astype(np.uint8)).save(out / f"pseudo_{self.n_steps_:06d}.png")

    # protocols ---------------------------------------------------------

    def _evaluator(self):
        cfg = self.config_
        return Evaluator(self.n_classes, cfg.thing_classes, cfg.median_scaling, cfg.max_depth,
                         cfg.center_threshold)

    def evaluate(self, samples, protocol, domain, stage=""):
        """Frozen-weight evaluation of ``samples``."""
        ev = self._evaluator()
        for s in samples:
            ev.update(self.predict(s), s)
        return ev.report(protocol, domain, stage)

    def run_adaptation(self, sequence, domain=None, stage=""):
        """Protocols 1 and 2 on one target sequence; returns ``(p1, p2)``."""
        n = len(sequence)
        if n == 0:
            raise InvalidInputError("empty target sequence")
        n_adapt = split_point(n, self.config_.split)
        domain = domain or getattr(sequence, "domain_tag", None) or sequence[0].domain_tag
        ev = self._evaluator()
        for k in range(n_adapt):
            s = sequence[k]
            ev.update(self.predict(s), s)
            self.partial_fit(s)
        p1 = ev.report(1, domain, stage)
        p2 = self.evaluate((sequence[k] for k in range(n_adapt, n)), 2, domain, stage) if n_adapt < n else None
        return p1, p2

    def eval_protocol3(self, source_val, stage=""):
        source_val = list(source_val)
        if not source_val:
            raise InvalidInputError("empty source validation set")
        return self.evaluate(source_val, 3, source_val[0].domain_tag, stage)

    def run_multi_domain(self, schedule, source_val, checkpoint_dir=None):
        """Adapt through ``schedule`` (``(name, sequence)`` pairs) in order.

        After each domain every domain seen so far is re-evaluated on its
        held-out part (protocol 2) together with the source validation set
        (protocol 3).  Returns a flat list of reports tagged by stage.
        """
        schedule = list(schedule)
        if not schedule:
            raise InvalidInputError("empty domain schedule")
        reports = []
        seen = []
        for i, (name, seq) in enumerate(schedule):
            alphas = self.config_.alpha_schedule
            self.set_alpha(alphas[min(i, len(alphas) - 1)])
            stage = f"after-{name}"
            p1, p2 = self.run_adaptation(seq, name, stage)
            reports.append(p1)
            seen.append((name, seq))
            for prev_name, prev_seq in seen:
                if prev_name == name:
                    if p2 is not None:
                        reports.append(p2)
                    continue
                start = split_point(len(prev_seq), self.config_.split)
                if start < len(prev_seq):
                    reports.append(self.evaluate((prev_seq[k] for k in range(start, len(prev_seq))), 2,
                                                 prev_name, stage))
            reports.append(self.eval_protocol3(source_val, stage))
            if checkpoint_dir is not None:
                save_checkpoint(self.model_, Path(checkpoint_dir) / stage, {"stage": stage})
        return reports

    def parameter_hash(self):
        return self.model_.parameter_hash()


def split_point(n, split):
    """Number of frames adapted on: ``ceil(split * n)`` guarded against float round-off."""
    return min(n, math.ceil(split * n - 1e-9))


def evaluate_model(model, samples, protocol, domain, config=None, stage=""):
    """Evaluate a bare model without building any adaptation state."""
    cfg = config or AdaptationConfig()
    ev = Evaluator(model.config.n_classes, cfg.thing_classes, cfg.median_scaling, cfg.max_depth,
                   cfg.center_threshold)
    for s in samples:
        out = model.forward(s.image[None], heads=("semantic", "instance", "depth"))
        semantic, instance = panoptic_fuse(out.logits[0], out.center[0], out.offset[0],
                                           cfg.thing_classes, cfg.center_threshold)
        ev.update((semantic, instance, out.depth[0]), s)
    return ev.report(protocol, domain, stage)


__all__ = [
    "AdaptationConfig",
    "Evaluator",
    "OnlineAdapter",
    "ProtocolReport",
    "evaluate_model",
    "panoptic_fuse",
    "split_point",
]
