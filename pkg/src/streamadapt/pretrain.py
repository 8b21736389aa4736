"""Supervised source-domain training of the perception model."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import InvalidInputError, UnusableFrameError, check_random_state
from .losses import LossWeights, bootstrapped_ce, instance_loss, photometric_loss
from .model import Adam, ModelConfig, PerceptionModel, round_to_float32

log = logging.getLogger(__name__)


def _triplets(samples):
    return np.stack([np.stack(s.frames) for s in samples])


def color_jitter(sample, strength, rng):
    """Apply one random per-channel ``gain * x**gamma + bias`` transform to all frames of ``sample``.

    Gains and gammas are drawn log-uniformly within ``exp(+-strength)``,
    biases uniformly within ``+-strength / 4``.
    """
    if strength <= 0:
        return sample
    gain = np.exp(rng.uniform(-strength, strength, 3))
    gamma = np.exp(rng.uniform(-strength, strength, 3))
    bias = rng.uniform(-strength / 4, strength / 4, 3)
    return sample.with_frames(np.clip(gain * f**gamma + bias, 0.0, 1.0) for f in sample.frames)


class SourcePretrainer(BaseEstimator):
    """Train every head on labelled source triplets.

    The per-sample objective is bootstrapped cross-entropy plus the instance
    loss plus the photometric depth loss, averaged over a mini-batch and
    minimised with Adam.  After training the parameters are rounded to
    float32 so that a saved checkpoint reloads bit-identically.

    Parameters
    ----------
    model_config : ModelConfig, optional
    n_steps : int
        Number of optimizer steps.
    batch_size : int
    learning_rate : float
    weights : LossWeights, optional
    color_jitter : float
        Strength of the per-sample colour augmentation (0 disables it).
    random_state : int
        Seeds the initialization, the mini-batch order and the augmentation.
    """

    def __init__(self, model_config=None, n_steps=1500, batch_size=4, learning_rate=1e-3, weights=None,
                 color_jitter=0.1, random_state=0):
        self.model_config = model_config
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weights = weights
        self.color_jitter = color_jitter
        self.random_state = random_state

    def _loss_and_grads(self, model, samples, weights):
        out = model.forward(_triplets(samples))
        n = len(samples)
        grads = {k: np.zeros_like(getattr(out, k)) for k in ("logits", "center", "offset", "depth", "pose")}
        terms = {"ce": 0.0, "instance": 0.0, "depth": 0.0}
        for i, s in enumerate(samples):
            ce = bootstrapped_ce(out.logits[i], s.semantic, weights.bootstrap_fraction)
            inst = instance_loss(out.center[i], out.offset[i], s.instance, weights)
            grads["logits"][i] = ce.grad_logits / n
            grads["center"][i] = inst.grad_center / n
            grads["offset"][i] = inst.grad_offset / n
            terms["ce"] += ce.value / n
            terms["instance"] += inst.value / n
            try:
                photo = photometric_loss(s.frames, out.depth[i], out.pose[i], s.intrinsics, weights)
            except UnusableFrameError:
                continue
            grads["depth"][i] = photo.grad_depth / n
            grads["pose"][i] = photo.grad_pose / n
            terms["depth"] += photo.value / n
        return terms, model.backward(out, grads)

    def fit(self, samples, y=None):
        samples = [s for s in samples]
        if not samples:
            raise InvalidInputError("no training samples")
        if any(not s.labeled or s.instance is None for s in samples):
            raise InvalidInputError("pretraining needs semantic and instance labels on every sample")
        config = self.model_config or ModelConfig()
        if samples[0].shape != (config.height, config.width):
            raise InvalidInputError(f"samples are {samples[0].shape}, model expects {(config.height, config.width)}")
        weights = self.weights or LossWeights()
        rng = check_random_state(self.random_state)
        seed = int(self.random_state) if isinstance(self.random_state, (int, np.integer)) else 0
        model = PerceptionModel(config, seed=seed)
        optimizer = Adam(self.learning_rate)
        order, pos = rng.permutation(len(samples)), 0
        history = []
        batch_size = min(self.batch_size, len(samples))
        for step in range(self.n_steps):
            if pos + batch_size > len(order):
                order, pos = rng.permutation(len(samples)), 0
            batch = [color_jitter(samples[i], self.color_jitter, rng) for i in order[pos:pos + batch_size]]
            pos += batch_size
            terms, grads = self._loss_and_grads(model, batch, weights)
            optimizer.step(model.params, grads, model.frozen)
            history.append(terms)
            if step % 100 == 0 or step == self.n_steps - 1:
                log.info("pretrain step %d ce %.4f instance %.5f depth %.4f", step, terms["ce"],
                         terms["instance"], terms["depth"])
        model.params = round_to_float32(model.params)
        self.model_ = model
        self.history_ = history
        return self

    def transform(self, samples):
        """Key-frame feature embeddings of ``samples`` under the trained encoder."""
        return self.model_.feature_embed(np.stack([s.image for s in samples]))
