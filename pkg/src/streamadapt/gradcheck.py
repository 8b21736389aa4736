"""Central finite-difference verification of the model's analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import InvalidInputError, check_random_state
from .losses import LossWeights, batch_depth_loss, bootstrapped_ce, instance_loss, photometric_loss
from .model import ModelConfig, PerceptionModel

LOSSES = ("photometric", "batch_depth", "ce", "instance")

# Gradients smaller than this are compared on an absolute scale.
ABS_FLOOR = 1e-6


def _triplets(samples):
    return np.stack([np.stack(s.frames) for s in samples])


def _photometric(model, params, samples, weights):
    out = model.forward(_triplets(samples[:1]), heads=("depth", "pose"), params=params)
    s = samples[0]
    r = photometric_loss(s.frames, out.depth[0], out.pose[0], s.intrinsics, weights)
    return r.value, r.branches, out, {"depth": r.grad_depth[None], "pose": r.grad_pose[None]}


def _batch_depth(model, params, samples, weights):
    out = model.forward(_triplets(samples), heads=("depth", "pose"), params=params)
    results = [photometric_loss(s.frames, out.depth[i], out.pose[i], s.intrinsics, weights)
               for i, s in enumerate(samples)]
    motion = float(np.linalg.norm(out.pose[0, 1, 3:]))
    agg = batch_depth_loss([r.value for r in results], motion, weights.motion_threshold)
    grads = {
        "depth": np.stack([w * r.grad_depth for w, r in zip(agg.weights, results)]),
        "pose": np.stack([w * r.grad_pose for w, r in zip(agg.weights, results)]),
    }
    branches = (np.array([agg.gated]),) + tuple(b for r in results for b in r.branches)
    return agg.value, branches, out, grads


def _ce(model, params, samples, weights):
    out = model.forward(_triplets(samples[:1])[:, -1], heads=("semantic",), params=params)
    r = bootstrapped_ce(out.logits[0], samples[0].semantic, weights.bootstrap_fraction)
    return r.value, r.branches, out, {"logits": r.grad_logits[None]}


def _instance(model, params, samples, weights):
    out = model.forward(_triplets(samples[:1])[:, -1], heads=("instance",), params=params)
    r = instance_loss(out.center[0], out.offset[0], samples[0].instance, weights)
    return r.value, r.branches, out, {"center": r.grad_center[None], "offset": r.grad_offset[None]}


_EVALUATORS = {"photometric": _photometric, "batch_depth": _batch_depth, "ce": _ce, "instance": _instance}


def _same_branches(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class GradCheckReport:
    loss: str
    max_rel_error: float
    n_checked: int
    n_skipped: int
    per_array: dict = field(default_factory=dict)

    def __str__(self):
        return (f"{self.loss}: max relative error {self.max_rel_error:.3e} over {self.n_checked} "
                f"coordinates ({self.n_skipped} redrawn at non-differentiable points)")


def gradient_check(model, samples, loss="photometric", n_coords=200, step=1e-4, weights=None,
                   random_state=0, max_attempts=None):
    """Compare analytic and central-difference gradients on random coordinates.

    Every unfrozen parameter array contributes at least a few coordinates;
    the rest are drawn uniformly over all unfrozen entries.  A coordinate
    whose perturbation changes one of the loss's discrete branches (an
    interpolation cell, a residual sign, a min winner, the bootstrapped pixel
    set) is retried with steps down to ``step / 1000`` and redrawn if every
    step crosses, since the function is not differentiable across it.
    """
    if loss not in _EVALUATORS:
        raise InvalidInputError(f"unknown loss {loss!r}; choose from {LOSSES}")
    samples = list(samples)
    weights = weights or LossWeights()
    rng = check_random_state(random_state)
    evaluate = _EVALUATORS[loss]
    params = {k: v.copy() for k, v in model.params.items()}
    value, branches, out, out_grads = evaluate(model, params, samples, weights)
    analytic = model.backward(out, out_grads)

    names = sorted(k for k in params if k not in model.frozen)
    sizes = np.array([params[k].size for k in names])
    per_array_min = 4
    queue = [(k, int(i)) for k in names
             for i in rng.choice(params[k].size, min(per_array_min, params[k].size), replace=False)]
    max_attempts = max_attempts or 20 * n_coords
    checked = skipped = 0
    max_err = 0.0
    per_array = {}
    attempts = 0
    while checked < n_coords and attempts < max_attempts:
        attempts += 1
        if queue:
            name, idx = queue.pop()
        else:
            name = names[rng.choice(len(names), p=sizes / sizes.sum())]
            idx = int(rng.integers(params[name].size))
        flat = params[name].reshape(-1)
        orig = flat[idx]
        for h in step * np.array([1.0, 0.1, 0.01, 0.001]):
            flat[idx] = orig + h
            f_plus, b_plus, _, _ = evaluate(model, params, samples, weights)
            flat[idx] = orig - h
            f_minus, b_minus, _, _ = evaluate(model, params, samples, weights)
            flat[idx] = orig
            if _same_branches(branches, b_plus) and _same_branches(branches, b_minus):
                break
        else:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        exact = analytic[name].reshape(-1)[idx]
        err = abs(numeric - exact) / max(abs(numeric), abs(exact), ABS_FLOOR)
        max_err = max(max_err, err)
        per_array[name] = max(per_array.get(name, 0.0), err)
        checked += 1
    if checked < n_coords:
        max_err = math.inf
    return GradCheckReport(loss, max_err, checked, skipped, per_array)


TOY_CONFIG = ModelConfig(height=16, width=24, enc_channels=(4, 6), head_channels=6)


def toy_model(seed=0, config=TOY_CONFIG):
    """A small model moved off its symmetric initialization.

    Biases and the pose layer start at exactly zero, which puts every warped
    coordinate on an integer pixel and every finite difference on a kink.  A
    small random offset on those arrays gives a generic point to check at.
    """
    model = PerceptionModel(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for name, value in model.params.items():
        if not np.any(value):
            value += rng.normal(0.0, 0.05, value.shape)
    return model


def gradient_suite(samples, n_coords=200, weights=None, seed=0, model=None):
    """Run ``gradient_check`` for every loss term on the toy model; returns the reports."""
    model = model or toy_model(seed)
    return [gradient_check(model, samples, loss, n_coords, weights=weights, random_state=seed) for loss in LOSSES]
