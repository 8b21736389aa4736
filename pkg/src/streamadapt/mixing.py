"""Cross-domain mixing and the EMA teacher.

A mixed sample is built in three steps: the source key frame takes on the
target's colour histogram, the target key frame is resampled into the source
camera's intrinsics, and one cell of a regular grid over the resampled
target is pasted onto the styled source.  Pixels of the pasted cell are
labelled by the teacher, the rest keep the source annotation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import IGNORE_INDEX, ContractViolation, InvalidInputError, check_fraction, check_random_state
from .imaging import histogram_match, intrinsic_warp


@dataclass(frozen=True)
class MixConfig:
    grid_rows: int = 2
    grid_cols: int = 2
    patches_per_mix: int = 1

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1 or self.grid_rows * self.grid_cols < 2:
            raise InvalidInputError("the mixing grid needs at least two cells")
        if self.patches_per_mix != 1:
            raise InvalidInputError("exactly one patch is inserted per mixed sample")

    def cell_bounds(self, shape, cell):
        """``(row0, row1, col0, col1)`` of grid cell ``cell`` (row-major) for an image of ``shape``."""
        n_cells = self.grid_rows * self.grid_cols
        if not 0 <= cell < n_cells:
            raise InvalidInputError(f"cell {cell} outside a {self.grid_rows}x{self.grid_cols} grid")
        h, w = shape
        r, c = divmod(int(cell), self.grid_cols)
        rows = np.arange(self.grid_rows + 1) * h // self.grid_rows
        cols = np.arange(self.grid_cols + 1) * w // self.grid_cols
        return int(rows[r]), int(rows[r + 1]), int(cols[c]), int(cols[c + 1])


@dataclass
class MixedSample:
    """A pseudo-labelled training image.

    ``patch_region`` is ``(row0, row1, col0, col1)`` with exclusive ends.
    ``validity`` is False on pasted pixels whose warp fell outside the target.
    """

    image: np.ndarray
    pseudo_labels: np.ndarray
    patch_region: tuple
    validity: np.ndarray
    cell: int
    styled_source: np.ndarray
    warped_target: np.ndarray

    @property
    def patch_mask(self):
        r0, r1, c0, c1 = self.patch_region
        mask = np.zeros(self.pseudo_labels.shape, dtype=bool)
        mask[r0:r1, c0:c1] = True
        return mask


@dataclass
class EmaState:
    """Teacher parameters tracking an exponential moving average of the student."""

    params: dict
    alpha: float = 0.9

    @classmethod
    def from_params(cls, params, alpha=0.9):
        return cls({k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}, alpha)


def ema_update(teacher, student_params, alpha=None):
    """``w_ema <- alpha * w_ema + (1 - alpha) * w`` for every array, in place."""
    alpha = teacher.alpha if alpha is None else alpha
    alpha = check_fraction(alpha, "alpha", low_open=False)
    if set(teacher.params) != set(student_params):
        raise InvalidInputError("teacher and student parameter names differ")
    for name, w in student_params.items():
        t = teacher.params[name]
        if t.shape != np.shape(w):
            raise InvalidInputError(f"{name}: teacher shape {t.shape} != student shape {np.shape(w)}")
        teacher.params[name] = alpha * t + (1.0 - alpha) * w
    return teacher


def teacher_predictor(model, teacher):
    """Callable mapping an ``(H, W, 3)`` image to the teacher's argmax labels."""

    def predict(image):
        out = model.forward(np.asarray(image)[None], heads=("semantic",), params=teacher.params)
        return np.argmax(out.logits[0], axis=-1)

    return predict


def generate_mixed_sample(source, target, teacher, cfg=None, random_state=None):
    """Build a mixed sample from a labelled source and an (unlabelled) target sample.

    ``teacher`` maps an image of the source shape to a label map.  Neither
    input sample is modified.
    """
    cfg = cfg or MixConfig()
    rng = check_random_state(random_state)
    if source.semantic is None:
        raise InvalidInputError("the source sample of a mix must carry semantic labels")
    shape = source.shape
    styled = histogram_match(source.image, target.image)
    warped, valid = intrinsic_warp(target.image, source.intrinsics, target.intrinsics, shape)
    predicted = np.asarray(teacher(warped))
    if predicted.shape != shape:
        raise ContractViolation(f"teacher prediction shape {predicted.shape} != source shape {shape}")
    cell = int(rng.integers(cfg.grid_rows * cfg.grid_cols))
    r0, r1, c0, c1 = cfg.cell_bounds(shape, cell)
    image = styled.copy()
    image[r0:r1, c0:c1] = warped[r0:r1, c0:c1]
    labels = np.array(source.semantic, dtype=np.int64, copy=True)
    patch_labels = np.where(valid[r0:r1, c0:c1], predicted[r0:r1, c0:c1], IGNORE_INDEX)
    labels[r0:r1, c0:c1] = patch_labels
    validity = np.ones(shape, dtype=bool)
    validity[r0:r1, c0:c1] = valid[r0:r1, c0:c1]
    return MixedSample(image, labels, (r0, r1, c0, c1), validity, cell, styled, warped)
