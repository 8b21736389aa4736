"""Flat ``key = value`` run configuration shared by the command-line tools.

Every adaptation setting, every loss weight, the data paths and the debug
flags live in one flat namespace so that a config file, ``--set key=value``
overrides and the ``CODEPS_SEED`` environment variable compose simply::

    # comments and blank lines are ignored
    source = data/source-train
    targets = data/target
    learning_rate = 1e-4
    counts = 1, 2, 2
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from ._validation import InvalidInputError
from .engine import AdaptationConfig
from .losses import LossWeights
from .mixing import MixConfig

SEED_ENV = "CODEPS_SEED"


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(convert):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else convert(text)
    return parse


def _tuple(convert):
    def parse(text):
        return tuple(convert(t) for t in text.split(",") if t.strip())
    return parse


def _paths(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _opt(default, parse):
    return field(default=default, metadata={"parse": parse})


@dataclass
class RunConfig:
    """All adaptation settings plus paths, output directory and debug flags."""

    # adaptation
    counts: tuple = _opt((1, 2, 2), _tuple(int))
    source_capacity: int = _opt(300, int)
    target_capacity: int = _opt(300, int)
    similarity_threshold: float = _opt(0.998, float)
    temperature: float = _opt(0.01, float)
    alpha_schedule: tuple = _opt((0.9, 0.7), _tuple(float))
    learning_rate: float = _opt(1e-4, float)
    split: float = _opt(0.7, float)
    seed: int = _opt(0, int)
    diversity: bool = _opt(True, _bool)
    source_replay: bool = _opt(True, _bool)
    mixing: bool = _opt(True, _bool)
    match_histograms: bool = _opt(True, _bool)
    steps_per_frame: int = _opt(1, int)
    grid_rows: int = _opt(2, int)
    grid_cols: int = _opt(2, int)
    median_scaling: bool = _opt(True, _bool)
    max_depth: float | None = _opt(None, _optional(float))
    center_threshold: float = _opt(0.1, float)
    thing_classes: tuple = _opt((6, 7), _tuple(int))
    # loss weights
    lambda_pr: float = _opt(1.0, float)
    lambda_sm: float = _opt(1e-3, float)
    lambda_center: float = _opt(200.0 / 255.0**2, float)
    lambda_offset: float = _opt(0.01, float)
    bootstrap_fraction: float = _opt(0.2, float)
    motion_threshold: float = _opt(0.03, float)
    # pretraining
    pretrain_steps: int = _opt(1500, int)
    pretrain_batch: int = _opt(4, int)
    pretrain_lr: float = _opt(1e-3, float)
    color_jitter: float = _opt(0.1, float)
    # paths and flags
    source: str | None = _opt(None, _optional(str))
    source_val: str | None = _opt(None, _optional(str))
    targets: tuple = _opt((), _paths)
    checkpoint: str | None = _opt(None, _optional(str))
    output_dir: str = _opt("runs", str)
    debug_mix: bool = _opt(False, _bool)
    log_level: str = _opt("INFO", str)

    @classmethod
    def keys(cls):
        return tuple(f.name for f in fields(cls))

    def update(self, pairs, origin="<override>"):
        """Apply ``{key: text}`` or ``[(key, text)]`` pairs; unknown keys are rejected."""
        items = pairs.items() if isinstance(pairs, dict) else pairs
        known = {f.name: f for f in fields(self)}
        for key, text in items:
            key = key.strip()
            if key not in known:
                raise InvalidInputError(f"{origin}: unknown config key {key!r}")
            try:
                value = known[key].metadata["parse"](str(text))
            except ValueError as exc:
                raise InvalidInputError(f"{origin}: bad value for {key}: {exc}") from None
            setattr(self, key, value)
        return self

    def validate(self):
        """Build every derived config once so that invalid values fail before a run starts."""
        self.adaptation_config()
        if self.pretrain_steps < 1 or self.pretrain_batch < 1 or self.pretrain_lr <= 0:
            raise InvalidInputError("pretraining needs positive steps, batch size and learning rate")
        if self.color_jitter < 0:
            raise InvalidInputError("color_jitter must be >= 0")
        return self

    def loss_weights(self):
        return LossWeights(self.lambda_pr, self.lambda_sm, self.lambda_center, self.lambda_offset,
                           self.bootstrap_fraction, self.motion_threshold)

    def adaptation_config(self):
        own = {f.name for f in fields(AdaptationConfig)}
        kwargs = {k: getattr(self, k) for k in own if hasattr(self, k)}
        return AdaptationConfig(**kwargs, mix=MixConfig(self.grid_rows, self.grid_cols),
                                weights=self.loss_weights())

    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text, origin="<text>"):
    """Parse flat ``key = value`` lines into ``[(key, value)]``; ``#`` starts a comment."""
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        if not key.strip():
            raise InvalidInputError(f"{origin}:{lineno}: empty key")
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(path=None, overrides=(), environ=None):
    """Defaults, then the config file, then ``overrides``, then ``CODEPS_SEED``; validated."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg.update(parse_config_text(path.read_text(), str(path)), str(path))
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise InvalidInputError(f"override must be key=value, got {item!r}")
        pairs.append(tuple(item.split("=", 1)))
    cfg.update(pairs)
    env = os.environ if environ is None else environ
    if env.get(SEED_ENV, "").strip():
        cfg.update([("seed", env[SEED_ENV])], SEED_ENV)
    return cfg.validate()


__all__ = ["RunConfig", "SEED_ENV", "load_config", "parse_config_text"]
