"""Procedural corpus generation with per-sample derived seeds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .actions import SYNTHESIZERS, synthesize
from .grammar import ACTIONS, PHRASES, SUBJECTS, TextDescriptor, pace_for_length
from .motion import DEFAULT_FPS, F_MAX, F_MIN, assemble_motion
from .sample import CorpusSample, assign_split


@dataclass
class CorpusConfig:
    n_samples: int = 600
    actions: tuple = ACTIONS
    f_min: int = F_MIN
    f_max: int = F_MAX
    fps: int = DEFAULT_FPS
    fixed_length: int | None = None
    split_seed: int = 1234
    split_fractions: tuple = (0.7, 0.1, 0.2)
    # Per-action synthesizer parameter pins, e.g. {"walk": {"step_length": 0.6}}.
    action_params: dict = field(default_factory=dict)

    def validate(self):
        if not self.actions:
            raise ConfigError("action set is empty")
        for action in self.actions:
            if action not in SYNTHESIZERS:
                raise ConfigError(f"unknown action {action!r}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.f_min > self.f_max:
            raise ConfigError(f"F_min {self.f_min} > F_max {self.f_max}")
        if self.f_min < 2:
            raise ConfigError("F_min must be at least 2")
        if self.fps <= 0:
            raise ConfigError("fps must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.fixed_length is not None and not (
            self.f_min <= self.fixed_length <= self.f_max
        ):
            raise ConfigError("fixed_length outside [F_min, F_max]")


def make_sample(config: CorpusConfig, master_seed: int, sample_id: int) -> CorpusSample:
    """Synthesize one sample; pure in (config, master_seed, sample_id)."""
    rng = np.random.default_rng([master_seed, sample_id])
    action = config.actions[sample_id % len(config.actions)]
    if config.fixed_length is not None:
        F = config.fixed_length
    else:
        F = int(rng.integers(config.f_min, config.f_max + 1))
    overrides = config.action_params.get(action)
    positions, yaw, kin_params = synthesize(action, F, config.fps, rng, overrides)
    motion = assemble_motion(positions, yaw, config.fps)

    subject_idx = int(rng.integers(len(SUBJECTS)))
    phrase_idx = int(rng.integers(len(PHRASES[action])))
    descriptor = TextDescriptor.from_slots(
        action, subject_idx, phrase_idx, pace_for_length(F), extra=kin_params
    )
    split = assign_split(sample_id, config.split_seed, config.split_fractions)
    return CorpusSample(sample_id=sample_id, motion=motion, descriptor=descriptor, split=split)


def generate_corpus(config: CorpusConfig, seed: int) -> list[CorpusSample]:
    """Deterministic synthetic corpus: same (config, seed) -> identical samples."""
    config.validate()
    return [make_sample(config, seed, i) for i in range(config.n_samples)]


def split_samples(samples: list[CorpusSample], split: str) -> list[CorpusSample]:
    return [s for s in samples if s.split == split]
