"""Per-channel standardization fitted on the training split."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientDataError
from .motion import MotionSequence

log = logging.getLogger(__name__)

STD_EPSILON = 1e-6


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, motion: MotionSequence) -> MotionSequence:
        return MotionSequence((motion.data - self.mean) / self.std, motion.fps)

    def denormalize(self, motion: MotionSequence) -> MotionSequence:
        return MotionSequence(motion.data * self.std + self.mean, motion.fps)

    def normalize_array(self, data: np.ndarray) -> np.ndarray:
        return (data - self.mean) / self.std

    def denormalize_array(self, data: np.ndarray) -> np.ndarray:
        return data * self.std + self.mean


def fit_normalizer(motions: list[MotionSequence]) -> Normalizer:
    """Channel-wise mean/std over all frames of the given motions.

    Constant channels get their std clamped to STD_EPSILON (with a warning)
    so normalization never divides by zero.
    """
    if not motions:
        raise InsufficientDataError("cannot fit a normalizer on an empty train split")
    stacked = np.concatenate([m.data for m in motions], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    constant = std < STD_EPSILON
    if constant.any():
        log.warning(
            "clamping std of %d constant channel(s) to %.0e", int(constant.sum()), STD_EPSILON
        )
        std = np.where(constant, STD_EPSILON, std)
    return Normalizer(mean=mean, std=std)
