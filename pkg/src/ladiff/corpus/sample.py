"""Corpus sample container and the deterministic split assignment."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

from .grammar import TextDescriptor
from .motion import MotionSequence

SPLITS = ("train", "val", "test")
SPLIT_CODES = {name: code for code, name in enumerate(SPLITS)}


@dataclass
class CorpusSample:
    sample_id: int
    motion: MotionSequence
    descriptor: TextDescriptor
    split: str


def assign_split(sample_id: int, split_seed: int, fractions=(0.7, 0.1, 0.2)) -> str:
    """Hash-based split: a pure function of (sample id, split seed)."""
    digest = hashlib.sha256(struct.pack("<qq", split_seed, sample_id)).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    if u < fractions[0]:
        return "train"
    if u < fractions[0] + fractions[1]:
        return "val"
    return "test"
