"""Binary container for corpora and normalizers.

Layout (all integers little-endian):

    header:  magic "LADC" | version u32 | J u32 | V u32 | fps u32 | count u32
    sample:  id u32 | split u8 | text length u32 | text UTF-8 | F u32 | F*V float32

A normalizer file reuses the same header with count == 0, followed by
V float32 means and V float32 stds.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .grammar import TextDescriptor
from .motion import NUM_JOINTS, POSE_DIM, MotionSequence
from .normalize import Normalizer
from .sample import SPLIT_CODES, SPLITS, CorpusSample

MAGIC = b"LADC"
VERSION = 1

_HEADER = struct.Struct("<4sIIIII")


def _pack_header(num_joints: int, pose_dim: int, fps: int, count: int) -> bytes:
    return _HEADER.pack(MAGIC, VERSION, num_joints, pose_dim, fps, count)


def _unpack_header(blob: bytes, offset: int = 0):
    magic, version, J, V, fps, count = _HEADER.unpack_from(blob, offset)
    if magic != MAGIC:
        raise ConfigError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ConfigError(f"unsupported container version {version}")
    return J, V, fps, count, offset + _HEADER.size


def corpus_to_bytes(samples: list[CorpusSample]) -> bytes:
    if not samples:
        raise ConfigError("refusing to serialize an empty corpus")
    fps = samples[0].motion.fps
    chunks = [_pack_header(NUM_JOINTS, POSE_DIM, fps, len(samples))]
    for s in samples:
        text = s.descriptor.text.encode("utf-8")
        chunks.append(struct.pack("<IBI", s.sample_id, SPLIT_CODES[s.split], len(text)))
        chunks.append(text)
        chunks.append(struct.pack("<I", s.motion.num_frames))
        chunks.append(s.motion.data.astype("<f4").tobytes())
    return b"".join(chunks)


def corpus_from_bytes(blob: bytes) -> list[CorpusSample]:
    J, V, fps, count, offset = _unpack_header(blob)
    samples = []
    for _ in range(count):
        sample_id, split_code, text_len = struct.unpack_from("<IBI", blob, offset)
        offset += 9
        text = blob[offset : offset + text_len].decode("utf-8")
        offset += text_len
        (F,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        data = np.frombuffer(blob, dtype="<f4", count=F * V, offset=offset)
        offset += 4 * F * V
        motion = MotionSequence(data.reshape(F, V).astype(np.float64), fps)
        samples.append(
            CorpusSample(
                sample_id=sample_id,
                motion=motion,
                descriptor=TextDescriptor.from_text(text),
                split=SPLITS[split_code],
            )
        )
    return samples


def save_corpus(path, samples: list[CorpusSample]) -> None:
    Path(path).write_bytes(corpus_to_bytes(samples))


def load_corpus(path) -> list[CorpusSample]:
    return corpus_from_bytes(Path(path).read_bytes())


def save_normalizer(path, normalizer: Normalizer, fps: int) -> None:
    blob = _pack_header(NUM_JOINTS, len(normalizer.mean), fps, 0)
    blob += normalizer.mean.astype("<f4").tobytes()
    blob += normalizer.std.astype("<f4").tobytes()
    Path(path).write_bytes(blob)


def load_normalizer(path) -> Normalizer:
    blob = Path(path).read_bytes()
    J, V, fps, count, offset = _unpack_header(blob)
    if count != 0:
        raise ConfigError("normalizer container must have a zero sample count")
    mean = np.frombuffer(blob, dtype="<f4", count=V, offset=offset).astype(np.float64)
    std = np.frombuffer(blob, dtype="<f4", count=V, offset=offset + 4 * V).astype(np.float64)
    return Normalizer(mean=mean, std=std)
