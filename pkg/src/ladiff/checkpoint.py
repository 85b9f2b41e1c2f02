"""Binary checkpoint container for model parameters.

Layout (little-endian):

    magic "LADK" | version u32 | tag length u8 | tag UTF-8 | digest 32 bytes
    | block count u32
    | per block: name length u16 | name UTF-8 | ndim u32 | dims u32* | f32 data
    | crc32 u32 over everything before it

The digest pins the configuration the parameters were trained under; loading
with a different resolved config refuses outright.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, ChecksumError, DigestMismatchError

MAGIC = b"LADK"
VERSION = 1
COMPONENTS = ("vae", "denoiser", "extractor")


def state_dict_to_bytes(component: str, state: dict, digest: bytes) -> bytes:
    if component not in COMPONENTS:
        raise CheckpointError(f"unknown component tag {component!r}")
    if len(digest) != 32:
        raise CheckpointError("config digest must be 32 bytes")
    tag = component.encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<B", len(tag)), tag, digest]
    chunks.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def bytes_to_state_dict(blob: bytes, component: str, digest: bytes) -> dict:
    if len(blob) < 4:
        raise CheckpointError("checkpoint truncated before checksum")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != stored_crc:
        raise ChecksumError(
            f"checkpoint checksum mismatch at offset {len(body)}: "
            f"stored {stored_crc:#010x}, computed {zlib.crc32(body):#010x}"
        )
    offset = 0
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r} at offset 0")
    offset = 4
    (version,) = struct.unpack_from("<I", body, offset)
    offset += 4
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (tag_len,) = struct.unpack_from("<B", body, offset)
    offset += 1
    tag = body[offset : offset + tag_len].decode("utf-8")
    offset += tag_len
    if tag != component:
        raise CheckpointError(f"checkpoint holds component {tag!r}, expected {component!r}")
    stored_digest = body[offset : offset + 32]
    offset += 32
    if stored_digest != digest:
        raise DigestMismatchError(
            "checkpoint config digest does not match the loading config "
            f"({stored_digest.hex()[:12]}... vs {digest.hex()[:12]}...); "
            "refusing to load parameters trained under a different configuration"
        )
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", body, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", body, offset)
        offset += 4 * ndim
        numel = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=numel, offset=offset)
        offset += 4 * numel
        state[name] = torch.from_numpy(arr.copy().reshape(shape))
    if offset != len(body):
        raise CheckpointError(f"trailing bytes after parameter blocks at offset {offset}")
    return state


def save_checkpoint(path, component: str, model: torch.nn.Module, digest: bytes) -> None:
    Path(path).write_bytes(state_dict_to_bytes(component, model.state_dict(), digest))


def load_checkpoint(path, component: str, model: torch.nn.Module, digest: bytes) -> None:
    """Load parameters in place; every stored block must match the model."""
    path = Path(path)
    state = bytes_to_state_dict(path.read_bytes(), component, digest)
    tensors = {k: v for k, v in state.items()}
    missing = set(model.state_dict()) - set(tensors)
    extra = set(tensors) - set(model.state_dict())
    if missing or extra:
        raise CheckpointError(
            f"parameter blocks mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}"
        )
    model.load_state_dict(tensors)
