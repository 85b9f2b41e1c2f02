"""Shared neural-net plumbing: positional tables, seeded init, batching."""

from __future__ import annotations

import hashlib
import math

import numpy as np
import torch
from torch import nn


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    """(length, dim) sinusoidal position table."""
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: table[:, 1::2].shape[1]])
    return table.to(torch.float32)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (B,) integer timesteps -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float64, device=t.device)
        * (-math.log(10000.0) / half)
    )
    args = t.double().unsqueeze(1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb.float()


def _xavier(tensor: torch.Tensor, gen: torch.Generator) -> None:
    fan_in, fan_out = tensor.shape[1], tensor.shape[0]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    tensor.uniform_(-bound, bound, generator=gen)


@torch.no_grad()
def seeded_init(model: nn.Module, seed: int) -> None:
    """Re-initialize every parameter from an explicit generator.

    Keeps model construction independent of torch's global rng state:
    same seed, same weights, regardless of what ran before.
    """
    gen = torch.Generator().manual_seed(seed)
    covered: set[int] = set()
    for module in model.modules():
        if id(module) in covered:
            continue
        if isinstance(module, nn.MultiheadAttention):
            if module.in_proj_weight is not None:
                _xavier(module.in_proj_weight, gen)
            else:
                _xavier(module.q_proj_weight, gen)
                _xavier(module.k_proj_weight, gen)
                _xavier(module.v_proj_weight, gen)
            if module.in_proj_bias is not None:
                module.in_proj_bias.zero_()
            _xavier(module.out_proj.weight, gen)
            if module.out_proj.bias is not None:
                module.out_proj.bias.zero_()
            covered.update(id(m) for m in module.modules())
        elif isinstance(module, nn.Linear):
            bound = 1.0 / math.sqrt(module.weight.shape[1])
            module.weight.uniform_(-bound, bound, generator=gen)
            if module.bias is not None:
                module.bias.uniform_(-bound, bound, generator=gen)
            covered.add(id(module))
        elif isinstance(module, nn.LayerNorm):
            if module.weight is not None:
                module.weight.fill_(1.0)
            if module.bias is not None:
                module.bias.zero_()
            covered.add(id(module))
        elif isinstance(module, nn.Embedding):
            module.weight.normal_(0.0, 0.02, generator=gen)
            covered.add(id(module))

    handled = set()
    for prefix, module in model.named_modules():
        if isinstance(module, (nn.MultiheadAttention, nn.Linear, nn.LayerNorm, nn.Embedding)):
            for pname, _ in module.named_parameters():
                handled.add(f"{prefix}.{pname}" if prefix else pname)
    for name, param in model.named_parameters():
        # Free-standing tensors: query banks, slot embeddings, and the like.
        if name not in handled:
            param.normal_(0.0, 0.02, generator=gen)


def parameter_checksum(model: nn.Module) -> str:
    """SHA-256 over the ordered float32 bytes of all parameters."""
    h = hashlib.sha256()
    for name, param in sorted(model.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(param.detach().cpu().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def group_indices_by_key(keys: list[int]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, key in enumerate(keys):
        groups.setdefault(key, []).append(idx)
    return groups


def minibatches(indices: list[int], batch_size: int, rng: np.random.Generator | None):
    """Yield shuffled minibatches of indices."""
    order = list(indices)
    if rng is not None:
        perm = rng.permutation(len(order))
        order = [order[i] for i in perm]
    for start in range(0, len(order), batch_size):
        yield order[start : start + batch_size]


def pad_stack(arrays: list[np.ndarray], dtype=np.float32):
    """Stack variable-length (F_i, V) arrays into (B, F_max, V) plus pad mask.

    Returns (batch tensor, lengths tensor, pad mask) where mask is True at
    padded positions.
    """
    lengths = [a.shape[0] for a in arrays]
    fmax = max(lengths)
    out = np.zeros((len(arrays), fmax, arrays[0].shape[1]), dtype=dtype)
    mask = np.ones((len(arrays), fmax), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = False
    return (
        torch.from_numpy(out),
        torch.tensor(lengths, dtype=torch.long),
        torch.from_numpy(mask),
    )
