"""Latent-space and attention diagnostics over trained models.

Everything here is read-only on the models: decoder attention maps, the
per-frame chunking score against the analytic slot layout, subspace-subset
ablation, latent occupancy accounting, and dynamics sweeps over lengths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus.grammar import TextDescriptor, TextEmbedder
from .corpus.motion import MotionSequence
from .diffusion import (
    X0_CLIP_DEFAULT,
    Denoiser,
    NoiseSchedule,
    denoise_predict,
    reverse_step_deterministic,
    sample,
)
from .errors import DomainError, ShapeError
from .evaluation import DynamicsStats, dynamics_stats
from .lavae import LatentCode, LaVae

# Published walking velocities (m/s) at 48/84/170-frame targets from the
# large-scale benchmark; length sweeps are compared against this trend
# directionally, never against the magnitudes.
REFERENCE_WALK_AVG_VEL = {48: 1.31, 84: 1.01, 170: 0.72}


@dataclass
class AttentionMap:
    """k x f_star cross-attention weights, columns normalized per frame."""

    weights: np.ndarray
    r: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError("attention map must be 2-D (k, f_star)")
        if (self.weights < 0).any():
            raise DomainError("attention weights must be nonnegative")
        cols = self.weights.sum(axis=0)
        if np.abs(cols - 1.0).max() > 1e-5:
            raise DomainError("attention map columns must sum to 1 within 1e-5")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def f_star(self) -> int:
        return self.weights.shape[1]


def attention_map(vae: LaVae, z: LatentCode, f_star: int) -> AttentionMap:
    """Decoder cross-attention averaged over layers and heads."""
    expected = vae.config.active_count(f_star)
    if z.k != expected:
        raise ShapeError(f"latent k={z.k} but f_star={f_star} needs k={expected}")
    vae.eval()
    with torch.no_grad():
        zt = torch.from_numpy(z.slots.astype(np.float32)).unsqueeze(0)
        _, captured = vae.decode_batch(
            zt, torch.tensor([f_star]), capture_attention=True
        )
    # captured: (layers, B=1, heads, f_star, k) -> mean over layers and heads.
    mean = captured[:, 0].mean(dim=(0, 1)).numpy().astype(np.float64)
    weights = mean.T  # (k, f_star)
    weights = weights / weights.sum(axis=0, keepdims=True)
    return AttentionMap(weights=weights, r=vae.config.r)


def chunking_score(amap: AttentionMap, r: int) -> float:
    """Fraction of frames whose argmax slot matches the analytic chunk layout.

    Argmax ties break to the lowest slot index.
    """
    if amap.k < 2:
        raise DomainError("chunking score needs at least 2 slots")
    dominant = np.argmax(amap.weights, axis=0)
    expected = np.minimum(np.arange(amap.f_star) // r, amap.k - 1)
    return float(np.mean(dominant == expected))


def sample_latent(
    text,
    f_star: int,
    vae: LaVae,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    embedder: TextEmbedder | None = None,
    x0_clip: float | None = X0_CLIP_DEFAULT,
) -> np.ndarray:
    """Run the deterministic-subsequence reverse process and return z_0."""
    if isinstance(text, str):
        text = TextDescriptor.from_text(text)
    embedder = embedder or TextEmbedder()
    emb = embedder.embed(text.text)
    k = vae.config.active_count(f_star)
    z = rng.standard_normal((k, vae.config.d_model))
    steps = list(schedule.inference_steps) + [0]
    for t_cur, t_next in zip(steps[:-1], steps[1:]):
        eps_hat = denoise_predict(LatentCode(z), t_cur, emb, denoiser)
        z = reverse_step_deterministic(z, eps_hat, schedule, t_cur, t_next, x0_clip)
    return z


def subspace_ablation(
    vae: LaVae,
    denoiser: Denoiser,
    text,
    f_star: int,
    active_set,
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    normalizer=None,
    embedder: TextEmbedder | None = None,
) -> MotionSequence:
    """Decode with only the 1-based slots in active_set; the rest are set to
    the prior mean (zero) after sampling, keeping the latent shape intact."""
    k = vae.config.active_count(f_star)
    active = set(int(i) for i in active_set)
    if not active:
        raise DomainError("active_set must be nonempty")
    if not active.issubset(set(range(1, k + 1))):
        raise DomainError(f"active_set {sorted(active)} outside 1..{k}")
    z = sample_latent(text, f_star, vae, denoiser, schedule, rng, embedder)
    for slot in range(1, k + 1):
        if slot not in active:
            z[slot - 1] = 0.0
    motion = vae.decode(LatentCode(z), f_star)
    if normalizer is not None:
        motion = normalizer.denormalize(motion)
    return motion


@dataclass
class SubspaceUsage:
    """Per-length activation histogram plus per-slot posterior-mean export."""

    histogram: dict = field(default_factory=dict)
    sample_ids: list = field(default_factory=list)
    slot_indices: list = field(default_factory=list)
    coordinates: np.ndarray | None = None

    @property
    def export_rows(self) -> int:
        return len(self.sample_ids)


def latent_occupancy(vae: LaVae, samples, normalizer) -> SubspaceUsage:
    """Encode every sample; histogram k per sample, export per-slot means.

    The histogram is exactly the analytic activation-count distribution of
    the corpus lengths; model weights only affect the exported coordinates.
    """
    histogram: dict[int, int] = {}
    sample_ids, slot_indices, rows = [], [], []
    for s in samples:
        k = vae.config.active_count(s.motion.num_frames)
        histogram[k] = histogram.get(k, 0) + 1
        post = vae.encode(normalizer.normalize(s.motion))
        for slot in range(post.k):
            sample_ids.append(s.sample_id)
            slot_indices.append(slot + 1)
            rows.append(post.mus[slot])
    return SubspaceUsage(
        histogram=dict(sorted(histogram.items())),
        sample_ids=sample_ids,
        slot_indices=slot_indices,
        coordinates=np.stack(rows) if rows else None,
    )


def length_sweep(
    vae: LaVae,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    normalizer,
    text,
    lengths,
    seed: int = 0,
    embedder: TextEmbedder | None = None,
) -> list[tuple[int, DynamicsStats]]:
    """Generate one motion per target length at fixed text and derived seeds."""
    rows = []
    for f_star in lengths:
        rng = np.random.default_rng([seed, int(f_star)])
        motion = sample(
            text,
            int(f_star),
            vae,
            denoiser,
            schedule,
            rng,
            embedder=embedder,
            normalizer=normalizer,
        )
        rows.append((int(f_star), dynamics_stats(motion)))
    return rows


# --- plain-text exports (numeric grids with a one-line header) ---


def export_attention_map(path, amap: AttentionMap) -> None:
    header = f"# k={amap.k} f_star={amap.f_star} r={amap.r}"
    body = "\n".join(" ".join(f"{w:.8e}" for w in row) for row in amap.weights)
    Path(path).write_text(header + "\n" + body + "\n")


def export_subspace_usage(path, usage: SubspaceUsage, r: int) -> None:
    dim = 0 if usage.coordinates is None else usage.coordinates.shape[1]
    lines = [f"# rows={usage.export_rows} dim={dim} r={r}"]
    lines.append(
        "# histogram " + " ".join(f"{k}:{n}" for k, n in usage.histogram.items())
    )
    for i in range(usage.export_rows):
        coords = " ".join(f"{v:.8e}" for v in usage.coordinates[i])
        lines.append(f"{usage.sample_ids[i]} {usage.slot_indices[i]} {coords}")
    Path(path).write_text("\n".join(lines) + "\n")
