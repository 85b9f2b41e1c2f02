"""Length-aware latent diffusion: schedule, denoiser, losses, and sampling.

The denoiser operates directly on the k x D latent stacks produced by the
frozen first-stage encoder.  Because k varies with the target length, the
initial noise of a generation is drawn with the same activation rate the
autoencoder uses, and training batches are grouped by k so no padding ever
enters the denoiser.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus.grammar import TextDescriptor, TextEmbedder, TEXT_EMBED_DIM
from .corpus.motion import DEFAULT_FPS, F_MIN, MotionSequence
from .errors import (
    ConfigError,
    DomainError,
    LengthError,
    NumericalError,
    ShapeError,
    TrainingDivergedError,
)
from .lavae import LatentCode, LaVae
from .nnutil import (
    group_indices_by_key,
    minibatches,
    seeded_init,
    timestep_embedding,
)

BETA_START = 1e-4
BETA_END = 2e-2


@dataclass
class NoiseSchedule:
    """Cumulative scaling factors for T forward steps plus the inference subsequence.

    alphas_bar has T+1 entries with alphas_bar[0] == 1; inference_steps is a
    strictly decreasing subsequence starting at T whose final step maps to 0.
    """

    alphas_bar: np.ndarray
    betas: np.ndarray
    inference_steps: tuple

    def __post_init__(self):
        self.alphas_bar = np.asarray(self.alphas_bar, dtype=np.float64)
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.alphas_bar[0] != 1.0:
            raise NumericalError("alphas_bar[0] must be exactly 1")
        if np.any(np.diff(self.alphas_bar) >= 0):
            raise NumericalError("alphas_bar must be strictly decreasing")
        if np.any(self.alphas_bar <= 0) or np.any(self.alphas_bar > 1):
            raise NumericalError("alphas_bar must lie in (0, 1]")
        steps = tuple(int(t) for t in self.inference_steps)
        if steps[0] != self.T:
            raise ConfigError("inference subsequence must start at T")
        if any(b >= a for a, b in zip(steps, steps[1:])):
            raise ConfigError("inference subsequence must be strictly decreasing")
        if steps[-1] < 1:
            raise ConfigError("inference subsequence must end at a step mapping to 0")
        self.inference_steps = steps

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        return float(self.alphas_bar[t])


def build_schedule(T: int, kind: str = "linear", inference_steps: int = 20) -> NoiseSchedule:
    """Construct the forward-noise schedule and its inference subsequence."""
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    if not 1 <= inference_steps <= T:
        raise DomainError(
            f"inference_steps must lie in [1, T]={T}, got {inference_steps}"
        )
    if kind == "linear":
        betas = np.linspace(BETA_START, BETA_END, T)
    elif kind == "cosine":
        s = 0.008
        grid = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((grid + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ConfigError(f"unknown schedule kind {kind!r}")
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    steps = np.unique(np.round(np.linspace(T, 1, inference_steps)).astype(int))[::-1]
    return NoiseSchedule(alphas_bar=alphas_bar, betas=betas, inference_steps=tuple(steps))


def forward_diffuse(
    z0: LatentCode, t: int, noise: LatentCode, schedule: NoiseSchedule
) -> LatentCode:
    """Marginal forward step: z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) noise."""
    if z0.slots.shape != noise.slots.shape:
        raise ShapeError(
            f"z0 {z0.slots.shape} and noise {noise.slots.shape} shapes differ"
        )
    if not 1 <= t <= schedule.T:
        raise DomainError(f"t={t} outside [1, {schedule.T}]")
    abar = schedule.alpha_bar(t)
    return LatentCode(np.sqrt(abar) * z0.slots + np.sqrt(1.0 - abar) * noise.slots)


@dataclass
class DenoiserConfig:
    d_model: int = 256
    layers: int = 9
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.0
    text_dim: int = TEXT_EMBED_DIM
    max_subspaces: int = 5

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1:
            raise ConfigError("denoiser needs at least one layer and one head")


class _DenoiserLayer(nn.Module):
    """Slot self-attention, single-token text cross-attention, FFN, and a
    scale-and-shift stylization driven by (timestep + text) conditioning."""

    def __init__(self, d_model, heads, ff_mult, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        # One text token: softmax over a single key degenerates to a linear
        # read of the text value, i.e. "linear" cross-attention.
        self.cross_attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.style = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, text_token, cond):
        h = self.norm1(x)
        attn, _ = self.self_attn(h, h, h, need_weights=False)
        x = x + self.dropout(attn)
        h = self.norm2(x)
        cross, _ = self.cross_attn(h, text_token, text_token, need_weights=False)
        x = x + self.dropout(cross)
        h = self.ffn(self.norm3(x))
        scale, shift = self.style(cond).unsqueeze(1).chunk(2, dim=-1)
        x = x + self.dropout(h * (1.0 + scale) + shift)
        return x


class Denoiser(nn.Module):
    """Noise-prediction network over k x D latent stacks, any k <= K."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d_model
        self.in_proj = nn.Linear(d, d)
        self.slot_embed = nn.Parameter(torch.zeros(config.max_subspaces, d))
        self.text_proj = nn.Linear(config.text_dim, d)
        self.time_mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, d))
        self.layers = nn.ModuleList(
            _DenoiserLayer(d, config.heads, config.ff_mult, config.dropout)
            for _ in range(config.layers)
        )
        # No final LayerNorm: epsilon prediction needs the per-draw noise
        # magnitude, which a normalization at the head would erase.
        self.out_proj = nn.Linear(d, d)
        seeded_init(self, seed)
        # Zero-init the output head: an untrained model predicts zero noise.
        with torch.no_grad():
            self.out_proj.weight.zero_()
            self.out_proj.bias.zero_()

    def forward(self, z_t, t, text_emb):
        """z_t: (B, k, D), t: (B,) integer steps, text_emb: (B, text_dim)."""
        if z_t.ndim != 3:
            raise ShapeError(f"z_t must be (B, k, D), got {tuple(z_t.shape)}")
        k = z_t.shape[1]
        if not 1 <= k <= self.config.max_subspaces:
            raise ShapeError(
                f"k={k} outside [1, {self.config.max_subspaces}] subspaces"
            )
        dtype = z_t.dtype
        t_emb = self.time_mlp(timestep_embedding(t, self.config.d_model).to(dtype))
        text_token = self.text_proj(text_emb.to(dtype)).unsqueeze(1)
        cond = t_emb + text_token.squeeze(1)
        x = self.in_proj(z_t) + self.slot_embed[:k].to(dtype).unsqueeze(0)
        for layer in self.layers:
            x = layer(x, text_token, cond)
        return self.out_proj(x)


@torch.no_grad()
def denoise_predict(
    z_t: LatentCode, t: int, text_emb: np.ndarray, model: Denoiser
) -> np.ndarray:
    """Single-item epsilon prediction; output shape equals input shape."""
    model.eval()
    z = torch.from_numpy(z_t.slots.astype(np.float32)).unsqueeze(0)
    emb = torch.from_numpy(np.asarray(text_emb, dtype=np.float32)).unsqueeze(0)
    out = model(z, torch.tensor([t]), emb)
    return out[0].cpu().numpy().astype(np.float64)


def noise_prediction_loss(model, z0, text_embs, t, eps, schedule):
    """Torch-pure epsilon objective on one same-k batch.

    z0, eps: (B, k, D); t: (B,) in [1, T].  Returns (sq_err_sum, n_coords)
    so callers can average across mixed-k groups.
    """
    abar = torch.as_tensor(
        schedule.alphas_bar[t.numpy() if isinstance(t, torch.Tensor) else t],
        dtype=z0.dtype,
    ).view(-1, 1, 1)
    z_t = torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * eps
    pred = model(z_t, torch.as_tensor(t, dtype=torch.long), text_embs)
    return ((pred - eps) ** 2).sum(), eps.numel()


def diffusion_loss(
    latents: list[np.ndarray],
    text_embs: list[np.ndarray],
    model: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> torch.Tensor:
    """Epsilon-prediction MSE over a mixed-k batch, grouped by k.

    t and epsilon are drawn per item from rng; the result is the mean squared
    error over every latent coordinate of every item.
    """
    if not latents:
        raise DomainError("empty batch")
    ks = [z.shape[0] for z in latents]
    ts = rng.integers(1, schedule.T + 1, size=len(latents))
    eps = [rng.standard_normal(z.shape) for z in latents]
    groups = group_indices_by_key(ks)
    total = None
    count = 0
    for k in sorted(groups):
        ids = groups[k]
        z0 = torch.from_numpy(np.stack([latents[i] for i in ids])).float()
        e = torch.from_numpy(np.stack([eps[i] for i in ids])).float()
        emb = torch.from_numpy(np.stack([text_embs[i] for i in ids])).float()
        t = torch.from_numpy(ts[ids])
        sq, n = noise_prediction_loss(model, z0, emb, t, e, schedule)
        total = sq if total is None else total + sq
        count += n
    loss = total / count
    if not torch.isfinite(loss):
        raise TrainingDivergedError("non-finite diffusion loss", batch_id=None)
    return loss


# --- sampling ---


# Reverse steps divide by sqrt(abar_t), which reaches ~158 at t=T: small
# epsilon errors there explode the implied clean-latent estimate unless it
# is clipped back to the training range.
X0_CLIP_DEFAULT = 5.0


def _ddim_step(z, eps_hat, abar_cur, abar_next, x0_clip=None):
    x0 = (z - np.sqrt(1.0 - abar_cur) * eps_hat) / np.sqrt(abar_cur)
    if x0_clip is not None:
        x0 = np.clip(x0, -x0_clip, x0_clip)
    return np.sqrt(abar_next) * x0 + np.sqrt(1.0 - abar_next) * eps_hat


def reverse_step_deterministic(z, eps_hat, schedule, t_cur, t_next, x0_clip=None):
    """One eta=0 update from t_cur to t_next using cumulative factors."""
    return _ddim_step(
        z, eps_hat, schedule.alpha_bar(t_cur), schedule.alpha_bar(t_next), x0_clip
    )


SAMPLER_KINDS = ("deterministic-subsequence", "ancestral")


def sample(
    text: TextDescriptor | str,
    f_star: int,
    vae: LaVae,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    sampler_kind: str = "deterministic-subsequence",
    embedder: TextEmbedder | None = None,
    normalizer=None,
    f_min: int = F_MIN,
    x0_clip: float | None = X0_CLIP_DEFAULT,
) -> MotionSequence:
    """Generate a motion of exactly f_star frames conditioned on text.

    The initial noise has the activation-rate shape ceil(f_star / r) x D.
    Deterministic given the rng state.  Returns the decoded motion in
    normalized space unless a normalizer is supplied.
    """
    if not f_min <= f_star <= vae.config.f_max:
        raise LengthError(f"f_star={f_star} outside [{f_min}, {vae.config.f_max}]")
    if sampler_kind not in SAMPLER_KINDS:
        raise ConfigError(f"sampler_kind must be one of {SAMPLER_KINDS}")
    if isinstance(text, str):
        text = TextDescriptor.from_text(text)
    embedder = embedder or TextEmbedder()
    emb = embedder.embed(text.text)

    k = vae.config.active_count(f_star)
    z = rng.standard_normal((k, vae.config.d_model))
    denoiser.eval()

    if sampler_kind == "deterministic-subsequence":
        steps = list(schedule.inference_steps) + [0]
        for t_cur, t_next in zip(steps[:-1], steps[1:]):
            eps_hat = denoise_predict(LatentCode(z), t_cur, emb, denoiser)
            z = reverse_step_deterministic(z, eps_hat, schedule, t_cur, t_next, x0_clip)
    else:
        for t in range(schedule.T, 0, -1):
            eps_hat = denoise_predict(LatentCode(z), t, emb, denoiser)
            abar_t = schedule.alpha_bar(t)
            abar_prev = schedule.alpha_bar(t - 1)
            beta_t = schedule.betas[t - 1]
            alpha_t = 1.0 - beta_t
            mean = (z - beta_t / np.sqrt(1.0 - abar_t) * eps_hat) / np.sqrt(alpha_t)
            if t > 1:
                var = beta_t * (1.0 - abar_prev) / (1.0 - abar_t)
                z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
            else:
                z = mean

    motion = vae.decode(LatentCode(z), f_star)
    if normalizer is not None:
        motion = normalizer.denormalize(motion)
    return motion


@torch.no_grad()
def sample_batch(
    texts,
    f_stars,
    vae: LaVae,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    sampler_kind: str = "deterministic-subsequence",
    embedder: TextEmbedder | None = None,
    normalizer=None,
    f_min: int = F_MIN,
    x0_clip: float | None = X0_CLIP_DEFAULT,
) -> list[MotionSequence]:
    """Batched generation grouped by activation count.

    All per-item noise is drawn in input order before any grouping, so the
    result is independent of how items land in sub-batches.
    """
    if sampler_kind not in SAMPLER_KINDS:
        raise ConfigError(f"sampler_kind must be one of {SAMPLER_KINDS}")
    embedder = embedder or TextEmbedder()
    d = vae.config.d_model
    ks = []
    for f_star in f_stars:
        if not f_min <= f_star <= vae.config.f_max:
            raise LengthError(f"f_star={f_star} outside [{f_min}, {vae.config.f_max}]")
        ks.append(vae.config.active_count(f_star))
    zs = [rng.standard_normal((k, d)) for k in ks]
    if sampler_kind == "ancestral":
        step_noise = [
            [rng.standard_normal((k, d)) for _ in range(schedule.T - 1)] for k in ks
        ]
    embs = [
        embedder.embed(t.text if isinstance(t, TextDescriptor) else t) for t in texts
    ]

    denoiser.eval()
    vae.eval()
    results: list[MotionSequence | None] = [None] * len(ks)
    for k, ids in group_indices_by_key(ks).items():
        z = torch.from_numpy(np.stack([zs[i] for i in ids])).float()
        emb = torch.from_numpy(np.stack([embs[i] for i in ids])).float()
        if sampler_kind == "deterministic-subsequence":
            steps = list(schedule.inference_steps) + [0]
            for t_cur, t_next in zip(steps[:-1], steps[1:]):
                t_batch = torch.full((len(ids),), t_cur, dtype=torch.long)
                eps_hat = denoiser(z, t_batch, emb)
                z = torch.from_numpy(
                    _ddim_step(
                        z.numpy().astype(np.float64),
                        eps_hat.numpy().astype(np.float64),
                        schedule.alpha_bar(t_cur),
                        schedule.alpha_bar(t_next),
                        x0_clip,
                    )
                ).float()
        else:
            for t in range(schedule.T, 0, -1):
                t_batch = torch.full((len(ids),), t, dtype=torch.long)
                eps_hat = denoiser(z, t_batch, emb).numpy().astype(np.float64)
                abar_t = schedule.alpha_bar(t)
                beta_t = schedule.betas[t - 1]
                mean = (
                    z.numpy().astype(np.float64)
                    - beta_t / np.sqrt(1.0 - abar_t) * eps_hat
                ) / np.sqrt(1.0 - beta_t)
                if t > 1:
                    var = beta_t * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - abar_t)
                    xi = np.stack([step_noise[i][schedule.T - t] for i in ids])
                    mean = mean + np.sqrt(var) * xi
                z = torch.from_numpy(mean).float()

        lengths = torch.tensor([f_stars[i] for i in ids], dtype=torch.long)
        fmax = int(lengths.max())
        pad_mask = torch.arange(fmax).unsqueeze(0) >= lengths.unsqueeze(1)
        out = vae.decode_batch(z, lengths, pad_mask)
        for row, i in enumerate(ids):
            data = out[row, : f_stars[i]].numpy().astype(np.float64)
            motion = MotionSequence(data, DEFAULT_FPS)
            if normalizer is not None:
                motion = normalizer.denormalize(motion)
            results[i] = motion
    return results


# --- stage-2 training ---


@dataclass
class DenoiserTrainSettings:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_min: float | None = None  # cosine-decay floor; None keeps lr flat


@dataclass
class DenoiserEpochLog:
    epoch: int
    loss: float
    seconds: float

    def line(self) -> str:
        return f"epoch={self.epoch} loss={self.loss:.6f} seconds={self.seconds:.2f}"


@torch.no_grad()
def encode_corpus_posteriors(vae, normalizer, samples):
    """Frozen-encoder posteriors (mu, logvar) for every sample, as numpy."""
    vae.eval()
    out = []
    for s in samples:
        post = vae.encode(normalizer.normalize(s.motion))
        out.append((post.mus, post.log_vars))
    return out


def train_denoiser(
    samples,
    normalizer,
    vae: LaVae,
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    settings: DenoiserTrainSettings,
    seed: int,
    embedder: TextEmbedder | None = None,
) -> tuple[Denoiser, list[DenoiserEpochLog]]:
    """Second-stage training against the frozen autoencoder.

    The VAE is never updated; posteriors are computed once and fresh latents
    are drawn from them each epoch.
    """
    train = [s for s in samples if s.split == "train"] or list(samples)
    if config.d_model != vae.config.d_model:
        raise ConfigError("denoiser and VAE must share d_model")
    if config.max_subspaces < vae.config.max_subspaces:
        raise ConfigError("denoiser subspace bank smaller than the VAE's")

    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)

    embedder = embedder or TextEmbedder()
    posteriors = encode_corpus_posteriors(vae, normalizer, train)
    text_embs = [embedder.embed(s.descriptor.text) for s in train]
    ks = [mus.shape[0] for mus, _ in posteriors]
    groups = group_indices_by_key(ks)

    model = Denoiser(config, seed=seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay
    )
    scheduler = None
    if settings.lr_min is not None:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=settings.epochs, eta_min=settings.lr_min
        )
    logs: list[DenoiserEpochLog] = []
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, epoch])
        model.train()
        loss_sum, batches = 0.0, 0
        for k in sorted(groups):
            for batch_ids in minibatches(groups[k], settings.batch_size, rng):
                z0s, embs = [], []
                for i in batch_ids:
                    mus, logvars = posteriors[i]
                    rho = rng.standard_normal(mus.shape)
                    scale = (
                        np.exp(0.5 * logvars)
                        if vae.config.std_reparam
                        else np.exp(logvars)
                    )
                    z0s.append(mus + scale * rho)
                    embs.append(text_embs[i])
                loss = diffusion_loss(z0s, embs, model, schedule, rng)
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += loss.item()
                batches += 1
        if scheduler is not None:
            scheduler.step()
        logs.append(
            DenoiserEpochLog(
                epoch=epoch, loss=loss_sum / batches, seconds=time.perf_counter() - t0
            )
        )
    return model, logs
