"""Length-aware variational autoencoder.

The latent space is a bank of K fixed D-dimensional subspaces.  A motion of
f frames activates the first k = ceil(f / r) of them: the encoder reads k
posterior slots from k learned query tokens, and the decoder cross-attends
f positional queries to exactly those k latent slots.  Queries beyond k
never enter the computation, so short sequences are encoded, regularized
and decoded entirely inside the low-order subspaces.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus.motion import DEFAULT_FPS, F_MAX, MotionSequence, POSE_DIM
from .corpus.normalize import Normalizer
from .errors import DomainError, LengthError, ShapeError, TrainingDivergedError
from .nnutil import (
    group_indices_by_key,
    minibatches,
    pad_stack,
    parameter_count,
    seeded_init,
    sinusoidal_table,
)

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0


def activation_count(f: int, r: int, max_subspaces: int | None = None) -> int:
    """Number of active latent subspaces for an f-frame motion: ceil(f/r)."""
    if f <= 0:
        raise DomainError(f"frame count must be positive, got {f}")
    if r <= 0:
        raise DomainError(f"frames-per-subspace must be positive, got {r}")
    k = -(-f // r)
    if max_subspaces is not None:
        k = min(k, max_subspaces)
    return max(1, k)


@dataclass
class LaVaeConfig:
    r: int = 48
    f_max: int = F_MAX
    pose_dim: int = POSE_DIM
    d_model: int = 256
    layers: int = 9
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.0
    dvae_fraction: float = 0.33
    dvae_std: float = 0.1
    dvae_target: str = "input"  # "input" perturbs frames, "latent" perturbs z
    kl_weight: float = 1e-4
    length_aware: bool = True
    std_reparam: bool = False  # False: z = mu + sigma^2 * rho (default form)

    def __post_init__(self):
        if self.r < 1:
            raise DomainError(f"r must be >= 1, got {self.r}")
        if self.f_max < 1:
            raise DomainError("f_max must be >= 1")
        if not 0.0 <= self.dvae_fraction <= 1.0:
            raise DomainError("dvae_fraction must lie in [0, 1]")
        if self.dvae_std < 0.0:
            raise DomainError("dvae_std must be nonnegative")
        if self.dvae_target not in ("input", "latent"):
            raise DomainError(f"dvae_target must be input|latent, got {self.dvae_target}")

    @property
    def max_subspaces(self) -> int:
        return activation_count(self.f_max, self.r)

    def active_count(self, f: int) -> int:
        """Subspace count used by the model: the activation rate, or the full
        bank when length-awareness is ablated."""
        if f > self.f_max:
            raise LengthError(f"f={f} exceeds f_max={self.f_max}")
        if not self.length_aware:
            return self.max_subspaces
        return activation_count(f, self.r, self.max_subspaces)


@dataclass
class LatentCode:
    """Variable-length stack of k D-dimensional subspace vectors."""

    slots: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.float64)
        if self.slots.ndim != 2:
            raise ShapeError(f"latent slots must be (k, D), got {self.slots.shape}")
        if self.slots.shape[0] < 1:
            raise ShapeError("latent code needs at least one slot")
        if not np.all(np.isfinite(self.slots)):
            raise DomainError("latent code contains non-finite entries")

    @property
    def k(self) -> int:
        return self.slots.shape[0]

    @property
    def dim(self) -> int:
        return self.slots.shape[1]


@dataclass
class SubspacePosterior:
    """Diagonal-Gaussian posterior over the k active subspaces.

    Finite log-variances are clamped to [-30, 20] before exponentiation;
    -inf passes through as an exact zero variance.
    """

    mus: np.ndarray
    log_vars: np.ndarray

    def __post_init__(self):
        self.mus = np.asarray(self.mus, dtype=np.float64)
        self.log_vars = np.asarray(self.log_vars, dtype=np.float64)
        if self.mus.shape != self.log_vars.shape or self.mus.ndim != 2:
            raise ShapeError("posterior mus/log_vars must share a (k, D) shape")
        self.log_vars = np.where(
            np.isneginf(self.log_vars),
            self.log_vars,
            np.clip(self.log_vars, LOGVAR_MIN, LOGVAR_MAX),
        )

    @property
    def k(self) -> int:
        return self.mus.shape[0]

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_vars)


def reparameterize(
    posterior: SubspacePosterior, rng: np.random.Generator, std_reparam: bool = False
) -> LatentCode:
    """Sample z slot-wise: mu_i + sigma_i^2 * rho_i, rho_i ~ N(0, I).

    The variance (not standard deviation) multiplies the noise by default;
    std_reparam=True switches to the conventional sigma * rho form.
    """
    rho = rng.standard_normal(posterior.mus.shape)
    scale = np.sqrt(posterior.variances) if std_reparam else posterior.variances
    return LatentCode(posterior.mus + scale * rho)


def kl_divergence(posterior: SubspacePosterior) -> float:
    """Closed-form KL(q || N(0,I)) summed over active slots and dimensions."""
    var = posterior.variances
    lv = np.where(np.isneginf(posterior.log_vars), LOGVAR_MIN, posterior.log_vars)
    return float(0.5 * np.sum(posterior.mus**2 + var - lv - 1.0))


class _DecoderLayer(nn.Module):
    """Pre-LN block: frame self-attention, cross-attention to latent slots, FFN."""

    def __init__(self, d_model, heads, ff_mult, dropout):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.self_attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(d_model)
        self.cross_attn = nn.MultiheadAttention(d_model, heads, dropout=dropout, batch_first=True)
        self.norm3 = nn.LayerNorm(d_model)
        self.ffn = nn.Sequential(
            nn.Linear(d_model, ff_mult * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(ff_mult * d_model, d_model),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, memory, tgt_pad_mask=None, capture=None):
        h = self.norm1(x)
        attn_out, _ = self.self_attn(
            h, h, h, key_padding_mask=tgt_pad_mask, need_weights=False
        )
        x = x + self.dropout(attn_out)
        h = self.norm2(x)
        cross_out, weights = self.cross_attn(
            h,
            memory,
            memory,
            need_weights=capture is not None,
            average_attn_weights=False,
        )
        if capture is not None:
            capture.append(weights)
        x = x + self.dropout(cross_out)
        x = x + self.dropout(self.ffn(self.norm3(x)))
        return x


class LaVae(nn.Module):
    """Transformer encoder/decoder pair over the subspace latent bank."""

    def __init__(self, config: LaVaeConfig, seed: int = 0):
        super().__init__()
        self.config = config
        d, K = config.d_model, config.max_subspaces

        self.input_proj = nn.Linear(config.pose_dim, d)
        self.query_bank = nn.Parameter(torch.zeros(K, d))
        enc_layer = nn.TransformerEncoderLayer(
            d_model=d,
            nhead=config.heads,
            dim_feedforward=config.ff_mult * d,
            dropout=config.dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, config.layers, norm=nn.LayerNorm(d), enable_nested_tensor=False
        )
        self.head_mu = nn.Linear(d, d)
        self.head_logvar = nn.Linear(d, d)

        self.slot_embed = nn.Parameter(torch.zeros(K, d))
        self.dec_layers = nn.ModuleList(
            _DecoderLayer(d, config.heads, config.ff_mult, config.dropout)
            for _ in range(config.layers)
        )
        self.dec_norm = nn.LayerNorm(d)
        self.output_proj = nn.Linear(d, config.pose_dim)

        self.register_buffer("pos_table", sinusoidal_table(config.f_max, d), persistent=False)
        seeded_init(self, seed)
        # Start with a tight posterior so early reconstructions are not
        # drowned by reparameterization noise.
        with torch.no_grad():
            self.head_logvar.bias.fill_(-6.0)

    # --- batched internals (same-k batches) ---

    def encode_batch(self, x, lengths, k, pad_mask=None):
        """x: (B, F, V) padded same-k batch -> (mu, logvar) of shape (B, k, D)."""
        B = x.shape[0]
        frames = self.input_proj(x) + self.pos_table[: x.shape[1]].to(x.dtype)
        queries = self.query_bank[:k].to(x.dtype).unsqueeze(0).expand(B, -1, -1)
        tokens = torch.cat([queries, frames], dim=1)
        if pad_mask is not None:
            full_mask = torch.cat(
                [torch.zeros(B, k, dtype=torch.bool, device=x.device), pad_mask], dim=1
            )
        else:
            full_mask = None
        out = self.encoder(tokens, src_key_padding_mask=full_mask)
        slots = out[:, :k]
        mu = self.head_mu(slots)
        logvar = self.head_logvar(slots).clamp(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def decode_batch(self, z, lengths, pad_mask=None, capture_attention=False):
        """z: (B, k, D) -> (B, F_max_batch, V); output depends only on z's k slots."""
        B, k, d = z.shape
        f_star = int(lengths.max())
        memory = z + self.slot_embed[:k].to(z.dtype).unsqueeze(0)
        queries = self.pos_table[:f_star].to(z.dtype).unsqueeze(0).expand(B, -1, -1)
        captures = [] if capture_attention else None
        x = queries
        for layer in self.dec_layers:
            x = layer(x, memory, tgt_pad_mask=pad_mask, capture=captures)
        x = self.output_proj(self.dec_norm(x))
        if capture_attention:
            # (layers, B, heads, f_star, k) stacked capture
            return x, torch.stack(captures)
        return x

    # --- single-motion public ops (numpy in, numpy out) ---

    @torch.no_grad()
    def encode(self, motion: MotionSequence) -> SubspacePosterior:
        """Posterior with exactly k = activation slots for this motion length."""
        f = motion.num_frames
        if f > self.config.f_max:
            raise LengthError(f"motion has {f} frames, model supports <= {self.config.f_max}")
        k = self.config.active_count(f)
        self.eval()
        x = torch.from_numpy(motion.data.astype(np.float32)).unsqueeze(0)
        mu, logvar = self.encode_batch(x, torch.tensor([f]), k)
        return SubspacePosterior(
            mus=mu[0].cpu().numpy().astype(np.float64),
            log_vars=logvar[0].cpu().numpy().astype(np.float64),
        )

    @torch.no_grad()
    def decode(self, z: LatentCode, f_star: int, fps: int | None = None) -> MotionSequence:
        """Decode exactly f_star frames; k must equal the activation count."""
        if f_star < 1 or f_star > self.config.f_max:
            raise LengthError(f"f_star={f_star} outside [1, {self.config.f_max}]")
        expected = self.config.active_count(f_star)
        if z.k != expected:
            raise ShapeError(
                f"latent has k={z.k} slots but f_star={f_star} requires k={expected}"
            )
        if z.dim != self.config.d_model:
            raise ShapeError(f"latent dim {z.dim} != model dim {self.config.d_model}")
        self.eval()
        zt = torch.from_numpy(z.slots.astype(np.float32)).unsqueeze(0)
        out = self.decode_batch(zt, torch.tensor([f_star]))
        return MotionSequence(
            out[0].cpu().numpy().astype(np.float64), fps or DEFAULT_FPS
        )

    def parameter_total(self) -> int:
        return parameter_count(self)


def perturb_frames(
    motion: MotionSequence, fraction: float, std: float, rng: np.random.Generator
) -> MotionSequence:
    """Additive Gaussian noise on floor(fraction * F) uniformly chosen frames."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"fraction must lie in [0, 1], got {fraction}")
    if std < 0.0:
        raise DomainError("std must be nonnegative")
    F = motion.num_frames
    count = int(math.floor(fraction * F))
    out = motion.data.copy()
    if count > 0 and std > 0.0:
        idx = rng.choice(F, size=count, replace=False)
        out[idx] += std * rng.standard_normal((count, motion.pose_dim))
    elif count > 0:
        # Draw anyway so the rng stream does not depend on std.
        rng.choice(F, size=count, replace=False)
        rng.standard_normal((count, motion.pose_dim))
    return MotionSequence(out, motion.fps)


def vae_loss(
    motion_clean: MotionSequence,
    motion_reconstructed: MotionSequence,
    posterior: SubspacePosterior,
    kl_weight: float,
) -> tuple[float, float, float]:
    """(total, recon, kl): MSE against the clean target plus weighted slot KL."""
    if motion_clean.data.shape != motion_reconstructed.data.shape:
        raise ShapeError(
            f"clean {motion_clean.data.shape} vs reconstructed "
            f"{motion_reconstructed.data.shape}"
        )
    recon = float(np.mean((motion_clean.data - motion_reconstructed.data) ** 2))
    kl = kl_divergence(posterior)
    return recon + kl_weight * kl, recon, kl


# --- training ---


@dataclass
class TrainSettings:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-2
    lr_min: float | None = None  # cosine-decay floor; None keeps lr flat
    max_steps: int | None = None


@dataclass
class EpochLog:
    epoch: int
    recon: float
    kl: float
    total: float
    seconds: float

    def line(self) -> str:
        return (
            f"epoch={self.epoch} recon={self.recon:.6f} kl={self.kl:.6f} "
            f"total={self.total:.6f} seconds={self.seconds:.2f}"
        )


def _masked_mse(pred, target, pad_mask):
    valid = (~pad_mask).unsqueeze(-1).to(pred.dtype)
    diff = (pred - target) ** 2 * valid
    return diff.sum() / (valid.sum() * pred.shape[-1])


def _kl_batch(mu, logvar):
    # Sum over slots and dims, mean over the batch.
    term = mu.pow(2) + logvar.exp() - logvar - 1.0
    return 0.5 * term.sum(dim=(1, 2)).mean()


def _perturb_batch(x, pad_mask, fraction, std, gen):
    """Torch twin of perturb_frames for padded same-k batches."""
    if fraction <= 0.0 or std <= 0.0:
        return x
    out = x.clone()
    B = x.shape[0]
    for i in range(B):
        F = int((~pad_mask[i]).sum())
        count = int(math.floor(fraction * F))
        if count == 0:
            continue
        idx = torch.randperm(F, generator=gen)[:count]
        noise = std * torch.randn(count, x.shape[2], generator=gen, dtype=x.dtype)
        out[i, idx] += noise
    return out


def vae_training_step(model, batch_x, lengths, pad_mask, k, gen, perturb=True):
    """One DVAE-augmented forward: returns (total, recon, kl) tensors."""
    cfg = model.config
    clean = batch_x
    noisy = (
        _perturb_batch(batch_x, pad_mask, cfg.dvae_fraction, cfg.dvae_std, gen)
        if (perturb and cfg.dvae_target == "input")
        else batch_x
    )
    mu, logvar = model.encode_batch(noisy, lengths, k, pad_mask)
    rho = torch.randn(mu.shape, generator=gen, dtype=mu.dtype)
    scale = logvar.exp().sqrt() if cfg.std_reparam else logvar.exp()
    z = mu + scale * rho
    if perturb and cfg.dvae_target == "latent" and cfg.dvae_std > 0.0:
        z = z + cfg.dvae_std * torch.randn(z.shape, generator=gen, dtype=z.dtype)
    recon = model.decode_batch(z, lengths, pad_mask)
    recon_loss = _masked_mse(recon, clean, pad_mask)
    kl = _kl_batch(mu, logvar)
    total = recon_loss + cfg.kl_weight * kl
    return total, recon_loss, kl


def train_vae(
    samples,
    normalizer: Normalizer,
    config: LaVaeConfig,
    settings: TrainSettings,
    seed: int,
) -> tuple[LaVae, list[EpochLog]]:
    """First-stage training loop over the train split of a corpus.

    Deterministic in (samples, config, settings, seed).  Raises
    TrainingDivergedError with the offending batch id on non-finite loss.
    """
    train = [s for s in samples if s.split == "train"] or list(samples)
    if not train:
        raise DomainError("no training samples")

    model = LaVae(config, seed=seed)
    data = [normalizer.normalize_array(s.motion.data).astype(np.float32) for s in train]
    ks = [config.active_count(d.shape[0]) for d in data]
    groups = group_indices_by_key(ks)

    opt = torch.optim.AdamW(
        model.parameters(), lr=settings.lr, weight_decay=settings.weight_decay
    )
    scheduler = None
    if settings.lr_min is not None:
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=settings.epochs, eta_min=settings.lr_min
        )
    gen = torch.Generator().manual_seed(seed + 1)
    logs: list[EpochLog] = []
    step = 0
    for epoch in range(settings.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, epoch])
        model.train()
        sums = np.zeros(3)
        batches = 0
        for k in sorted(groups):
            for batch_ids in minibatches(groups[k], settings.batch_size, rng):
                x, lengths, pad_mask = pad_stack([data[i] for i in batch_ids])
                total, recon, kl = vae_training_step(model, x, lengths, pad_mask, k, gen)
                if not torch.isfinite(total):
                    raise TrainingDivergedError(
                        f"non-finite VAE loss at epoch {epoch}, batch ids {batch_ids}",
                        batch_id=batch_ids[0],
                    )
                opt.zero_grad()
                total.backward()
                opt.step()
                sums += [recon.item(), kl.item(), total.item()]
                batches += 1
                step += 1
                if settings.max_steps is not None and step >= settings.max_steps:
                    break
            else:
                continue
            break
        if scheduler is not None:
            scheduler.step()
        logs.append(
            EpochLog(
                epoch=epoch,
                recon=sums[0] / batches,
                kl=sums[1] / batches,
                total=sums[2] / batches,
                seconds=time.perf_counter() - t0,
            )
        )
        if settings.max_steps is not None and step >= settings.max_steps:
            break
    return model, logs
