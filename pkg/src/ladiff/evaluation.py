"""Metric suite over a learned text/motion co-embedding.

R-precision, MM-Dist, FID, Diversity and MModality are computed in the
feature space of a contrastively trained extractor pair; a validation
margin gate refuses to evaluate with extractors that never learned the
pairing.  Joint-dynamics statistics operate on raw motions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .corpus.grammar import TextEmbedder, vocabulary
from .corpus.motion import MotionSequence
from .errors import (
    DomainError,
    ExtractorQualityError,
    InsufficientDataError,
    NumericalError,
    ShapeError,
)
from .nnutil import minibatches, pad_stack, seeded_init, sinusoidal_table

FEATURE_DIM = 128

# Published large-scale benchmark numbers, kept for orientation only: the
# real-data retrieval accuracy those extractors reach is far out of desk
# scale and is never asserted here.
REFERENCE_REAL_R_PRECISION = (0.511, 0.703, 0.797)


# --- feature extractors ---


class MotionFeatureExtractor(nn.Module):
    """Small transformer over normalized pose frames, masked mean-pooled."""

    def __init__(self, pose_dim, feature_dim=FEATURE_DIM, layers=2, heads=4, max_frames=512):
        super().__init__()
        self.input_proj = nn.Linear(pose_dim, feature_dim)
        enc_layer = nn.TransformerEncoderLayer(
            d_model=feature_dim,
            nhead=heads,
            dim_feedforward=4 * feature_dim,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            enc_layer, layers, norm=nn.LayerNorm(feature_dim), enable_nested_tensor=False
        )
        self.head = nn.Linear(feature_dim, feature_dim)
        self.register_buffer("pos_table", sinusoidal_table(max_frames, feature_dim), persistent=False)

    def forward(self, x, pad_mask):
        h = self.input_proj(x) + self.pos_table[: x.shape[1]].to(x.dtype)
        h = self.encoder(h, src_key_padding_mask=pad_mask)
        valid = (~pad_mask).unsqueeze(-1).to(h.dtype)
        pooled = (h * valid).sum(dim=1) / valid.sum(dim=1)
        feats = self.head(pooled)
        return feats / feats.norm(dim=-1, keepdim=True).clamp_min(1e-12)


class TextFeatureExtractor(nn.Module):
    """Token-average text encoder over the closed grammar vocabulary."""

    def __init__(self, feature_dim=FEATURE_DIM):
        super().__init__()
        self.vocab = {w: i for i, w in enumerate(vocabulary())}
        self.embedding = nn.Embedding(len(self.vocab), feature_dim)
        self.head = nn.Sequential(
            nn.Linear(feature_dim, feature_dim), nn.GELU(), nn.Linear(feature_dim, feature_dim)
        )

    def token_ids(self, text: str) -> list[int]:
        try:
            return [self.vocab[w] for w in text.split()]
        except KeyError as exc:
            raise ShapeError(f"text token {exc} outside the grammar vocabulary") from exc

    def forward(self, texts: list[str]):
        pooled = torch.stack(
            [self.embedding(torch.tensor(self.token_ids(t))).mean(dim=0) for t in texts]
        )
        feats = self.head(pooled)
        return feats / feats.norm(dim=-1, keepdim=True).clamp_min(1e-12)


@dataclass
class FeatureExtractorPair:
    motion: MotionFeatureExtractor
    text: TextFeatureExtractor
    feature_dim: int = FEATURE_DIM
    validated: bool = False

    @torch.no_grad()
    def motion_features(self, normalized_motions: list[np.ndarray]) -> np.ndarray:
        """(N, D_f) features for a list of normalized (F, V) arrays."""
        self.motion.eval()
        feats = []
        for start in range(0, len(normalized_motions), 64):
            chunk = normalized_motions[start : start + 64]
            x, _, pad_mask = pad_stack([a.astype(np.float32) for a in chunk])
            feats.append(self.motion(x, pad_mask).numpy())
        return np.concatenate(feats, axis=0).astype(np.float64)

    @torch.no_grad()
    def text_features(self, texts: list[str]) -> np.ndarray:
        self.text.eval()
        return self.text(texts).numpy().astype(np.float64)


@dataclass
class ExtractorTrainSettings:
    steps: int = 600
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    temperature: float = 0.07
    margin: float = 0.2


def contrastive_margin(pair: FeatureExtractorPair, motions, texts) -> float:
    """Matched-pair cosine minus mean mismatched cosine."""
    mf = pair.motion_features(motions)
    tf = pair.text_features(texts)
    sim = tf @ mf.T
    n = sim.shape[0]
    matched = float(np.mean(np.diag(sim)))
    off = (sim.sum() - np.trace(sim)) / (n * (n - 1))
    return matched - float(off)


def train_extractors(
    samples, normalizer, settings: ExtractorTrainSettings | None = None, seed: int = 0
) -> FeatureExtractorPair:
    """Symmetric InfoNCE over matched (motion, text) pairs.

    Raises ExtractorQualityError if the validation margin gate is missed, so
    downstream evaluation never runs on unvalidated extractors.
    """
    settings = settings or ExtractorTrainSettings()
    train = [s for s in samples if s.split == "train"] or list(samples)
    val = [s for s in samples if s.split == "val"] or train

    pose_dim = train[0].motion.pose_dim
    pair = FeatureExtractorPair(
        motion=MotionFeatureExtractor(pose_dim), text=TextFeatureExtractor()
    )
    seeded_init(pair.motion, seed)
    seeded_init(pair.text, seed + 1)

    data = [normalizer.normalize_array(s.motion.data).astype(np.float32) for s in train]
    texts = [s.descriptor.text for s in train]

    params = list(pair.motion.parameters()) + list(pair.text.parameters())
    opt = torch.optim.AdamW(params, lr=settings.lr, weight_decay=settings.weight_decay)
    rng = np.random.default_rng([seed, 0])
    pair.motion.train()
    pair.text.train()
    step = 0
    while step < settings.steps:
        for batch_ids in minibatches(list(range(len(data))), settings.batch_size, rng):
            if len(batch_ids) < 2:
                continue
            x, _, pad_mask = pad_stack([data[i] for i in batch_ids])
            mf = pair.motion(x, pad_mask)
            tf = pair.text([texts[i] for i in batch_ids])
            logits = tf @ mf.T / settings.temperature
            labels = torch.arange(len(batch_ids))
            loss = 0.5 * (
                nn.functional.cross_entropy(logits, labels)
                + nn.functional.cross_entropy(logits.T, labels)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            if step >= settings.steps:
                break

    val_motions = [normalizer.normalize_array(s.motion.data) for s in val]
    val_texts = [s.descriptor.text for s in val]
    margin = contrastive_margin(pair, val_motions, val_texts)
    if margin < settings.margin:
        raise ExtractorQualityError(
            f"extractor margin {margin:.3f} below the {settings.margin} gate; "
            "refusing to evaluate with unvalidated extractors"
        )
    pair.validated = True
    return pair


# --- metrics on feature arrays ---


def r_precision(
    motion_feats: np.ndarray,
    text_feats: np.ndarray,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
) -> tuple[float, float, float]:
    """Top-1/2/3 retrieval accuracy among batch_size-1 mismatched motions."""
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    n = motion_feats.shape[0]
    if text_feats.shape[0] != n:
        raise ShapeError("motion/text feature counts differ")
    if n < batch_size:
        raise InsufficientDataError(
            f"need at least {batch_size} pairs for R-precision, got {n}"
        )
    order = rng.permutation(n) if rng is not None else np.arange(n)
    tops = np.zeros(3)
    used = 0
    for start in range(0, n - batch_size + 1, batch_size):
        ids = order[start : start + batch_size]
        m = motion_feats[ids]
        t = text_feats[ids]
        dists = np.linalg.norm(t[:, None, :] - m[None, :, :], axis=-1)
        ranks = np.argsort(dists, axis=1)
        true_rank = np.argmax(ranks == np.arange(batch_size)[:, None], axis=1)
        for j, top in enumerate((1, 2, 3)):
            tops[j] += np.sum(true_rank < top)
        used += batch_size
    top1, top2, top3 = tops / used
    return float(top1), float(top2), float(top3)


def mm_dist(motion_feats: np.ndarray, text_feats: np.ndarray) -> float:
    """Mean Euclidean distance over matched (motion, text) pairs."""
    motion_feats = np.asarray(motion_feats, dtype=np.float64)
    text_feats = np.asarray(text_feats, dtype=np.float64)
    if motion_feats.shape != text_feats.shape:
        raise ShapeError("matched feature arrays must share a shape")
    if motion_feats.shape[0] == 0:
        raise DomainError("mm_dist of empty input")
    return float(np.mean(np.linalg.norm(motion_feats - text_feats, axis=-1)))


def _sym_sqrt_eigvals(mat: np.ndarray, tol: float = -1e-6) -> np.ndarray:
    vals = np.linalg.eigvalsh(mat)
    if vals.min() < tol:
        cond = abs(vals.max()) / max(abs(vals.min()), 1e-300)
        raise NumericalError(
            f"matrix square root failed: eigenvalue {vals.min():.3e} below "
            f"tolerance {tol:.0e} (condition ratio {cond:.3e})"
        )
    return np.clip(vals, 0.0, None)


def fid(feats_real: np.ndarray, feats_gen: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets.

    Uses the symmetric form tr((S_r^{1/2} S_g S_r^{1/2})^{1/2}); small
    negative eigenvalues above -1e-6 are clipped to zero.
    """
    a = np.asarray(feats_real, dtype=np.float64)
    b = np.asarray(feats_gen, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("feature sets must be (N, D) with a common D")
    d = a.shape[1]
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.cov(a, rowvar=False)
    cov_b = np.cov(b, rowvar=False)
    # Shrinkage for rankable covariances when counts do not exceed D.
    if a.shape[0] <= d:
        cov_a = cov_a + 1e-6 * np.eye(d)
    if b.shape[0] <= d:
        cov_b = cov_b + 1e-6 * np.eye(d)

    vals_a = _sym_sqrt_eigvals(cov_a)
    vecs = np.linalg.eigh(cov_a)[1]
    root_a = (vecs * np.sqrt(vals_a)) @ vecs.T
    inner = root_a @ cov_b @ root_a
    inner = 0.5 * (inner + inner.T)
    cross_vals = _sym_sqrt_eigvals(inner)
    mean_term = float(np.sum((mu_a - mu_b) ** 2))
    trace_term = float(np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sum(np.sqrt(cross_vals)))
    return mean_term + trace_term


def diversity(feats: np.ndarray, subset_size: int, rng: np.random.Generator) -> float:
    """Mean distance between two disjoint index-paired subsets of the features."""
    feats = np.asarray(feats, dtype=np.float64)
    n = feats.shape[0]
    if n < 2 * subset_size:
        raise InsufficientDataError(
            f"diversity needs {2 * subset_size} samples for two disjoint subsets, got {n}"
        )
    idx = rng.choice(n, size=2 * subset_size, replace=False)
    a, b = feats[idx[:subset_size]], feats[idx[subset_size:]]
    return float(np.mean(np.linalg.norm(a - b, axis=-1)))


def mmodality(
    per_text_feats: list[np.ndarray],
    num_texts: int,
    subset_size: int,
    rng: np.random.Generator,
) -> float:
    """Within-text diversity averaged over num_texts sampled text groups."""
    if len(per_text_feats) < num_texts:
        raise InsufficientDataError(
            f"mmodality needs {num_texts} text groups, got {len(per_text_feats)}"
        )
    chosen = rng.choice(len(per_text_feats), size=num_texts, replace=False)
    values = [diversity(per_text_feats[i], subset_size, rng) for i in chosen]
    return float(np.mean(values))


# --- joint dynamics ---


@dataclass
class DynamicsStats:
    avg_vel: float
    avg_acc: float
    max_acc: float


def dynamics_stats(motion: MotionSequence) -> DynamicsStats:
    """Per-joint speed/acceleration magnitudes from position finite differences."""
    if motion.num_frames < 3:
        raise InsufficientDataError("dynamics need at least 3 frames")
    pos = motion.absolute_positions()
    fps = motion.fps
    vel = np.linalg.norm(np.diff(pos, axis=0), axis=-1) * fps
    acc_vec = (pos[2:] - 2 * pos[1:-1] + pos[:-2]) * fps * fps
    acc = np.linalg.norm(acc_vec, axis=-1)
    return DynamicsStats(
        avg_vel=float(vel.mean()), avg_acc=float(acc.mean()), max_acc=float(acc.max())
    )


# --- aggregated evaluation ---


@dataclass
class EvalConfig:
    replicates: int = 20
    rp_batch: int = 32
    diversity_subset: int = 50
    mmodality_texts: int = 20
    mmodality_subset: int = 5


METRIC_KEYS = (
    "r_precision_top1",
    "r_precision_top2",
    "r_precision_top3",
    "fid",
    "mm_dist",
    "diversity",
    "mmodality",
)


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    ci95: dict = field(default_factory=dict)
    replicates: int = 0

    def __post_init__(self):
        for key in METRIC_KEYS:
            if key in self.values and not np.isfinite(self.values[key]):
                raise DomainError(f"non-finite metric {key}")
        t1, t2, t3 = (
            self.values.get("r_precision_top1"),
            self.values.get("r_precision_top2"),
            self.values.get("r_precision_top3"),
        )
        if t1 is not None and not (t1 <= t2 + 1e-12 and t2 <= t3 + 1e-12):
            raise DomainError("R-precision tops must be non-decreasing")

    def to_text(self) -> str:
        lines = [f"replicates = {self.replicates}"]
        for key in METRIC_KEYS:
            if key in self.values:
                lines.append(f"{key} = {self.values[key]:.6f}")
                ci = self.ci95.get(key)
                lines.append(f"{key}_ci95 = {'n/a' if ci is None else f'{ci:.6f}'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values, ci95, replicates = {}, {}, 0
        for line in text.strip().splitlines():
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if key == "replicates":
                replicates = int(raw)
            elif key.endswith("_ci95"):
                ci95[key[: -len("_ci95")]] = None if raw == "n/a" else float(raw)
            else:
                values[key] = float(raw)
        return cls(values=values, ci95=ci95, replicates=replicates)


def compute_replicate_metrics(
    real_feats, gen_feats, text_feats, per_text_gen_feats, config: EvalConfig, rng
) -> dict:
    top1, top2, top3 = r_precision(gen_feats, text_feats, config.rp_batch, rng)
    return {
        "r_precision_top1": top1,
        "r_precision_top2": top2,
        "r_precision_top3": top3,
        "fid": fid(real_feats, gen_feats),
        "mm_dist": mm_dist(gen_feats, text_feats),
        "diversity": diversity(gen_feats, config.diversity_subset, rng),
        "mmodality": mmodality(
            per_text_gen_feats, config.mmodality_texts, config.mmodality_subset, rng
        ),
    }


def aggregate_replicates(rows: list[dict], replicates: int) -> MetricReport:
    values, ci95 = {}, {}
    for key in METRIC_KEYS:
        series = np.array([row[key] for row in rows], dtype=np.float64)
        values[key] = float(series.mean())
        if replicates > 1:
            ci95[key] = float(1.96 * series.std(ddof=1) / np.sqrt(replicates))
        else:
            ci95[key] = None
    return MetricReport(values=values, ci95=ci95, replicates=replicates)


def evaluate(
    generate_fn,
    test_samples,
    normalizer,
    extractors: FeatureExtractorPair,
    config: EvalConfig | None = None,
    seed: int = 0,
) -> MetricReport:
    """Full metric suite over replicated generations.

    generate_fn(texts, f_stars, rng) must return normalized-space motions for
    the given conditioning; ground-truth target lengths are used throughout.
    Deterministic in (inputs, seed): each replicate gets a derived rng.
    """
    config = config or EvalConfig()
    if not extractors.validated:
        raise ExtractorQualityError("extractors were not validated; train them first")
    if not test_samples:
        raise InsufficientDataError("empty test split")

    real_norm = [normalizer.normalize_array(s.motion.data) for s in test_samples]
    texts = [s.descriptor.text for s in test_samples]
    lengths = [s.motion.num_frames for s in test_samples]
    real_feats = extractors.motion_features(real_norm)
    text_feats = extractors.text_features(texts)

    unique_texts = sorted(set(texts))
    rows = []
    for rep in range(config.replicates):
        rng = np.random.default_rng([seed, rep])
        gen_motions = generate_fn(texts, lengths, rng)
        gen_feats = extractors.motion_features([m.data for m in gen_motions])

        chosen = rng.choice(
            len(unique_texts), size=min(config.mmodality_texts, len(unique_texts)), replace=False
        )
        per_text_feats = []
        for ti in chosen:
            text = unique_texts[ti]
            candidates = [lengths[i] for i, t in enumerate(texts) if t == text]
            f_star = int(candidates[int(rng.integers(len(candidates)))])
            reps = 2 * config.mmodality_subset
            motions = generate_fn([text] * reps, [f_star] * reps, rng)
            per_text_feats.append(extractors.motion_features([m.data for m in motions]))
        row = compute_replicate_metrics(
            real_feats,
            gen_feats,
            text_feats,
            per_text_feats,
            EvalConfig(
                replicates=config.replicates,
                rp_batch=config.rp_batch,
                diversity_subset=config.diversity_subset,
                mmodality_texts=len(per_text_feats),
                mmodality_subset=config.mmodality_subset,
            ),
            rng,
        )
        rows.append(row)
    return aggregate_replicates(rows, config.replicates)
