"""Experiment configuration: flat key = value text with dotted sections.

Every command resolves one ExperimentConfig; unknown keys are rejected by
name, and the subspace bank size K is always recomputed from (f_max, r) on
load rather than trusted from the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .corpus.generate import CorpusConfig
from .errors import ConfigError
from .evaluation import EvalConfig
from .lavae import LaVaeConfig


@dataclass
class DiffusionSection:
    train_steps: int = 1000
    schedule: str = "linear"
    inference_steps: int = 20
    layers: int = 9
    heads: int = 4
    sampler: str = "deterministic-subsequence"
    # Reverse steps clip the implied clean latent to this magnitude; "none"
    # disables the clamp.
    x0_clip: float | None = 5.0

    def __post_init__(self):
        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"unknown schedule kind {self.schedule!r}")


@dataclass
class TrainSection:
    vae_epochs: int = 120
    vae_batch: int = 64
    vae_lr: float = 1e-4
    vae_lr_min: float | None = None
    denoiser_epochs: int = 300
    denoiser_batch: int = 128
    denoiser_lr: float = 1e-4
    denoiser_lr_min: float | None = None
    weight_decay: float = 1e-2
    extractor_steps: int = 600
    extractor_lr: float = 1e-3
    extractor_margin: float = 0.2


@dataclass
class AblateSection:
    r_values: tuple = (16, 32, 48, 64)
    noise_values: tuple = (0.0, 0.33, 0.5)
    include_r_all: bool = True
    include_no_la: bool = True
    include_latent_dvae: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    lavae: LaVaeConfig = field(default_factory=LaVaeConfig)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateSection = field(default_factory=AblateSection)

    def __post_init__(self):
        if self.corpus.f_max != self.lavae.f_max:
            raise ConfigError(
                f"corpus.f_max={self.corpus.f_max} != lavae.f_max={self.lavae.f_max}"
            )


_SECTIONS = ("corpus", "lavae", "diffusion", "train", "eval", "ablate")
_TOP_KEYS = ("seed", "out_dir")

# Fields that cannot be expressed in the flat format.
_UNSETTABLE = {"corpus.action_params"}


def _parse_scalar(raw: str, default):
    raw = raw.strip()
    if default is None or raw.lower() in ("none", "null"):
        if raw.lower() in ("none", "null"):
            return None
        try:
            return int(raw)
        except ValueError:
            return float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, str):
        return raw
    raise ConfigError(f"unsupported value type for default {default!r}")


def _parse_value(raw: str, default):
    if isinstance(default, tuple):
        element = default[0] if default else 0
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_parse_scalar(p, element) for p in parts)
    return _parse_scalar(raw, default)


def _defaults_of(section_obj) -> dict:
    out = {}
    for f in dataclasses.fields(type(section_obj)):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def parse_config(text: str) -> ExperimentConfig:
    config = ExperimentConfig()
    sections = {name: getattr(config, name) for name in _SECTIONS}
    defaults = {name: _defaults_of(obj) for name, obj in sections.items()}
    staged: dict[str, dict] = {name: {} for name in _SECTIONS}
    top: dict = {}

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key in _TOP_KEYS:
            top[key] = raw if key == "out_dir" else int(raw)
            continue
        if "." not in key:
            raise ConfigError(f"unknown key {key!r}")
        section, _, name = key.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section {section!r} in key {key!r}")
        if key in _UNSETTABLE:
            raise ConfigError(f"key {key!r} cannot be set from a flat config")
        if name not in defaults[section]:
            raise ConfigError(f"unknown key {key!r}")
        staged[section][name] = _parse_value(raw, defaults[section][name])

    kwargs = dict(top)
    for section in _SECTIONS:
        if staged[section]:
            merged = {**dataclasses.asdict(sections[section]), **staged[section]}
            merged = {
                k: v
                for k, v in merged.items()
                if k in {f.name for f in dataclasses.fields(type(sections[section]))}
            }
            kwargs[section] = type(sections[section])(**merged)
    return dataclasses.replace(config, **kwargs)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def dump_section(obj, prefix: str) -> str:
    lines = []
    for f in dataclasses.fields(type(obj)):
        if f"{prefix}.{f.name}" in _UNSETTABLE:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{prefix}.{f.name} = {value}")
    return "\n".join(lines)


def dump_config(config: ExperimentConfig) -> str:
    parts = [f"seed = {config.seed}", f"out_dir = {config.out_dir}"]
    for section in _SECTIONS:
        parts.append(dump_section(getattr(config, section), section))
    return "\n".join(parts) + "\n"


def save_config(path, config: ExperimentConfig) -> None:
    Path(path).write_text(dump_config(config))


def section_digest(*texts: str) -> bytes:
    h = hashlib.sha256()
    for text in texts:
        h.update(text.encode("utf-8"))
    return h.digest()


def vae_digest(config: ExperimentConfig) -> bytes:
    return section_digest(dump_section(config.lavae, "lavae"))


def denoiser_digest(config: ExperimentConfig) -> bytes:
    return section_digest(
        dump_section(config.lavae, "lavae"), dump_section(config.diffusion, "diffusion")
    )


def extractor_digest(config: ExperimentConfig) -> bytes:
    return section_digest(f"extractor pose_dim={config.lavae.pose_dim}")
