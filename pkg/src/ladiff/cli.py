"""Command-line surface: gen-corpus, train-vae, train-denoiser, sample,
evaluate, analyze, ablate.

Every command echoes its resolved configuration and seed, so a run is a
pure function of (config, seed, input artifacts).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import analysis as analysis_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (
    ExperimentConfig,
    denoiser_digest,
    dump_config,
    extractor_digest,
    load_config,
    vae_digest,
)
from .corpus import (
    CorpusSample,
    TextDescriptor,
    TextEmbedder,
    fit_normalizer,
    generate_corpus,
    load_corpus,
    load_normalizer,
    save_corpus,
    save_normalizer,
    split_samples,
)
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DenoiserTrainSettings,
    build_schedule,
    sample,
    sample_batch,
    train_denoiser,
)
from .errors import LadiffError, PrerequisiteError
from .evaluation import (
    EvalConfig,
    ExtractorTrainSettings,
    FeatureExtractorPair,
    MotionFeatureExtractor,
    TextFeatureExtractor,
    dynamics_stats,
    evaluate,
    train_extractors,
)
from .lavae import LatentCode, LaVae, TrainSettings, train_vae


def _apply_thread_cap() -> None:
    cap = os.environ.get("LADIFF_THREADS")
    if cap:
        torch.set_num_threads(max(1, int(cap)))


def _resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "out", None) is not None:
        config = dataclasses.replace(config, out_dir=str(args.out))
    return config


def _echo(config: ExperimentConfig) -> None:
    print("# resolved configuration")
    print(dump_config(config), end="")
    print(f"# resolved seed = {config.seed}")


def _require(path: Path, what: str, hint: str) -> Path:
    if not Path(path).exists():
        raise PrerequisiteError(f"missing {what}: {path} (create it with `ladiff {hint}`)")
    return Path(path)


def _out_dir(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_denoiser_config(config: ExperimentConfig) -> DenoiserConfig:
    return DenoiserConfig(
        d_model=config.lavae.d_model,
        layers=config.diffusion.layers,
        heads=config.diffusion.heads,
        max_subspaces=config.lavae.max_subspaces,
    )


def _build_schedule(config: ExperimentConfig):
    return build_schedule(
        config.diffusion.train_steps,
        config.diffusion.schedule,
        config.diffusion.inference_steps,
    )


def _load_vae(config: ExperimentConfig, path: Path) -> LaVae:
    model = LaVae(config.lavae, seed=config.seed)
    load_checkpoint(path, "vae", model, vae_digest(config))
    return model


def _load_denoiser(config: ExperimentConfig, path: Path) -> Denoiser:
    model = Denoiser(_build_denoiser_config(config), seed=config.seed)
    load_checkpoint(path, "denoiser", model, denoiser_digest(config))
    return model


def _extractor_module(pair: FeatureExtractorPair) -> nn.Module:
    return nn.ModuleDict({"motion": pair.motion, "text": pair.text})


def _load_extractors(config: ExperimentConfig, path: Path) -> FeatureExtractorPair:
    pair = FeatureExtractorPair(
        motion=MotionFeatureExtractor(config.lavae.pose_dim), text=TextFeatureExtractor()
    )
    load_checkpoint(path, "extractor", _extractor_module(pair), extractor_digest(config))
    pair.validated = True  # only validated extractors are ever saved
    return pair


def _corpus_paths(config: ExperimentConfig, args):
    out = _out_dir(config)
    corpus_path = Path(args.corpus) if getattr(args, "corpus", None) else out / "corpus.ladc"
    norm_path = (
        Path(args.normalizer) if getattr(args, "normalizer", None) else out / "normalizer.ladn"
    )
    return corpus_path, norm_path


# --- commands ---


def cmd_gen_corpus(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    samples = generate_corpus(config.corpus, config.seed)
    train = split_samples(samples, "train")
    normalizer = fit_normalizer([s.motion for s in train] or [s.motion for s in samples])
    save_corpus(out / "corpus.ladc", samples)
    save_normalizer(out / "normalizer.ladn", normalizer, config.corpus.fps)
    counts = {split: len(split_samples(samples, split)) for split in ("train", "val", "test")}
    print(f"wrote {out / 'corpus.ladc'} with {len(samples)} samples {counts}")
    print(f"wrote {out / 'normalizer.ladn'}")
    return 0


def cmd_train_vae(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    corpus_path, norm_path = _corpus_paths(config, args)
    samples = load_corpus(_require(corpus_path, "corpus", "gen-corpus"))
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    settings = TrainSettings(
        epochs=config.train.vae_epochs,
        batch_size=config.train.vae_batch,
        lr=config.train.vae_lr,
        weight_decay=config.train.weight_decay,
        lr_min=config.train.vae_lr_min,
    )
    model, logs = train_vae(samples, normalizer, config.lavae, settings, config.seed)
    save_checkpoint(out / "vae.ladk", "vae", model, vae_digest(config))
    log_path = out / "vae_train.log"
    with log_path.open("a") as fh:
        for entry in logs:
            fh.write(entry.line() + "\n")
    print(f"wrote {out / 'vae.ladk'} (final recon={logs[-1].recon:.6f})")
    return 0


def cmd_train_denoiser(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    corpus_path, norm_path = _corpus_paths(config, args)
    samples = load_corpus(_require(corpus_path, "corpus", "gen-corpus"))
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    vae_path = Path(args.vae) if args.vae else out / "vae.ladk"
    vae = _load_vae(config, _require(vae_path, "VAE checkpoint", "train-vae"))
    schedule = _build_schedule(config)
    settings = DenoiserTrainSettings(
        epochs=config.train.denoiser_epochs,
        batch_size=config.train.denoiser_batch,
        lr=config.train.denoiser_lr,
        weight_decay=config.train.weight_decay,
        lr_min=config.train.denoiser_lr_min,
    )
    model, logs = train_denoiser(
        samples, normalizer, vae, _build_denoiser_config(config), schedule, settings, config.seed
    )
    save_checkpoint(out / "denoiser.ladk", "denoiser", model, denoiser_digest(config))
    with (out / "denoiser_train.log").open("a") as fh:
        for entry in logs:
            fh.write(entry.line() + "\n")
    print(f"wrote {out / 'denoiser.ladk'} (final loss={logs[-1].loss:.6f})")
    return 0


def cmd_sample(args) -> int:
    config = _resolve_config(args)
    if args.steps is not None:
        config = dataclasses.replace(
            config,
            diffusion=dataclasses.replace(config.diffusion, inference_steps=args.steps),
        )
    _echo(config)
    out = _out_dir(config)
    _, norm_path = _corpus_paths(config, args)
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    vae_path = Path(args.vae) if args.vae else out / "vae.ladk"
    dn_path = Path(args.denoiser) if args.denoiser else out / "denoiser.ladk"
    vae = _load_vae(config, _require(vae_path, "VAE checkpoint", "train-vae"))
    denoiser = _load_denoiser(config, _require(dn_path, "denoiser checkpoint", "train-denoiser"))
    schedule = _build_schedule(config)

    k = vae.config.active_count(args.frames)
    print(f"target frames {args.frames} -> k={k} active subspaces")
    rng = np.random.default_rng(config.seed)
    motion = sample(
        args.text,
        args.frames,
        vae,
        denoiser,
        schedule,
        rng,
        sampler_kind=args.sampler,
        normalizer=normalizer,
        f_min=config.corpus.f_min,
        x0_clip=config.diffusion.x0_clip,
    )
    descriptor = TextDescriptor.from_text(args.text)
    target = Path(args.motion_out) if args.motion_out else out / "sample.ladc"
    save_corpus(target, [CorpusSample(0, motion, descriptor, "test")])
    print(f"wrote {target}")
    if args.dynamics:
        stats = dynamics_stats(motion)
        line = (
            f"frames={args.frames} avg_vel={stats.avg_vel:.4f} "
            f"avg_acc={stats.avg_acc:.4f} max_acc={stats.max_acc:.4f}"
        )
        print(line)
        (target.with_suffix(".dynamics.txt")).write_text(line + "\n")
    return 0


def _make_generate_fn(vae, denoiser, schedule, config, embedder):
    def generate_fn(texts, f_stars, rng):
        return sample_batch(
            texts,
            f_stars,
            vae,
            denoiser,
            schedule,
            rng,
            sampler_kind=config.diffusion.sampler,
            embedder=embedder,
            f_min=config.corpus.f_min,
            x0_clip=config.diffusion.x0_clip,
        )

    return generate_fn


def _get_or_train_extractors(config, samples, normalizer, out, path_arg) -> FeatureExtractorPair:
    path = Path(path_arg) if path_arg else out / "extractors.ladk"
    if path.exists():
        return _load_extractors(config, path)
    settings = ExtractorTrainSettings(
        steps=config.train.extractor_steps,
        lr=config.train.extractor_lr,
        margin=config.train.extractor_margin,
    )
    pair = train_extractors(samples, normalizer, settings, seed=config.seed)
    save_checkpoint(path, "extractor", _extractor_module(pair), extractor_digest(config))
    print(f"wrote {path}")
    return pair


def cmd_evaluate(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    corpus_path, norm_path = _corpus_paths(config, args)
    samples = load_corpus(_require(corpus_path, "corpus", "gen-corpus"))
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    vae_path = Path(args.vae) if args.vae else out / "vae.ladk"
    dn_path = Path(args.denoiser) if args.denoiser else out / "denoiser.ladk"
    vae = _load_vae(config, _require(vae_path, "VAE checkpoint", "train-vae"))
    denoiser = _load_denoiser(config, _require(dn_path, "denoiser checkpoint", "train-denoiser"))
    schedule = _build_schedule(config)
    extractors = _get_or_train_extractors(config, samples, normalizer, out, args.extractors)

    test = split_samples(samples, "test")
    generate_fn = _make_generate_fn(vae, denoiser, schedule, config, TextEmbedder())
    report = evaluate(
        generate_fn, test, normalizer, extractors, config.eval, seed=config.seed
    )
    target = Path(args.report) if args.report else out / "report.txt"
    target.write_text(report.to_text())
    print(report.to_text(), end="")
    print(f"wrote {target}")
    return 0


def cmd_analyze(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    corpus_path, norm_path = _corpus_paths(config, args)
    samples = load_corpus(_require(corpus_path, "corpus", "gen-corpus"))
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    vae_path = Path(args.vae) if args.vae else out / "vae.ladk"
    dn_path = Path(args.denoiser) if args.denoiser else out / "denoiser.ladk"
    vae = _load_vae(config, _require(vae_path, "VAE checkpoint", "train-vae"))
    denoiser = _load_denoiser(config, _require(dn_path, "denoiser checkpoint", "train-denoiser"))
    schedule = _build_schedule(config)
    analysis_dir = out / "analysis"
    analysis_dir.mkdir(parents=True, exist_ok=True)

    usage = analysis_mod.latent_occupancy(vae, samples, normalizer)
    analysis_mod.export_subspace_usage(analysis_dir / "occupancy.txt", usage, config.lavae.r)
    print(f"occupancy histogram: {usage.histogram}")

    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else [48, 84, 170]
    text = args.text or "a person walks forward"
    chunk_lines = []
    for f_star in lengths:
        rng = np.random.default_rng([config.seed, f_star])
        z = analysis_mod.sample_latent(text, f_star, vae, denoiser, schedule, rng)
        amap = analysis_mod.attention_map(vae, LatentCode(z), f_star)
        analysis_mod.export_attention_map(analysis_dir / f"attention_f{f_star}.txt", amap)
        if amap.k >= 2:
            score = analysis_mod.chunking_score(amap, config.lavae.r)
            chunk_lines.append(f"f={f_star} k={amap.k} chunking_score={score:.4f}")
            print(chunk_lines[-1])
    if chunk_lines:
        (analysis_dir / "chunking.txt").write_text("\n".join(chunk_lines) + "\n")

    sweep = analysis_mod.length_sweep(
        vae, denoiser, schedule, normalizer, text, lengths, seed=config.seed
    )
    sweep_lines = [
        f"f={f} avg_vel={st.avg_vel:.4f} avg_acc={st.avg_acc:.4f} max_acc={st.max_acc:.4f}"
        for f, st in sweep
    ]
    (analysis_dir / "sweep.txt").write_text("\n".join(sweep_lines) + "\n")
    for line in sweep_lines:
        print(line)

    if args.active_set:
        active = [int(x) for x in args.active_set.split(",")]
        f_star = lengths[-1]
        rng = np.random.default_rng([config.seed, f_star])
        motion = analysis_mod.subspace_ablation(
            vae, denoiser, text, f_star, active, rng, schedule, normalizer
        )
        target = analysis_dir / f"ablated_f{f_star}.ladc"
        save_corpus(target, [CorpusSample(0, motion, TextDescriptor.from_text(text), "test")])
        print(f"wrote {target}")
    return 0


def _ablation_cells(config: ExperimentConfig):
    cells = []
    for r in config.ablate.r_values:
        cells.append((f"r{r}", {"r": int(r)}))
    if config.ablate.include_r_all:
        cells.append(("rall", {"r": config.lavae.f_max}))
    for noise in config.ablate.noise_values:
        cells.append((f"noise{int(round(noise * 100))}", {"dvae_fraction": float(noise)}))
    if config.ablate.include_latent_dvae:
        cells.append(("dvae_latent", {"dvae_target": "latent"}))
    if config.ablate.include_no_la:
        cells.append(("no_la", {"length_aware": False}))
    return cells


def cmd_ablate(args) -> int:
    config = _resolve_config(args)
    _echo(config)
    out = _out_dir(config)
    corpus_path, norm_path = _corpus_paths(config, args)
    samples = load_corpus(_require(corpus_path, "corpus", "gen-corpus"))
    normalizer = load_normalizer(_require(norm_path, "normalizer", "gen-corpus"))
    extractors = _get_or_train_extractors(config, samples, normalizer, out, args.extractors)
    test = split_samples(samples, "test")

    for index, (name, patch) in enumerate(_ablation_cells(config)):
        cell_dir = out / "cells" / name
        cell_dir.mkdir(parents=True, exist_ok=True)
        cell_config = dataclasses.replace(
            config,
            lavae=dataclasses.replace(config.lavae, **patch),
            out_dir=str(cell_dir),
        )
        cell_seed = config.seed + 1000 * (index + 1)
        print(f"--- cell {name}: {patch} (seed {cell_seed})")
        vae_settings = TrainSettings(
            epochs=config.train.vae_epochs,
            batch_size=config.train.vae_batch,
            lr=config.train.vae_lr,
            weight_decay=config.train.weight_decay,
            lr_min=config.train.vae_lr_min,
        )
        vae, _ = train_vae(samples, normalizer, cell_config.lavae, vae_settings, cell_seed)
        save_checkpoint(cell_dir / "vae.ladk", "vae", vae, vae_digest(cell_config))
        schedule = _build_schedule(cell_config)
        dn_settings = DenoiserTrainSettings(
            epochs=config.train.denoiser_epochs,
            batch_size=config.train.denoiser_batch,
            lr=config.train.denoiser_lr,
            weight_decay=config.train.weight_decay,
            lr_min=config.train.denoiser_lr_min,
        )
        denoiser, _ = train_denoiser(
            samples,
            normalizer,
            vae,
            _build_denoiser_config(cell_config),
            schedule,
            dn_settings,
            cell_seed,
        )
        save_checkpoint(
            cell_dir / "denoiser.ladk", "denoiser", denoiser, denoiser_digest(cell_config)
        )
        generate_fn = _make_generate_fn(vae, denoiser, schedule, cell_config, TextEmbedder())
        report = evaluate(
            generate_fn, test, normalizer, extractors, cell_config.eval, seed=cell_seed
        )
        (cell_dir / "report.txt").write_text(report.to_text())
        print(report.to_text(), end="")
    print(f"wrote {len(_ablation_cells(config))} cell reports under {out / 'cells'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ladiff", description="length-aware text-to-motion via latent diffusion"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None, help="config file (key = value)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=str, default=None, help="output directory override")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus + normalizer")
    common(p)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train-vae", help="first-stage autoencoder training")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--normalizer", type=str, default=None)
    p.set_defaults(fn=cmd_train_vae)

    p = sub.add_parser("train-denoiser", help="second-stage latent diffusion training")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--normalizer", type=str, default=None)
    p.add_argument("--vae", type=str, default=None)
    p.set_defaults(fn=cmd_train_denoiser)

    p = sub.add_parser("sample", help="generate one motion from text + target length")
    common(p)
    p.add_argument("--text", type=str, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--steps", type=int, default=None, help="inference steps override")
    p.add_argument("--sampler", type=str, default="deterministic-subsequence",
                   choices=("deterministic-subsequence", "ancestral"))
    p.add_argument("--normalizer", type=str, default=None)
    p.add_argument("--vae", type=str, default=None)
    p.add_argument("--denoiser", type=str, default=None)
    p.add_argument("--motion-out", type=str, default=None)
    p.add_argument("--dynamics", action="store_true", help="emit a dynamics summary")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("evaluate", help="full metric suite with confidence intervals")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--normalizer", type=str, default=None)
    p.add_argument("--vae", type=str, default=None)
    p.add_argument("--denoiser", type=str, default=None)
    p.add_argument("--extractors", type=str, default=None)
    p.add_argument("--report", type=str, default=None)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("analyze", help="attention maps, occupancy, length sweeps")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--normalizer", type=str, default=None)
    p.add_argument("--vae", type=str, default=None)
    p.add_argument("--denoiser", type=str, default=None)
    p.add_argument("--text", type=str, default=None)
    p.add_argument("--lengths", type=str, default=None, help="comma list, e.g. 48,84,170")
    p.add_argument("--active-set", type=str, default=None, help="comma list of 1-based slots")
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("ablate", help="train + evaluate the ablation grid")
    common(p)
    p.add_argument("--corpus", type=str, default=None)
    p.add_argument("--normalizer", type=str, default=None)
    p.add_argument("--extractors", type=str, default=None)
    p.set_defaults(fn=cmd_ablate)

    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except LadiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
