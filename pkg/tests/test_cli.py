import dataclasses

import numpy as np
import pytest
import torch

from ladiff.checkpoint import (
    bytes_to_state_dict,
    load_checkpoint,
    save_checkpoint,
    state_dict_to_bytes,
)
from ladiff.cli import main
from ladiff.config import (
    ExperimentConfig,
    denoiser_digest,
    dump_config,
    parse_config,
    vae_digest,
)
from ladiff.corpus import load_corpus
from ladiff.diffusion import Denoiser, DenoiserConfig
from ladiff.errors import (
    CheckpointError,
    ChecksumError,
    ConfigError,
    DigestMismatchError,
)
from ladiff.lavae import LaVae, LaVaeConfig, LatentCode


TINY = """
seed = 9
corpus.n_samples = 36
lavae.d_model = 32
lavae.layers = 1
lavae.heads = 2
diffusion.layers = 1
diffusion.heads = 2
diffusion.train_steps = 60
diffusion.inference_steps = 6
train.vae_epochs = 2
train.vae_batch = 8
train.denoiser_epochs = 2
train.extractor_steps = 4
eval.replicates = 1
eval.diversity_subset = 2
eval.mmodality_texts = 2
eval.mmodality_subset = 2
"""


class TestConfig:
    def test_defaults_round_trip(self):
        config = ExperimentConfig()
        parsed = parse_config(dump_config(config))
        assert parsed == config

    def test_overrides_applied(self):
        config = parse_config(TINY)
        assert config.seed == 9
        assert config.corpus.n_samples == 36
        assert config.lavae.d_model == 32
        assert config.diffusion.inference_steps == 6

    def test_k_recomputed_from_r(self):
        config = parse_config("lavae.r = 48\n")
        assert config.lavae.max_subspaces == 5
        config = parse_config("lavae.r = 16\n")
        assert config.lavae.max_subspaces == 13

    def test_unknown_key_rejected_by_name(self):
        with pytest.raises(ConfigError, match="foo"):
            parse_config("lavae.foo = 1\n")
        with pytest.raises(ConfigError, match="bar"):
            parse_config("bar = 1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="nosuch"):
            parse_config("nosuch.key = 1\n")

    def test_comments_and_blanks_ignored(self):
        config = parse_config("# a comment\n\nseed = 4  # trailing\n")
        assert config.seed == 4

    def test_f_max_consistency_enforced(self):
        with pytest.raises(ConfigError):
            parse_config("corpus.f_max = 100\n")

    def test_tuple_values(self):
        config = parse_config("ablate.r_values = 8, 16\ncorpus.actions = walk,sit\n")
        assert config.ablate.r_values == (8, 16)
        assert config.corpus.actions == ("walk", "sit")

    def test_digests_track_sections(self):
        a = ExperimentConfig()
        b = parse_config("lavae.r = 16\n")
        assert vae_digest(a) != vae_digest(b)
        c = parse_config("diffusion.train_steps = 500\n")
        assert vae_digest(a) == vae_digest(c)
        assert denoiser_digest(a) != denoiser_digest(c)


class TestCheckpoint:
    def _vae(self):
        return LaVae(LaVaeConfig(d_model=32, layers=1, heads=2), seed=12)

    def test_round_trip_bit_identical_forward(self, tmp_path):
        config = ExperimentConfig(
            lavae=LaVaeConfig(d_model=32, layers=1, heads=2)
        )
        model = self._vae()
        path = tmp_path / "vae.ladk"
        save_checkpoint(path, "vae", model, vae_digest(config))
        other = LaVae(LaVaeConfig(d_model=32, layers=1, heads=2), seed=999)
        load_checkpoint(path, "vae", other, vae_digest(config))
        rng = np.random.default_rng(0)
        for _ in range(10):
            z = LatentCode(rng.standard_normal((2, 32)))
            a = model.decode(z, 96)
            b = other.decode(z, 96)
            assert np.array_equal(a.data, b.data)

    def test_digest_mismatch_refused(self, tmp_path):
        config = ExperimentConfig(lavae=LaVaeConfig(d_model=32, layers=1, heads=2))
        model = self._vae()
        path = tmp_path / "vae.ladk"
        save_checkpoint(path, "vae", model, vae_digest(config))
        with pytest.raises(DigestMismatchError):
            load_checkpoint(path, "vae", self._vae(), b"x" * 32)

    def test_component_tag_enforced(self, tmp_path):
        config = ExperimentConfig(lavae=LaVaeConfig(d_model=32, layers=1, heads=2))
        model = self._vae()
        path = tmp_path / "vae.ladk"
        save_checkpoint(path, "vae", model, vae_digest(config))
        with pytest.raises(CheckpointError):
            load_checkpoint(path, "denoiser", self._vae(), vae_digest(config))

    def test_checksum_detects_corruption(self, tmp_path):
        blob = state_dict_to_bytes("vae", self._vae().state_dict(), b"d" * 32)
        corrupted = bytearray(blob)
        corrupted[100] ^= 0xFF
        with pytest.raises(ChecksumError):
            bytes_to_state_dict(bytes(corrupted), "vae", b"d" * 32)

    def test_float32_quantization_is_lossless_for_f32_models(self):
        model = Denoiser(DenoiserConfig(d_model=32, layers=1, heads=2), seed=1)
        blob = state_dict_to_bytes("denoiser", model.state_dict(), b"0" * 32)
        state = bytes_to_state_dict(blob, "denoiser", b"0" * 32)
        for name, tensor in model.state_dict().items():
            assert torch.equal(state[name], tensor)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY + f"out_dir = {root / 'run'}\n")
    cfg = str(root / "tiny.cfg")
    assert main(["gen-corpus", "--config", cfg]) == 0
    assert main(["train-vae", "--config", cfg]) == 0
    assert main(["train-denoiser", "--config", cfg]) == 0
    return root


class TestCommands:

    def test_pipeline_artifacts(self, workdir, capsys):
        run = workdir / "run"
        assert (run / "corpus.ladc").exists()
        assert (run / "normalizer.ladn").exists()
        assert (run / "vae.ladk").exists()
        assert (run / "denoiser.ladk").exists()
        log = (run / "vae_train.log").read_text().strip().splitlines()
        assert len(log) == 2 and log[0].startswith("epoch=0 recon=")

    def test_config_echoed(self, workdir, capsys):
        cfg = str(workdir / "tiny.cfg")
        assert main(["gen-corpus", "--config", cfg]) == 0
        out = capsys.readouterr().out
        assert "resolved seed = 9" in out
        assert "lavae.d_model = 32" in out

    def test_sample_command(self, workdir, capsys):
        cfg = str(workdir / "tiny.cfg")
        code = main(
            [
                "sample", "--config", cfg, "--text", "a man walks forward",
                "--frames", "48", "--dynamics",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "k=1 active subspaces" in out
        saved = load_corpus(workdir / "run" / "sample.ladc")
        assert saved[0].motion.num_frames == 48
        assert saved[0].descriptor.text == "a man walks forward"
        assert (workdir / "run" / "sample.dynamics.txt").exists()

    def test_sample_frames_out_of_range(self, workdir, capsys):
        cfg = str(workdir / "tiny.cfg")
        code = main(
            ["sample", "--config", cfg, "--text", "a man walks forward", "--frames", "500"]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "500" in err and "f_max" in err

    def test_missing_prerequisite_actionable(self, tmp_path, capsys):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(TINY + f"out_dir = {tmp_path / 'empty'}\n")
        code = main(["train-vae", "--config", str(cfg)])
        assert code == 2
        err = capsys.readouterr().err
        assert "missing corpus" in err
        assert "gen-corpus" in err

    def test_analyze_command(self, workdir, capsys):
        cfg = str(workdir / "tiny.cfg")
        code = main(["analyze", "--config", cfg, "--lengths", "48,96", "--active-set", "1"])
        assert code == 0
        out = capsys.readouterr().out
        assert "occupancy histogram" in out
        analysis = workdir / "run" / "analysis"
        assert (analysis / "occupancy.txt").exists()
        assert (analysis / "attention_f48.txt").exists()
        assert (analysis / "sweep.txt").exists()
        assert (analysis / "ablated_f96.ladc").exists()

    def test_sample_determinism_across_runs(self, workdir):
        cfg = str(workdir / "tiny.cfg")
        main(["sample", "--config", cfg, "--text", "someone waves hello", "--frames", "40",
              "--motion-out", str(workdir / "a.ladc")])
        main(["sample", "--config", cfg, "--text", "someone waves hello", "--frames", "40",
              "--motion-out", str(workdir / "b.ladc")])
        a = (workdir / "a.ladc").read_bytes()
        b = (workdir / "b.ladc").read_bytes()
        assert a == b


class TestThreadCap:
    def test_env_var_caps_torch_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("LADIFF_THREADS", "1")
        cfg = tmp_path / "t.cfg"
        cfg.write_text(TINY + f"out_dir = {tmp_path / 'run'}\ncorpus.n_samples = 4\n")
        assert main(["gen-corpus", "--config", str(cfg)]) == 0
        assert torch.get_num_threads() == 1


class TestAblate:
    def test_cells_differ_only_in_declared_axis(self):
        from ladiff.cli import _ablation_cells

        config = ExperimentConfig()
        base_fields = dataclasses.asdict(config.lavae)
        cells = _ablation_cells(config)
        names = [name for name, _ in cells]
        assert names == [
            "r16", "r32", "r48", "r64", "rall", "noise0", "noise33", "noise50",
            "dvae_latent", "no_la",
        ]
        for name, patch in cells:
            cell = dataclasses.replace(config.lavae, **patch)
            diff = {
                key: value
                for key, value in dataclasses.asdict(cell).items()
                if base_fields[key] != value
            }
            assert set(diff) <= set(patch), f"cell {name} changed undeclared fields"

    def test_r_all_uses_f_max(self):
        from ladiff.cli import _ablation_cells

        config = ExperimentConfig()
        rall = dict(_ablation_cells(config))["rall"]
        assert rall == {"r": config.lavae.f_max}
        cell = dataclasses.replace(config.lavae, **rall)
        assert cell.max_subspaces == 1

    def test_grid_run_writes_reports(self, tmp_path, capsys):
        # one r-cell only, all other axes disabled, minimal budgets
        cfg_path = tmp_path / "ablate.cfg"
        cfg_path.write_text(
            TINY
            + f"out_dir = {tmp_path / 'run'}\n"
            + "corpus.n_samples = 220\n"
            + "train.extractor_steps = 150\n"
            + "train.extractor_margin = 0.05\n"
            + "ablate.r_values = 48\n"
            + "ablate.include_r_all = false\n"
            + "ablate.include_no_la = false\n"
            + "ablate.include_latent_dvae = false\n"
            + "ablate.noise_values = \n"
        )
        assert main(["gen-corpus", "--config", str(cfg_path)]) == 0
        assert main(["ablate", "--config", str(cfg_path)]) == 0
        report = tmp_path / "run" / "cells" / "r48" / "report.txt"
        assert report.exists()
        assert "r_precision_top1" in report.read_text()
