"""Training loop, checkpointing, evaluation purity, ablation harness, CLI."""

import json
import os

import numpy as np
import pytest

from pedsearch import cli
from pedsearch.config import SEED_ENV_VAR, TrainConfig, config_from_sources, load_config_file
from pedsearch.errors import CheckpointError, ConfigError, ContractError, TrainingAbort
from pedsearch.synthdata import load_dataset, write_dataset
from pedsearch.trainer import (Trainer, ablate, chance_level, dump_features,
                               evaluate, evaluate_checkpoint, gradcheck_report,
                               reconstruction_diagnostic, train)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "synth"
    write_dataset(root, identities=8, views_per_id=4, captions_per_view=2,
                  split_ratios=(0.5, 0.25, 0.25), seed=3)
    return root


@pytest.fixture(scope="module")
def dataset(data_dir):
    return load_dataset(data_dir)


def tiny_config(data_dir, out_dir, **overrides) -> TrainConfig:
    base = dict(epochs=2, batch_size=8, pair_count=4, seed=0,
                data_dir=str(data_dir), out_dir=str(out_dir), fusion_depth=1)
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_paper_scale_values_accepted(self):
        cfg = TrainConfig.paper_scale()
        assert cfg.batch_size == 100
        assert cfg.lr == 1e-5
        assert cfg.epochs == 60
        assert cfg.encoder.text_len == 77
        assert cfg.encoder.n_patches == 192
        assert cfg.pair_count == 20

    def test_pair_count_bounded_by_batch(self):
        with pytest.raises(ConfigError):
            TrainConfig(pair_count=64, batch_size=32)

    def test_flat_round_trip(self):
        cfg = TrainConfig(tau=0.05, mim_variant="text_free", seed=7)
        again = TrainConfig.from_flat_dict(cfg.to_flat_dict())
        assert again == cfg

    def test_config_file_and_overrides(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("tau=0.5\nepochs=3\nd=32  # width\n", encoding="utf-8")
        cfg = config_from_sources(path, {"epochs": 5})
        assert cfg.tau == 0.5
        assert cfg.epochs == 5
        assert cfg.encoder.d == 32

    def test_env_seed_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv(SEED_ENV_VAR, "777")
        cfg = config_from_sources(None, {"seed": 3})
        assert cfg.seed == 777

    def test_bad_config_line_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("this is not a pair\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(path)


class TestTraining:
    def test_one_epoch_run_logs_once(self, data_dir, dataset, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "r", epochs=1)
        trainer = Trainer(cfg, dataset).run()
        assert len(trainer.loss_log) == 1
        entry = trainer.loss_log[0]
        assert set(entry) == {"epoch", "mim", "calibration", "cmpm", "i2t", "t2i", "total"}

    def test_step_additivity(self, data_dir, dataset, tmp_path):
        # the 1e-9 additivity tolerance is a 64-bit contract
        cfg = tiny_config(data_dir, tmp_path / "r2", epochs=2, dtype="float64")
        trainer = Trainer(cfg, dataset).run()
        for rec in trainer.step_log:
            assert rec.total == pytest.approx(rec.mim + rec.calibration + rec.cmpm,
                                              abs=1e-9)
            assert rec.cmpm == pytest.approx(rec.i2t + rec.t2i, abs=1e-9)

    def test_determinism_same_seed(self, data_dir, dataset, tmp_path):
        cfg_a = tiny_config(data_dir, tmp_path / "a", dtype="float64")
        cfg_b = tiny_config(data_dir, tmp_path / "b", dtype="float64")
        log_a = Trainer(cfg_a, dataset).run().loss_log
        log_b = Trainer(cfg_b, dataset).run().loss_log
        assert log_a == log_b

    def test_different_seed_differs(self, data_dir, dataset, tmp_path):
        log_a = Trainer(tiny_config(data_dir, tmp_path / "s0"), dataset).run().loss_log
        log_b = Trainer(tiny_config(data_dir, tmp_path / "s1", seed=1), dataset).run().loss_log
        assert log_a != log_b

    def test_loss_log_written_as_jsonl(self, data_dir, dataset, tmp_path):
        out = tmp_path / "log"
        Trainer(tiny_config(data_dir, out), dataset).run()
        lines = (out / "loss_log.jsonl").read_text().strip().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["epoch"] == 1

    def test_nan_abort_checkpoints_pre_nan_state(self, data_dir, dataset, tmp_path):
        # a poisoned parameter makes the first loss non-finite; the abort
        # fires before any update, so the checkpoint is the exact pre-step state
        out = tmp_path / "nan"
        cfg = tiny_config(data_dir, out, epochs=3)
        trainer = Trainer(cfg, dataset)
        poisoned = "image_encoder.cls_token"
        trainer.params[poisoned].data[...] = np.nan
        snapshot = {n: p.data.copy() for n, p in trainer.params.items()}
        with pytest.raises(TrainingAbort) as err:
            trainer.run()
        assert err.value.term == "cmpm"
        assert (out / "abort.vftc").exists()
        resumed = Trainer.load(out / "abort.vftc", dataset)
        for n, p in resumed.params.items():
            assert np.array_equal(p.data, snapshot[n], equal_nan=True), n


class TestCheckpoint:
    def test_save_load_round_trip(self, data_dir, dataset, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "ck")
        trainer = Trainer(cfg, dataset).run()
        loaded = Trainer.load(trainer.checkpoint_path, dataset)
        for name, p in trainer.params.items():
            assert np.array_equal(p.data, loaded.params[name].data), name
        assert loaded.optimizer.t == trainer.optimizer.t
        assert loaded.epoch == trainer.epoch

    def test_magic_and_version_checked(self, data_dir, dataset, tmp_path):
        path = tmp_path / "fake.vftc"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            Trainer.load(path, dataset)

    def test_resume_matches_straight_run(self, data_dir, dataset, tmp_path):
        # train(4) must equal train(2) + resume(2) bit-for-bit at float64
        cfg_full = tiny_config(data_dir, tmp_path / "full", epochs=4, dtype="float64")
        full = Trainer(cfg_full, dataset).run()

        cfg_half = tiny_config(data_dir, tmp_path / "half", epochs=2, dtype="float64")
        half = Trainer(cfg_half, dataset).run()
        cfg_rest = tiny_config(data_dir, tmp_path / "rest", epochs=4, dtype="float64")
        resumed = train(cfg_rest, dataset, resume_from=half.checkpoint_path)

        assert full.loss_log == resumed.loss_log
        for name, p in full.params.items():
            assert np.array_equal(p.data, resumed.params[name].data), name

    def test_resume_with_conflicting_config_rejected(self, data_dir, dataset, tmp_path):
        half = Trainer(tiny_config(data_dir, tmp_path / "h2"), dataset).run()
        conflicting = tiny_config(data_dir, tmp_path / "c2", epochs=4, tau=0.5)
        with pytest.raises(CheckpointError):
            train(conflicting, dataset, resume_from=half.checkpoint_path)


class TestEvaluate:
    def test_untrained_rank1_near_chance(self, data_dir, dataset, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "ev")
        trainer = Trainer(cfg, dataset)          # no training
        report = evaluate(trainer.model, dataset, "test", trainer.config)
        chance = chance_level(dataset, "test")
        # untrained similarity is identity-agnostic; binomial 3-sigma band
        q = len(dataset.split_rows("test"))
        sigma = 100.0 * np.sqrt((chance / 100) * (1 - chance / 100) / q)
        assert abs(report.rank1 - chance) <= 4 * sigma + 1e-9

    def test_evaluate_twice_identical(self, data_dir, dataset, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "ev2")
        trainer = Trainer(cfg, dataset).run()
        a = evaluate(trainer.model, dataset, "test", trainer.config)
        b = evaluate(trainer.model, dataset, "test", trainer.config)
        assert a == b

    def test_inference_purity_instrumented(self, data_dir, dataset, tmp_path):
        cfg = tiny_config(data_dir, tmp_path / "pure", calibration_mode="id_loss")
        trainer = Trainer(cfg, dataset)
        evaluate(trainer.model, dataset, "val", trainer.config)  # must not raise
        from pedsearch.tensor import track_param_access
        with track_param_access() as touched:
            evaluate(trainer.model, dataset, "val", trainer.config)
        assert not [n for n in touched if n.startswith(("recon.", "id_head."))]
        assert any(n.startswith("image_encoder.") for n in touched)

    def test_empty_split_rejected(self, data_dir, dataset, tmp_path):
        trainer = Trainer(tiny_config(data_dir, tmp_path / "e"), dataset)
        with pytest.raises(ContractError):
            evaluate(trainer.model, dataset, "nope", trainer.config)

    def test_evaluate_checkpoint_end_to_end(self, data_dir, dataset, tmp_path):
        trainer = Trainer(tiny_config(data_dir, tmp_path / "ec"), dataset).run()
        report = evaluate_checkpoint(trainer.checkpoint_path, dataset, "test")
        assert report.loss_curve == [e["total"] for e in trainer.loss_log]

    def test_reconstruction_diagnostic_finite(self, data_dir, dataset, tmp_path):
        trainer = Trainer(tiny_config(data_dir, tmp_path / "rd"), dataset).run()
        for ratio in (0.1, 0.5, 0.9):
            value = reconstruction_diagnostic(trainer, "test", ratio, seed=0)
            assert np.isfinite(value) and value >= 0.0

    def test_diagnostic_requires_mim(self, data_dir, dataset, tmp_path):
        trainer = Trainer(tiny_config(data_dir, tmp_path / "rd2", mim_variant="off"),
                          dataset)
        with pytest.raises(ConfigError):
            reconstruction_diagnostic(trainer, "test", 0.5)


class TestDumpFeatures:
    def test_dump_and_read_back(self, data_dir, dataset, tmp_path):
        from pedsearch.alignment import read_features
        trainer = Trainer(tiny_config(data_dir, tmp_path / "df"), dataset)
        path = tmp_path / "feats.bin"
        dump_features(path, trainer, "val")
        feats, meta = read_features(path)
        n_imgs = len(dataset.split_image_indices("val"))
        n_caps = len(dataset.split_rows("val"))
        assert feats.shape == (n_imgs + n_caps, trainer.config.encoder.d_out)
        assert sum(1 for m in meta if m["modality"] == "image") == n_imgs


class TestAblate:
    def test_failure_marks_row_and_continues(self, data_dir, dataset, tmp_path):
        base = tiny_config(data_dir, tmp_path / "ab", epochs=1)
        variants = [("ok", {"mim_variant": "off", "calibration_mode": "off"}),
                    ("broken", {"tau": -1.0})]
        table = ablate(base, variants, seeds=[0], dataset=dataset)
        by_label = {r.label: r for r in table.rows}
        assert by_label["ok"].report is not None
        assert by_label["broken"].report is None and by_label["broken"].error
        md = table.to_markdown()
        assert "failed" in md and "| ok |" in md
        csv_text = table.to_csv()
        assert "failed" in csv_text

    def test_empty_variant_list_runs_base(self, data_dir, dataset, tmp_path):
        base = tiny_config(data_dir, tmp_path / "ab2", epochs=1)
        table = ablate(base, [], seeds=[0], dataset=dataset)
        assert len(table.rows) == 1 and table.rows[0].label == "base"


class TestGradcheckHarness:
    def test_full_report_passes(self):
        errors = gradcheck_report(seeds=(0, 1), tau=0.1)
        assert set(errors) == {"cmpm", "calibration", "mim"}
        assert max(errors.values()) <= 1e-4

    def test_corrupted_gradient_detected(self):
        errors = gradcheck_report(seeds=(0,), tau=0.1, corrupt="cmpm")
        assert errors["cmpm"] > 1e-4

    def test_enabled_losses_select_rows(self, capsys):
        errors = gradcheck_report(seeds=(0,), losses=("cmpm",))
        assert list(errors) == ["cmpm"]
        assert cli.main(["gradcheck", "--seeds", "0", "--mim-variant", "off",
                         "--calibration-mode", "off"]) == 0
        out = capsys.readouterr().out
        assert "cmpm" in out and "mim" not in out


class TestCli:
    def test_gen_train_evaluate_cycle(self, tmp_path, capsys):
        data = tmp_path / "cli-data"
        out = tmp_path / "cli-run"
        assert cli.main(["gen-data", "--out", str(data), "--identities", "8",
                         "--views", "2", "--captions-per-view", "1",
                         "--split", "0.5,0.25,0.25", "--seed", "1"]) == 0
        assert cli.main(["train", "--data-dir", str(data), "--out-dir", str(out),
                         "--epochs", "1", "--batch-size", "4", "--pair-count", "2",
                         "--fusion-depth", "1"]) == 0
        captured = capsys.readouterr().out
        assert "checkpoint:" in captured
        assert cli.main(["evaluate", "--checkpoint", str(out / "checkpoint.vftc"),
                         "--data", str(data), "--split", "test",
                         "--out", str(tmp_path / "report.json")]) == 0
        report = json.loads((tmp_path / "report.json").read_text())
        assert "rank1" in report

    def test_gradcheck_exit_codes(self, capsys):
        assert cli.main(["gradcheck", "--seeds", "0"]) == 0
        assert cli.main(["gradcheck", "--seeds", "0", "--corrupt", "mim"]) == 1

    def test_dump_features_command(self, tmp_path):
        data = tmp_path / "d"
        out = tmp_path / "r"
        cli.main(["gen-data", "--out", str(data), "--identities", "8", "--views", "2",
                  "--captions-per-view", "1", "--split", "0.5,0.25,0.25", "--seed", "2"])
        cli.main(["train", "--data-dir", str(data), "--out-dir", str(out),
                  "--epochs", "1", "--batch-size", "4", "--pair-count", "2",
                  "--fusion-depth", "1"])
        assert cli.main(["dump-features", "--checkpoint", str(out / "checkpoint.vftc"),
                         "--data", str(data), "--split", "val",
                         "--out", str(tmp_path / "f.bin")]) == 0
        assert (tmp_path / "f.bin").exists()
        assert (tmp_path / "f.bin.jsonl").exists()
