#!/usr/bin/python3
import io
import json
import math
import logging
import unittest
import torch
import pandas as pd
from pathlib import Path
from unittest.mock import patch
from contextlib import redirect_stderr, redirect_stdout
from tempfile import TemporaryDirectory
from src.cli import ANALYSIS_NAME, VIEWS_DIR, main
from src.contrastive import LossOutput
from src.config import RESOLVED_CONFIG_NAME
from src.services.dataset_store import MANIFEST_NAME
from src.constants import EXIT_CONFIG, EXIT_IO, EXIT_NUMERICAL, EXIT_OK
from src.trainer import CHECKPOINT_DIR, FINAL_CHECKPOINT_NAME, METRICS_NAME, SNAPSHOT_DIR

SMALL_RUN = {
    "synth": {"image_size": 60, "n_images": 8, "anomaly_radius": [5, 9], "seed": 4},
    "views": {"crop_size": 20, "view_size": 27, "tile_size": 9},
    "encoder": {"channels": [4, 8, 8], "embedding_dim": 8},
    "loss": {"k": 3},
    "train": {"batch_size": 4, "epochs": 1, "dtype": "float64", "probe_size": 4},
    "eval": {"knn_k": 3, "probe_epochs": 2},
}

class CliTestCase(unittest.TestCase):
    def setUp(self):
        self.root_logger = logging.getLogger()
        self.original_level = self.root_logger.level
        self.original_handlers = self.root_logger.handlers[:]
        for handler in self.root_logger.handlers[:]:
            self.root_logger.removeHandler(handler)
        self._tmp = TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.tmp / "run.json"
        self.config.write_text(json.dumps(SMALL_RUN), encoding="utf-8")

    def tearDown(self):
        for handler in self.root_logger.handlers[:]:
            try:
                handler.close()
            finally:
                self.root_logger.removeHandler(handler)
        self.root_logger.setLevel(self.original_level)
        for handler in self.original_handlers:
            self.root_logger.addHandler(handler)
        self._tmp.cleanup()

    def run_cli(self, *argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr):
            code = main([str(a) for a in argv])
        return code, stdout.getvalue(), stderr.getvalue()

    def synth(self, name="data", *extra):
        out = self.tmp / name
        code, _, err = self.run_cli("synth", "--out", out, "--config", self.config, *extra)
        self.assertEqual(code, EXIT_OK, err)
        return out

class SynthCommandTests(CliTestCase):
    def test_synth_writes_reproducible_manifest(self):
        first = self.synth("first")
        second = self.synth("second")
        manifest = json.loads((first / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertEqual(len(manifest["records"]), 8)
        self.assertEqual((first / MANIFEST_NAME).read_bytes(), (second / MANIFEST_NAME).read_bytes())
        self.assertTrue((first / RESOLVED_CONFIG_NAME).exists())

    def test_flags_override_config(self):
        out = self.synth("flags", "--n", "4", "--unlabeled")
        manifest = json.loads((out / MANIFEST_NAME).read_text(encoding="utf-8"))
        self.assertEqual(len(manifest["records"]), 4)
        self.assertTrue(all(r["label"] is None for r in manifest["records"]))

    def test_invalid_class_mix_exits_with_config_error(self):
        code, _, err = self.run_cli("synth", "--out", self.tmp / "bad", "--class-mix", "0.5", "0.5", "0.5", "0.5")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("synth.class_mix", err)
        self.assertFalse((self.tmp / "bad" / MANIFEST_NAME).exists())

    def test_unknown_flag_exits_with_config_error(self):
        code, _, _ = self.run_cli("synth", "--out", self.tmp / "x", "--colour", "red")
        self.assertEqual(code, EXIT_CONFIG)

    def test_missing_config_file_exits_with_config_error(self):
        code, _, err = self.run_cli("synth", "--out", self.tmp / "x", "--config", self.tmp / "absent.json")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("not found", err)

class PipelineCommandTests(CliTestCase):
    def test_pretrain_then_eval_then_analyze(self):
        data = self.synth()
        run = self.tmp / "run"
        code, _, err = self.run_cli(
            "pretrain", "--data", data, "--out", run, "--config", self.config,
            "--mode", "wincon", "--snapshot-every", "1", "--dump-views", "2",
        )
        self.assertEqual(code, EXIT_OK, err)
        self.assertTrue((run / FINAL_CHECKPOINT_NAME).exists())
        metrics = [json.loads(line) for line in (run / METRICS_NAME).read_text(encoding="utf-8").splitlines()]
        self.assertEqual([m["step"] for m in metrics], [0, 1])
        self.assertTrue(all(math.isfinite(m["loss"]) for m in metrics))
        resolved = json.loads((run / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
        self.assertEqual(resolved["loss"]["mode"], "wincon")
        self.assertTrue((run / VIEWS_DIR / "bundle_000001_win.png").exists())

        code, _, err = self.run_cli(
            "eval", "--train", data, "--test", data, "--out", self.tmp / "eval",
            "--checkpoint", run / FINAL_CHECKPOINT_NAME, "--task", "knn",
        )
        self.assertEqual(code, EXIT_OK, err)
        report = json.loads((self.tmp / "eval" / "report_knn.json").read_text(encoding="utf-8"))
        self.assertEqual(report["task"], "knn")
        self.assertEqual(report["n_test"], 8)
        self.assertEqual(report["extras"]["encoder"], str(run / FINAL_CHECKPOINT_NAME))
        self.assertEqual(sum(map(sum, report["confusion"])), 8)
        self.assertLessEqual(report["L_uniform"], 0.0)

        snapshots = sorted((run / SNAPSHOT_DIR).glob("*.csv"))
        self.assertEqual(len(snapshots), 3)
        code, _, err = self.run_cli("analyze", *snapshots, "--out", self.tmp / "analysis")
        self.assertEqual(code, EXIT_OK, err)
        table = pd.read_csv(self.tmp / "analysis" / ANALYSIS_NAME)
        self.assertEqual(table["step"].tolist(), [0, 1, 2])
        self.assertTrue((table["uniform"] <= 0.0).all())
        self.assertTrue((table["align"] >= 0.0).all())
        pca = pd.read_csv(self.tmp / "analysis" / f"pca_{snapshots[0].stem}.csv")
        self.assertEqual(list(pca.columns), ["id", "label", "role", "pc1", "pc2"])
        self.assertEqual(len(pca), 16)

    def test_eval_without_checkpoint_uses_random_init(self):
        data = self.synth()
        code, _, err = self.run_cli(
            "eval", "--train", data, "--test", data, "--out", self.tmp / "eval",
            "--config", self.config, "--task", "linear",
        )
        self.assertEqual(code, EXIT_OK, err)
        report = json.loads((self.tmp / "eval" / "report_linear.json").read_text(encoding="utf-8"))
        self.assertEqual(report["extras"]["encoder"], "random-init")
        self.assertEqual(len(report["extras"]["history"]), 2)

    def test_resume_matches_uninterrupted_run(self):
        data = self.synth()
        code, _, err = self.run_cli(
            "pretrain", "--data", data, "--out", self.tmp / "full", "--config", self.config,
            "--epochs", "2", "--checkpoint-every", "1",
        )
        self.assertEqual(code, EXIT_OK, err)
        checkpoint = self.tmp / "full" / CHECKPOINT_DIR / "epoch_0001.pgcw"
        code, _, err = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "resumed", "--resume", checkpoint)
        self.assertEqual(code, EXIT_OK, err)
        self.assertEqual(
            (self.tmp / "full" / FINAL_CHECKPOINT_NAME).read_bytes(),
            (self.tmp / "resumed" / FINAL_CHECKPOINT_NAME).read_bytes(),
        )
        resolved = json.loads((self.tmp / "resumed" / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
        self.assertEqual(resolved["train"]["epochs"], 2)
        self.assertEqual(resolved["train"]["checkpoint_every"], 1)

    def test_resume_applies_run_controls_and_rejects_trajectory_changes(self):
        data = self.synth()
        code, _, err = self.run_cli(
            "pretrain", "--data", data, "--out", self.tmp / "full", "--config", self.config,
            "--epochs", "2", "--checkpoint-every", "1",
        )
        self.assertEqual(code, EXIT_OK, err)
        checkpoint = self.tmp / "full" / CHECKPOINT_DIR / "epoch_0001.pgcw"

        code, _, err = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "longer", "--resume", checkpoint, "--epochs", "5")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("train.epochs", err)
        self.assertFalse((self.tmp / "longer" / METRICS_NAME).exists())

        code, _, err = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "x", "--resume", checkpoint, "--config", self.config)
        self.assertEqual(code, EXIT_CONFIG)

        code, _, err = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "pooled", "--resume", checkpoint, "--workers", "2")
        self.assertEqual(code, EXIT_OK, err)
        resolved = json.loads((self.tmp / "pooled" / RESOLVED_CONFIG_NAME).read_text(encoding="utf-8"))
        self.assertEqual(resolved["train"]["workers"], 2)
        full = (self.tmp / "full" / METRICS_NAME).read_text(encoding="utf-8").splitlines()
        pooled = (self.tmp / "pooled" / METRICS_NAME).read_text(encoding="utf-8").splitlines()
        self.assertEqual(pooled, full[2:])

class FailureExitCodeTests(CliTestCase):
    def test_missing_dataset_exits_with_io_error(self):
        code, _, err = self.run_cli("pretrain", "--data", self.tmp / "nowhere", "--out", self.tmp / "run", "--config", self.config)
        self.assertEqual(code, EXIT_IO)
        self.assertIn("does not exist", err)

    def test_unreadable_snapshot_exits_with_io_error(self):
        bad = self.tmp / "bad.csv"
        bad.write_text("not,a,snapshot\n1,2,3\n", encoding="utf-8")
        code, _, _ = self.run_cli("analyze", bad, "--out", self.tmp / "analysis")
        self.assertEqual(code, EXIT_IO)

    def test_too_many_negatives_exit_with_config_error(self):
        data = self.synth()
        code, _, err = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "run", "--config", self.config, "--k", "8")
        self.assertEqual(code, EXIT_CONFIG)
        self.assertIn("loss.k", err)

    def test_non_finite_loss_exits_with_numerical_error(self):
        data = self.synth()
        bad = LossOutput(torch.tensor(float("nan")), math.nan, math.nan, 0.0, 0.0, math.nan)
        with patch("src.trainer.contrastive_loss", return_value=bad):
            code, _, _ = self.run_cli("pretrain", "--data", data, "--out", self.tmp / "run", "--config", self.config)
        self.assertEqual(code, EXIT_NUMERICAL)

if __name__ == "__main__":
    unittest.main()
