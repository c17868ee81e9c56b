#!/usr/bin/python3
import os
import unittest
import numpy as np
from pathlib import Path
from dataclasses import replace
from tempfile import TemporaryDirectory
from src.cli import analyze_snapshot
from src.synthgen import generate_dataset
from src.evalsuite import zero_shot_eval
from src.services.dataset_store import Corpus
from src.services.embedding_store import read_snapshot
from src.trainer import SNAPSHOT_DIR, build_encoder, build_state, fit, steps_per_epoch
from src.models import ContrastMode, EncoderConfig, EvalConfig, LossConfig, PriorKind, RunConfig, SynthSpec, TrainConfig, ViewConfig

ACCEPTANCE = os.environ.get("PGCON_ACCEPTANCE") == "1"
N_TRAIN, N_TEST, STEPS, SEEDS = 2000, 400, 2000, (0, 1, 2)

def reference_config(seed, mode=ContrastMode.PGCON, prior=PriorKind.REDNESS, **train):
    batch_size = 64
    epochs = -(-STEPS // steps_per_epoch(N_TRAIN, batch_size))
    return RunConfig(
        views=ViewConfig(prior=prior),
        encoder=EncoderConfig(embedding_dim=32),
        loss=LossConfig(mode=mode),
        train=TrainConfig(batch_size=batch_size, epochs=epochs, seed=seed, **train),
        eval=EvalConfig(seed=seed),
    )

@unittest.skipUnless(ACCEPTANCE, "set PGCON_ACCEPTANCE=1 for the long pretraining experiments")
class PretrainingAcceptanceTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        records = generate_dataset(SynthSpec(n_images=N_TRAIN + N_TEST, seed=21))
        corpus = Corpus.from_records(records)
        cls.train = corpus.subset(range(N_TRAIN))
        cls.test = corpus.subset(range(N_TRAIN, N_TRAIN + N_TEST))

    def pretrained_accuracy(self, config):
        with TemporaryDirectory() as tmp:
            state = fit(build_state(config, len(self.train)), self.train, Path(tmp))
        return zero_shot_eval(state.encoder, self.train, self.test, config.views, config.eval).top1_accuracy

    def test_prior_views_beat_random_crops_and_random_init(self):
        prior, random_crop, random_init = [], [], []
        for seed in SEEDS:
            config = reference_config(seed)
            prior.append(self.pretrained_accuracy(config))
            random_crop.append(self.pretrained_accuracy(reference_config(seed, prior=PriorKind.RANDOM)))
            random_init.append(zero_shot_eval(build_encoder(config), self.train, self.test, config.views, config.eval).top1_accuracy)
        self.assertGreaterEqual(np.mean(prior) - np.mean(random_crop), 0.05)
        self.assertGreaterEqual(np.mean(prior) - np.mean(random_init), 0.15)

    def test_wincon_pushes_prior_views_away_from_win_views(self):
        config = reference_config(0, mode=ContrastMode.WINCON, snapshot_every=STEPS // 4)
        config = replace(config, train=replace(config.train, probe_size=128))
        with TemporaryDirectory() as tmp:
            fit(build_state(config, len(self.train)), self.train, Path(tmp))
            paths = sorted((Path(tmp) / SNAPSHOT_DIR).glob("*.csv"))
            first = analyze_snapshot(read_snapshot(paths[0]), paths[0].name)
            last = analyze_snapshot(read_snapshot(paths[-1]), paths[-1].name)
        self.assertEqual(first["step"], 0)
        self.assertLess(last["win_zp_cos"], first["win_zp_cos"])
        self.assertLess(last["win_zp_cos"], last["bank_zp_cos"])

if __name__ == "__main__":
    unittest.main()
