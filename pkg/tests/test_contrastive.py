#!/usr/bin/python3
import math
import unittest
import numpy as np
import torch
import torch.nn.functional as F
from src.models import ContrastMode, LossConfig

from src.contrastive import (
    ContrastiveError,
    MemoryBank,
    contrastive_loss,
    cosine_score,
    info_nce,
    pgcon_loss,
    sample_negatives,
    wincon_loss
)

def unit_rows(n, d, seed):
    generator = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=generator, dtype=torch.float64), dim=1)

def basis(d, i):
    vector = torch.zeros(d, dtype=torch.float64)
    vector[i] = 1.0
    return vector

class InfoNceTests(unittest.TestCase):
    def test_equal_similarities_give_log_of_list_size(self):
        e1, e2 = basis(8, 0), basis(8, 1)
        value = info_nce(e1, e2, e2.repeat(200, 1), tau=0.07)
        self.assertAlmostEqual(float(value), math.log(201), delta=1e-4)

    def test_perfect_positive_against_orthogonal_negatives(self):
        e1, e2 = basis(8, 0), basis(8, 1)
        value = info_nce(e1, e1, e2.repeat(200, 1), tau=0.07)
        self.assertAlmostEqual(float(value), 1.25e-4, delta=1e-6)
        single = info_nce(e1, e1, e2.reshape(1, -1), tau=0.07)
        self.assertAlmostEqual(float(single), math.log1p(math.exp(-1 / 0.07)), delta=1e-12)

    def test_value_is_non_negative_and_stable_for_small_tau(self):
        anchor, positive = unit_rows(2, 16, seed=0)
        value = info_nce(anchor, positive, unit_rows(50, 16, seed=1), tau=1e-3)
        self.assertTrue(torch.isfinite(value))
        self.assertGreaterEqual(float(value), 0.0)

    def test_empty_negatives_raise(self):
        e1 = basis(4, 0)
        with self.assertRaises(ContrastiveError):
            info_nce(e1, e1, torch.empty(0, 4, dtype=torch.float64), tau=0.07)

    def test_cosine_score_of_unit_vectors_is_dot_product(self):
        u, v = unit_rows(2, 5, seed=2)
        self.assertAlmostEqual(float(cosine_score(u, v)), float(u @ v), places=12)

class MemoryBankTests(unittest.TestCase):
    def test_random_rows_are_unit_norm(self):
        bank = MemoryBank.random(30, 6, seed=0, dtype=torch.float64)
        np.testing.assert_allclose(bank.rows.norm(dim=1).numpy(), np.ones(30), atol=1e-12)

    def test_ema_update_of_orthogonal_inputs(self):
        rows = torch.stack([basis(4, 0), basis(4, 2), basis(4, 3)])
        bank = MemoryBank(rows, momentum=0.5)
        bank.update([0], basis(4, 1).reshape(1, -1))
        np.testing.assert_allclose(bank.rows[0].numpy(), [0.70711, 0.70711, 0.0, 0.0], atol=1e-5)
        self.assertTrue(torch.equal(bank.rows[1:], rows[1:]))

    def test_update_keeps_rows_unit_norm(self):
        bank = MemoryBank.random(20, 8, seed=1, dtype=torch.float64)
        bank.update([3, 4, 5], unit_rows(3, 8, seed=3))
        np.testing.assert_allclose(bank.rows.norm(dim=1).numpy(), np.ones(20), atol=1e-6)

    def test_antipodal_update_takes_the_new_embedding(self):
        bank = MemoryBank.random(6, 5, seed=2, dtype=torch.float64)
        target = -bank.rows[0:1].clone()
        bank.update([0, 1], torch.cat([target, unit_rows(1, 5, seed=9)]))
        self.assertTrue(torch.allclose(bank.rows[0], target[0], atol=1e-12))
        np.testing.assert_allclose(bank.rows.norm(dim=1).numpy(), np.ones(6), atol=1e-12)

    def test_update_rejects_out_of_range_index(self):
        bank = MemoryBank.random(5, 4, seed=0)
        with self.assertRaises(ContrastiveError):
            bank.update([5], torch.ones(1, 4))

    def test_sample_negatives_excludes_anchor_and_repeats(self):
        bank = MemoryBank(torch.eye(12, dtype=torch.float64))
        rng = np.random.default_rng(0)
        for exclude in range(12):
            drawn = bank.sample_indices(exclude, 11, rng)
            self.assertEqual(sorted(drawn.tolist()), [i for i in range(12) if i != exclude])

    def test_sample_negatives_is_deterministic_and_detached(self):
        bank = MemoryBank.random(40, 4, seed=2)
        bank.rows.requires_grad_(True)
        first = sample_negatives(bank, exclude=7, k=10, seed=11)
        second = sample_negatives(bank, exclude=7, k=10, seed=11)
        self.assertTrue(torch.equal(first, second))
        self.assertFalse(first.requires_grad)

    def test_too_many_negatives_raise(self):
        bank = MemoryBank.random(5, 4, seed=0)
        with self.assertRaises(ContrastiveError):
            sample_negatives(bank, exclude=0, k=5, seed=0)

class ObjectiveTests(unittest.TestCase):
    def setUp(self):
        self.bank = MemoryBank.random(50, 8, seed=4, dtype=torch.float64)
        self.cfg = LossConfig(k=6, mode=ContrastMode.WINCON)

    def test_empty_win_list_reduces_to_pgcon_bit_for_bit(self):
        cfg = LossConfig(k=10)
        rng = np.random.default_rng(0)
        for trial in range(100):
            batch = int(rng.integers(1, 6))
            indices = rng.choice(50, size=batch, replace=False).tolist()
            z_p, z_d = unit_rows(batch, 8, seed=trial), unit_rows(batch, 8, seed=1000 + trial)
            empty = torch.empty(0, 8, dtype=torch.float64)
            reduced = wincon_loss(z_p, z_d, indices, empty, self.bank, cfg, seed=trial, allow_empty_win=True)
            plain = pgcon_loss(z_p, z_d, indices, self.bank, cfg, seed=trial)
            self.assertTrue(torch.equal(reduced.loss, plain.loss))

    def test_wincon_appends_every_win_embedding_to_each_negative_list(self):
        indices = [3, 17, 41]
        z_p, z_d, z_win = unit_rows(3, 8, 0), unit_rows(3, 8, 1), unit_rows(3, 8, 2)
        output = wincon_loss(z_p, z_d, indices, z_win, self.bank, self.cfg, seed=9)

        rng = np.random.default_rng(9)
        terms = []
        for row, i in enumerate(indices):
            neg_p = self.bank.gather(self.bank.sample_indices(i, 6, rng))
            neg_d = self.bank.gather(self.bank.sample_indices(i, 6, rng))
            term_p = info_nce(z_p[row], self.bank.rows[i], torch.cat([neg_p, z_win]), 0.07)
            term_d = info_nce(z_p[row], z_d[row], torch.cat([neg_d, z_win]), 0.07)
            terms.append(0.5 * term_p + 0.5 * term_d)
        self.assertAlmostEqual(float(output.loss), float(torch.stack(terms).mean()), delta=1e-12)

    def test_pgcon_matches_per_instance_info_nce(self):
        cfg = LossConfig(k=6, alpha=0.3, beta=0.7)
        indices = [0, 25]
        z_p, z_d = unit_rows(2, 8, 5), unit_rows(2, 8, 6)
        output = pgcon_loss(z_p, z_d, indices, self.bank, cfg, seed=1)
        rng = np.random.default_rng(1)
        expected = []
        for row, i in enumerate(indices):
            neg_p = self.bank.gather(self.bank.sample_indices(i, 6, rng))
            neg_d = self.bank.gather(self.bank.sample_indices(i, 6, rng))
            expected.append(0.3 * info_nce(z_p[row], self.bank.rows[i], neg_p, 0.07) + 0.7 * info_nce(z_p[row], z_d[row], neg_d, 0.07))
        self.assertAlmostEqual(float(output.loss), float(torch.stack(expected).mean()), delta=1e-12)

    def test_wincon_requires_win_embeddings(self):
        z = unit_rows(2, 8, 0)
        with self.assertRaises(ContrastiveError):
            wincon_loss(z, z, [0, 1], None, self.bank, self.cfg, seed=0)
        with self.assertRaises(ContrastiveError):
            wincon_loss(z, z, [0, 1], torch.empty(0, 8, dtype=torch.float64), self.bank, self.cfg, seed=0)

    def test_wincon_with_zero_bank_negatives_uses_win_only(self):
        cfg = LossConfig(k=0, mode=ContrastMode.WINCON)
        bank = MemoryBank.random(1, 8, seed=0, dtype=torch.float64)
        z_p, z_d, z_win = unit_rows(1, 8, 0), unit_rows(1, 8, 1), unit_rows(1, 8, 2)
        output = wincon_loss(z_p, z_d, [0], z_win, bank, cfg, seed=0)
        self.assertTrue(torch.isfinite(output.loss))
        with self.assertRaises(ContrastiveError):
            pgcon_loss(z_p, z_d, [0], bank, LossConfig(k=0), seed=0)

    def test_bank_receives_no_gradient(self):
        self.bank.rows.requires_grad_(True)
        z_p = unit_rows(2, 8, 3).requires_grad_(True)
        z_d, z_win = unit_rows(2, 8, 4), unit_rows(2, 8, 5).requires_grad_(True)
        loss = wincon_loss(z_p, z_d, [1, 2], z_win, self.bank, self.cfg, seed=0).loss
        bank_grad, win_grad = torch.autograd.grad(loss, [self.bank.rows, z_win], allow_unused=True)
        self.assertIsNone(bank_grad)
        self.assertGreater(float(win_grad.abs().sum()), 0.0)

    def test_detach_win_stops_gradient_through_win(self):
        cfg = LossConfig(k=6, mode=ContrastMode.WINCON, detach_win=True)
        z_p, z_d = unit_rows(2, 8, 3).requires_grad_(True), unit_rows(2, 8, 4)
        z_win = unit_rows(2, 8, 5).requires_grad_(True)
        loss = wincon_loss(z_p, z_d, [1, 2], z_win, self.bank, cfg, seed=0).loss
        (win_grad,) = torch.autograd.grad(loss, [z_win], allow_unused=True)
        self.assertIsNone(win_grad)

    def test_dispatch_follows_mode(self):
        z_p, z_d, z_win = unit_rows(2, 8, 0), unit_rows(2, 8, 1), unit_rows(2, 8, 2)
        pg = contrastive_loss(z_p, z_d, [0, 1], z_win, self.bank, LossConfig(k=6), seed=3)
        self.assertTrue(torch.equal(pg.loss, pgcon_loss(z_p, z_d, [0, 1], self.bank, LossConfig(k=6), seed=3).loss))
        win = contrastive_loss(z_p, z_d, [0, 1], z_win, self.bank, self.cfg, seed=3)
        self.assertFalse(torch.equal(pg.loss, win.loss))
        self.assertEqual(set(win.to_record()), {"loss", "term_p", "term_d", "mean_pos_sim", "mean_neg_sim", "mean_win_sim"})

if __name__ == "__main__":
    unittest.main()
