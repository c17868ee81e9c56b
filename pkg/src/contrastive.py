"""
PGCon and WINCon objectives, the cosine score, negative sampling and the
exponential-moving-average memory bank of prior-view representations.
"""

from __future__ import annotations

import math
import logging
import numpy as np
import torch
import torch.nn.functional as F
from dataclasses import dataclass
from typing import Optional, Sequence
from src.models import ContrastMode, LossConfig

logger = logging.getLogger(__name__)

class ContrastiveError(ValueError):
    """Raised for invalid loss inputs, sampling requests or bank updates."""

class MemoryBank:
    """
    n x d matrix of unit rows R_i, one per dataset instance.
    """

    def __init__(self, rows: torch.Tensor, momentum: float = 0.5):
        if rows.ndim != 2:
            raise ContrastiveError(f"bank rows must be n x d, got {tuple(rows.shape)}")
        if not 0.0 < momentum < 1.0:
            raise ContrastiveError("bank momentum must lie in (0, 1)")
        self.rows = rows.detach().clone()
        self.momentum = momentum

    @classmethod
    def random(cls, n: int, d: int, seed: int, momentum: float = 0.5, dtype: torch.dtype = torch.float32) -> "MemoryBank":
        """Rows drawn uniformly on the unit sphere."""
        generator = torch.Generator().manual_seed(seed)
        rows = F.normalize(torch.randn(n, d, generator=generator, dtype=torch.float64), dim=1)
        return cls(rows.to(dtype), momentum)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def _check_indices(self, indices: Sequence[int]) -> torch.Tensor:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        if idx.numel() and (idx.min() < 0 or idx.max() >= self.n):
            raise ContrastiveError(f"bank index out of range for a bank of {self.n} rows")
        return idx

    def gather(self, indices: Sequence[int]) -> torch.Tensor:
        """Rows as gradient constants."""
        return self.rows[self._check_indices(indices)].detach().clone()

    def sample_indices(self, exclude: int, k: int, rng: np.random.Generator) -> np.ndarray:
        """
        k distinct indices drawn uniformly from {0..n-1} without the excluded one.
        """
        if k > self.n - 1:
            raise ContrastiveError(f"cannot draw {k} negatives from {self.n - 1} other instances")
        if not 0 <= exclude < self.n:
            raise ContrastiveError(f"excluded index {exclude} outside bank of {self.n} rows")
        drawn = rng.choice(self.n - 1, size=k, replace=False)
        return drawn + (drawn >= exclude)

    def update(self, indices: Sequence[int], z: torch.Tensor) -> None:
        """
        R_i <- normalize(m * R_i + (1 - m) * z_i) for each batch entry; other rows untouched.
        """
        idx = self._check_indices(indices)
        if z.shape != (idx.numel(), self.d):
            raise ContrastiveError(f"expected {idx.numel()} x {self.d} embeddings, got {tuple(z.shape)}")
        with torch.no_grad():
            z = z.detach().to(self.rows.dtype)
            blended = self.momentum * self.rows[idx] + (1.0 - self.momentum) * z
            # an antipodal z cancels the row; the new embedding replaces it
            degenerate = blended.norm(dim=1, keepdim=True) <= 1e-12
            self.rows[idx] = F.normalize(torch.where(degenerate, z, blended), dim=1)

def sample_negatives(bank: MemoryBank, exclude: int, k: int, seed: int) -> torch.Tensor:
    """
    k bank rows other than row `exclude`, sampled without replacement; no gradient.
    """
    rng = np.random.default_rng(seed)
    return bank.gather(bank.sample_indices(exclude, k, rng))

def cosine_score(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of unit vectors, i.e. their dot product."""
    return (u * v).sum(dim=-1)

def info_nce(anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor, tau: float) -> torch.Tensor:
    """
    -log softmax of the positive logit against k negatives, stabilised by log-sum-exp.
    """
    if negatives.ndim != 2 or negatives.shape[0] == 0:
        raise ContrastiveError("info_nce needs at least one negative")
    logits = torch.cat([cosine_score(anchor, positive).reshape(1), negatives @ anchor]) / tau
    return torch.logsumexp(logits, dim=0) - logits[0]

def _nce_rows(
    anchors: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    extra_logits: torch.Tensor,
    tau: float,
) -> torch.Tensor:
    # per-row InfoNCE; extra_logits (B x W) are appended after the bank negatives
    pos = cosine_score(anchors, positives).unsqueeze(1)
    neg = torch.einsum("bd,bkd->bk", anchors, negatives)
    logits = torch.cat([pos, neg, extra_logits], dim=1) / tau
    return torch.logsumexp(logits, dim=1) - logits[:, 0]

@dataclass
class LossOutput:
    """
    Scalar loss plus the diagnostics recorded per step.
    """

    loss: torch.Tensor
    term_p: float
    term_d: float
    mean_pos_sim: float
    mean_neg_sim: float
    mean_win_sim: float

    def to_record(self) -> dict:
        return {
            "loss": float(self.loss.detach()),
            "term_p": self.term_p,
            "term_d": self.term_d,
            "mean_pos_sim": self.mean_pos_sim,
            "mean_neg_sim": self.mean_neg_sim,
            "mean_win_sim": self.mean_win_sim,
        }

def _contrast(
    z_p: torch.Tensor,
    z_d: torch.Tensor,
    indices: Sequence[int],
    bank: MemoryBank,
    cfg: LossConfig,
    seed: int,
    z_win: Optional[torch.Tensor],
) -> LossOutput:
    batch = len(indices)
    if z_p.shape != (batch, bank.d) or z_d.shape != (batch, bank.d):
        raise ContrastiveError(f"expected z_p and z_d of shape {batch} x {bank.d}")
    n_win = 0 if z_win is None else z_win.shape[0]
    if cfg.k + n_win == 0:
        raise ContrastiveError("no negatives: k is 0 and no WIN embeddings were given")
    rng = np.random.default_rng(seed)
    neg_p_idx, neg_d_idx = [], []
    for i in indices:
        neg_p_idx.append(bank.sample_indices(int(i), cfg.k, rng))
        neg_d_idx.append(bank.sample_indices(int(i), cfg.k, rng))
    neg_p = bank.gather(np.concatenate(neg_p_idx)).reshape(batch, cfg.k, bank.d)
    neg_d = bank.gather(np.concatenate(neg_d_idx)).reshape(batch, cfg.k, bank.d)
    r_i = bank.gather(indices)
    if z_win is None:
        extra = z_p.new_zeros((batch, 0))
    else:
        extra = z_p @ z_win.T
    term_p = _nce_rows(z_p, r_i, neg_p, extra, cfg.tau)
    term_d = _nce_rows(z_p, z_d, neg_d, extra, cfg.tau)
    loss = (cfg.alpha * term_p + cfg.beta * term_d).mean()
    with torch.no_grad():
        pos = torch.cat([cosine_score(z_p, r_i), cosine_score(z_p, z_d)])
        neg = torch.cat([torch.einsum("bd,bkd->bk", z_p, neg_p), torch.einsum("bd,bkd->bk", z_p, neg_d)], dim=1)
        win_sim = math.nan
        if n_win == batch and batch > 0:
            win_sim = float(cosine_score(z_p, z_win).mean())
        return LossOutput(
            loss=loss,
            term_p=float(term_p.mean()),
            term_d=float(term_d.mean()),
            mean_pos_sim=float(pos.mean()),
            mean_neg_sim=float(neg.mean()) if neg.numel() else math.nan,
            mean_win_sim=win_sim,
        )

def pgcon_loss(
    z_p: torch.Tensor,
    z_d: torch.Tensor,
    indices: Sequence[int],
    bank: MemoryBank,
    cfg: LossConfig,
    seed: int,
) -> LossOutput:
    """
    alpha * InfoNCE(z_p, R_i | R_j) + beta * InfoNCE(z_p, z_d | R_j), averaged over the
    batch, with two independent k-draws of bank negatives per instance.
    """
    return _contrast(z_p, z_d, indices, bank, cfg, seed, None)

def wincon_loss(
    z_p: torch.Tensor,
    z_d: torch.Tensor,
    indices: Sequence[int],
    z_win: Optional[torch.Tensor],
    bank: MemoryBank,
    cfg: LossConfig,
    seed: int,
    allow_empty_win: bool = False,
) -> LossOutput:
    """
    PGCon with all B WIN embeddings of the batch appended to every negative list.
    """
    if z_win is None:
        raise ContrastiveError("WINCon needs the batch's WIN embeddings")
    if z_win.shape[0] == 0:
        if not allow_empty_win:
            raise ContrastiveError("WINCon got an empty WIN batch")
        return _contrast(z_p, z_d, indices, bank, cfg, seed, None)
    if z_win.shape != z_p.shape:
        raise ContrastiveError(f"expected {tuple(z_p.shape)} WIN embeddings, got {tuple(z_win.shape)}")
    if cfg.detach_win:
        z_win = z_win.detach()
    return _contrast(z_p, z_d, indices, bank, cfg, seed, z_win)

def contrastive_loss(
    z_p: torch.Tensor,
    z_d: torch.Tensor,
    indices: Sequence[int],
    z_win: Optional[torch.Tensor],
    bank: MemoryBank,
    cfg: LossConfig,
    seed: int,
) -> LossOutput:
    """Dispatches on cfg.mode."""
    if cfg.mode is ContrastMode.WINCON:
        return wincon_loss(z_p, z_d, indices, z_win, bank, cfg, seed)
    return pgcon_loss(z_p, z_d, indices, bank, cfg, seed)
