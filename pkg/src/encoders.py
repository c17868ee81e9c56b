"""
Small convolutional encoders: f_theta for prior and WIN views, h_phi for jigsaw tiles.
"""

from __future__ import annotations

import math
import logging
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from typing import Callable, Dict, Iterable, Optional
from src.models import EncoderConfig

logger = logging.getLogger(__name__)

N_TILES = 9

class EncoderError(ValueError):
    """Raised for malformed encoder inputs or gradient requests."""

class TinyConv(nn.Module):
    """
    Three stride-2 3x3 convolutions with ReLU, followed by global average pooling.
    """

    def __init__(self, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c1, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c1, c2, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(c2, c3, kernel_size=3, stride=2, padding=1),
            nn.ReLU(),
        )
        self.out_channels = c3

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x).mean(dim=(2, 3))

def _init_uniform_he(modules: Iterable[nn.Module], generator: torch.Generator) -> None:
    with torch.no_grad():
        for module in modules:
            if not isinstance(module, (nn.Conv2d, nn.Linear)):
                continue
            fan_in = module.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            module.weight.uniform_(-bound, bound, generator=generator)
            if module.bias is not None:
                module.bias.uniform_(-1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in), generator=generator)

class PriorGuidedEncoder(nn.Module):
    """
    Holds both encoder paths. f_theta encodes prior and WIN views; h_phi encodes
    each jigsaw tile with its own trunk and projection, then compresses the nine
    tile embeddings with one more fully connected layer.
    """

    def __init__(self, config: EncoderConfig, view_size: int = 120, tile_size: int = 40):
        super().__init__()
        self.config = config
        self.view_size = view_size
        self.tile_size = tile_size
        d = config.embedding_dim
        self.f_trunk = TinyConv(config.channels)
        self.f_head = nn.Linear(self.f_trunk.out_channels, d)
        self.h_trunk = self.f_trunk if config.share_trunk else TinyConv(config.channels)
        self.h_tile_head = nn.Linear(self.h_trunk.out_channels, d)
        self.h_aggregate = nn.Linear(N_TILES * d, d)
        _init_uniform_he(self.modules(), torch.Generator().manual_seed(config.seed))

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def _check_views(self, views: torch.Tensor, size: int, what: str) -> None:
        if views.ndim != 4 or views.shape[1] != 3 or tuple(views.shape[2:]) != (size, size):
            raise EncoderError(f"{what}: expected B x 3 x {size} x {size}, got {tuple(views.shape)}")

    def _encode_f(self, views: torch.Tensor) -> torch.Tensor:
        self._check_views(views, self.view_size, "f_theta input")
        return F.normalize(self.f_head(self.f_trunk(views)), dim=1)

    def encode_prior(self, v_p: torch.Tensor) -> torch.Tensor:
        """B x 3 x S x S prior views to B x d unit embeddings z_p."""
        return self._encode_f(v_p)

    def encode_win(self, v_win: torch.Tensor) -> torch.Tensor:
        """Same parameters as encode_prior: z_win = f_theta(v_win)."""
        return self._encode_f(v_win)

    def encode_jigsaw(self, tiles: torch.Tensor) -> torch.Tensor:
        """B x 9 x 3 x t x t tiles (in presented order) to B x d unit embeddings z_d."""
        if tiles.ndim != 5 or tiles.shape[1] != N_TILES:
            raise EncoderError(f"h_phi input: expected B x {N_TILES} tiles, got {tuple(tiles.shape)}")
        batch = tiles.shape[0]
        flat = tiles.reshape(batch * N_TILES, *tiles.shape[2:])
        self._check_views(flat, self.tile_size, "h_phi tile")
        per_tile = self.h_tile_head(self.h_trunk(flat))
        return F.normalize(self.h_aggregate(per_tile.reshape(batch, N_TILES * self.embedding_dim)), dim=1)

def compute_gradients(loss: torch.Tensor, module: nn.Module, retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """
    Reverse-mode gradients of a scalar loss for every named parameter of module.

    Frozen parameters and parameters the loss does not depend on get zeros.
    """
    if not isinstance(loss, torch.Tensor) or loss.ndim != 0:
        raise EncoderError("loss must be a scalar tensor")
    if loss.grad_fn is None:
        raise EncoderError("no recorded forward pass: the loss does not depend on any trainable tensor")
    named = list(module.named_parameters())
    trainable = [(name, p) for name, p in named if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in trainable], retain_graph=retain_graph, allow_unused=True)
    by_name = {name: (g if g is not None else torch.zeros_like(p)) for (name, p), g in zip(trainable, grads)}
    return {name: by_name.get(name, torch.zeros_like(p)) for name, p in named}

def backward(loss: torch.Tensor, module: nn.Module) -> Dict[str, torch.Tensor]:
    """
    Computes parameter gradients and stores them on .grad for the optimizer.
    """
    grads = compute_gradients(loss, module)
    for name, p in module.named_parameters():
        if p.requires_grad:
            p.grad = grads[name]
    return grads

def make_optimizer(module: nn.Module, momentum: float = 0.9, weight_decay: float = 1e-4) -> torch.optim.SGD:
    params = [p for p in module.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=0.0, momentum=momentum, weight_decay=weight_decay)

def sgd_step(optimizer: torch.optim.SGD, lr: float) -> None:
    """
    One SGD update at the given learning rate:
    v <- momentum * v + grad + weight_decay * param; param <- param - lr * v.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()

def max_relative_gradient_error(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Dict[str, torch.Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """
    Compares autograd gradients with central finite differences.

    loss_fn must be deterministic. With max_entries set, that many coordinates
    per tensor are checked, chosen with a seeded generator.
    """
    tensors = list(parameters.values())
    analytic = torch.autograd.grad(loss_fn(), tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, analytic):
        grad = torch.zeros_like(tensor) if grad is None else grad
        flat, flat_grad = tensor.data.view(-1), grad.reshape(-1)
        count = flat.numel()
        entries = range(count) if max_entries is None or max_entries >= count else rng.choice(count, max_entries, replace=False)
        for index in entries:
            original = flat[index].item()
            with torch.no_grad():
                flat[index] = original + h
                plus = loss_fn().item()
                flat[index] = original - h
                minus = loss_fn().item()
                flat[index] = original
            numeric = (plus - minus) / (2.0 * h)
            exact = flat_grad[index].item()
            denom = max(abs(exact), abs(numeric), floor)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
