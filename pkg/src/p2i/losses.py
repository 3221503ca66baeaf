"""Training objectives for the encoder.

All terms operate on batched torch tensors in (N, Ch, H, W) layout and
return 0-d tensors, so they can be differentiated directly. Distances are
means of squares, which keeps magnitudes independent of image size.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .core import LossWeights, RandomSource
from .errors import ShapeMismatch, ZeroVectorAtTap
from .nn_utils import seeded_init

__all__ = [
    "FeatureExtractors", "LossBreakdown", "LossWeights", "PerceptualExtractor", "align_reg",
    "compute_losses", "multilayer_cosine_loss", "perceptual_dist", "pixel_mse", "total_loss",
]

NUM_TAPS = 5
ZERO_NORM = 1e-12


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {tuple(a.shape)} != {tuple(b.shape)}")


def pixel_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return ((a - b) ** 2).mean()


def align_reg(f_e: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Pull the encoder's image-shaped intermediate feature towards the real image."""
    _check_shapes(f_e, x)
    return ((f_e - x) ** 2).mean()


class PerceptualExtractor(nn.Module):
    """Frozen, randomly initialised three-layer conv stack."""

    def __init__(self, channels: int, widths=(16, 32, 32)):
        super().__init__()
        layers, prev = [], channels
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(prev, w, 3, stride=1 if i == 0 else 2, padding=1), nn.SiLU()]
            prev = w
        self.net = nn.Sequential(*layers)
        for m in self.net:
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        if x.dim() == 3:
            return self.net(x.unsqueeze(0))[0]
        return self.net(x)


def make_perceptual(channels: int, rng: RandomSource) -> PerceptualExtractor:
    return seeded_init(lambda: PerceptualExtractor(channels), rng)


def perceptual_dist(extractor: Callable, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_shapes(a, b)
    return ((extractor(a) - extractor(b)) ** 2).mean()


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity of flattened features; rows are samples."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    if bool((na < ZERO_NORM).any()) or bool((nb < ZERO_NORM).any()):
        raise ZeroVectorAtTap("feature vector with (near-)zero norm")
    return (a * b).sum(dim=1) / (na * nb)


def multilayer_cosine_loss(taps_a: Sequence[torch.Tensor], taps_b: Sequence[torch.Tensor],
                           batched: bool = False) -> torch.Tensor:
    """Sum over tap levels of ``1 - cos(a_j, b_j)``.

    With ``batched=False`` each tap is one feature vector (any shape); with
    ``batched=True`` the leading dimension indexes samples and the result is
    the per-sample sum averaged over the batch.
    """
    if len(taps_a) != len(taps_b):
        raise ShapeMismatch(f"{len(taps_a)} taps vs {len(taps_b)}")
    total = 0.0
    for a, b in zip(taps_a, taps_b):
        if a.shape != b.shape:
            raise ShapeMismatch(f"tap shape {tuple(a.shape)} != {tuple(b.shape)}")
        if not batched:
            a, b = a.reshape(1, -1), b.reshape(1, -1)
        total = total + (1.0 - _cosine(a, b))
    return total.mean()


@dataclass
class FeatureExtractors:
    """Frozen feature networks used by the reconstruction losses.

    ``identity`` and ``parse`` map a batch to a list of exactly five tap
    tensors. ``parse`` may be None, in which case that term is zero.
    """

    perceptual: Callable[[torch.Tensor], torch.Tensor]
    identity: Callable[[torch.Tensor], list] | None = None
    parse: Callable[[torch.Tensor], list] | None = None


@dataclass
class LossBreakdown:
    mse: float = 0.0
    lpips: float = 0.0
    id: float = 0.0
    parse: float = 0.0
    align_reg: float = 0.0
    recon: float = 0.0
    total: float = 0.0

    @classmethod
    def compose(cls, weights: LossWeights, mse=0.0, lpips=0.0, id=0.0, parse=0.0,
                align_reg=0.0) -> "LossBreakdown":
        recon = mse + weights.lpips * lpips + weights.id * id + weights.parse * parse
        return cls(mse, lpips, id, parse, align_reg, recon, recon + weights.align_reg * align_reg)

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> list[float]:
        return [getattr(self, name) for name in self.columns()]


def _taps(extractor, x):
    taps = extractor(x)
    if len(taps) != NUM_TAPS:
        raise ShapeMismatch(f"extractor exposes {len(taps)} taps, expected {NUM_TAPS}")
    return taps


def compute_losses(weights: LossWeights, extractors: FeatureExtractors, recon: torch.Tensor,
                   x: torch.Tensor, f_e: torch.Tensor) -> tuple[torch.Tensor, LossBreakdown]:
    """Differentiable total loss plus its float breakdown."""
    terms = {
        "mse": pixel_mse(recon, x),
        "lpips": perceptual_dist(extractors.perceptual, recon, x),
        "align_reg": align_reg(f_e, x),
    }
    batched = recon.dim() == 4
    if extractors.identity is not None:
        terms["id"] = multilayer_cosine_loss(_taps(extractors.identity, recon),
                                             _taps(extractors.identity, x), batched=batched)
    if extractors.parse is not None:
        terms["parse"] = multilayer_cosine_loss(_taps(extractors.parse, recon),
                                                _taps(extractors.parse, x), batched=batched)
    zero = recon.new_zeros(())
    recon_loss = (terms["mse"] + weights.lpips * terms["lpips"]
                  + weights.id * terms.get("id", zero) + weights.parse * terms.get("parse", zero))
    total = recon_loss + weights.align_reg * terms["align_reg"]
    breakdown = LossBreakdown.compose(weights, **{k: float(v.detach()) for k, v in terms.items()})
    return total, breakdown


def total_loss(weights: LossWeights, extractors: FeatureExtractors, recon_image: torch.Tensor,
               x: torch.Tensor, f_e: torch.Tensor) -> LossBreakdown:
    with torch.no_grad():
        return compute_losses(weights, extractors, recon_image, x, f_e)[1]
