"""Prediction alignment encoder and its composition with a frozen generator.

The encoder takes a log-prepared prediction vector through a linear layer
and a deconvolution stack to an image-shaped feature ``f_E``, runs that
through a small residual backbone, pools and concatenates every block's
output, and maps the result to ``L`` latent rows with independent heads.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import RandomSource, RunConfig
from .errors import ShapeMismatch
from .nn_utils import module_hash, seeded_init


@dataclass(frozen=True)
class EncoderSpec:
    num_classes: int
    height: int = 32
    width: int = 32
    channels: int = 3
    latent_layers: int = 6
    latent_dim: int = 8
    stem_channels: int = 32
    deconv_widths: tuple[int, ...] = (64, 32, 16)
    block_widths: tuple[int, ...] = (16, 32, 64, 64)
    pool_grid: int = 1

    def __post_init__(self):
        scale = 2 ** len(self.deconv_widths)
        if self.height % scale or self.width % scale:
            raise ShapeMismatch(f"image {self.height}x{self.width} is not reachable with "
                                f"{len(self.deconv_widths)} stride-2 deconvolutions")
        if self.num_classes < 2:
            raise ShapeMismatch("encoder input needs at least two classes")

    @property
    def start_size(self) -> tuple[int, int]:
        scale = 2 ** len(self.deconv_widths)
        return (self.height // scale, self.width // scale)

    @property
    def flat_width(self) -> int:
        """Width of the concatenated multi-scale feature fed to the heads."""
        return sum(self.block_widths) * self.pool_grid ** 2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.latent_layers, self.latent_dim)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "EncoderSpec":
        enc = cfg.encoder
        return cls(cfg.num_classes, cfg.height, cfg.width, cfg.channels, cfg.latent_layers,
                   cfg.latent_dim, enc.stem_channels, tuple(enc.deconv_widths),
                   tuple(enc.block_widths), enc.pool_grid)


# full-size shape reference: 64x64 faces, 18x512 extended latent, 8,640-wide pooled feature
FULL_SCALE = dict(height=64, width=64, channels=3, latent_layers=18, latent_dim=512,
                   stem_channels=64, deconv_widths=(256, 128, 64, 32),
                   block_widths=(64, 128, 256, 512), pool_grid=3)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1, stride=stride) if (cin != cout or stride != 1) else nn.Identity()

    def forward(self, x):
        return F.silu(self.conv2(F.silu(self.conv1(x))) + self.skip(x))


class PredictionAlignmentEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        h0, w0 = spec.start_size
        self.fc = nn.Linear(spec.num_classes, spec.stem_channels * h0 * w0)
        deconvs, prev = [], spec.stem_channels
        for width in spec.deconv_widths:
            deconvs += [nn.ConvTranspose2d(prev, width, 4, stride=2, padding=1), nn.SiLU()]
            prev = width
        self.deconv = nn.Sequential(*deconvs)
        self.to_image = nn.Conv2d(prev, spec.channels, 3, padding=1)
        blocks, prev = [], spec.channels
        for i, width in enumerate(spec.block_widths):
            blocks.append(ResBlock(prev, width, stride=1 if i == 0 else 2))
            prev = width
        self.blocks = nn.ModuleList(blocks)
        L, D, flat = spec.latent_layers, spec.latent_dim, spec.flat_width
        # L independent affine heads, stored stacked
        bound = 0.1 / math.sqrt(flat)
        self.head_weight = nn.Parameter(torch.empty(L, flat, D).uniform_(-bound, bound))
        self.head_bias = nn.Parameter(torch.zeros(L, D))

    def feature(self, p_log: torch.Tensor) -> torch.Tensor:
        h0, w0 = self.spec.start_size
        h = F.silu(self.fc(p_log)).view(-1, self.spec.stem_channels, h0, w0)
        return torch.tanh(self.to_image(self.deconv(h)))

    def pooled(self, f_e: torch.Tensor) -> torch.Tensor:
        taps, h = [], f_e
        for block in self.blocks:
            h = block(h)
            taps.append(F.adaptive_avg_pool2d(h, self.spec.pool_grid).flatten(1))
        return torch.cat(taps, dim=1)

    def forward(self, p_log: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(N, C) log-predictions -> (f_E (N, Ch, H, W), latent (N, L, D))."""
        if p_log.dim() != 2 or p_log.shape[1] != self.spec.num_classes:
            raise ShapeMismatch(f"expected (N, {self.spec.num_classes}) input, got {tuple(p_log.shape)}")
        f_e = self.feature(p_log)
        flat = self.pooled(f_e)
        latent = torch.einsum("nf,lfd->nld", flat, self.head_weight) + self.head_bias
        return f_e, latent


@dataclass
class PAEState:
    """Encoder parameters plus bookkeeping needed to reproduce them."""

    encoder: PredictionAlignmentEncoder
    step: int = 0
    seed: int = 0

    @property
    def spec(self) -> EncoderSpec:
        return self.encoder.spec

    def param_hash(self) -> str:
        return module_hash(self.encoder)


def init_state(spec: EncoderSpec, rng: RandomSource) -> PAEState:
    enc = seeded_init(lambda: PredictionAlignmentEncoder(spec), rng)
    return PAEState(enc, step=0, seed=rng.seed)


def _as_batch(p_log, dtype) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(np.asarray(p_log), dtype=dtype)
    single = t.dim() == 1
    return (t.unsqueeze(0) if single else t), single


def encode(state: PAEState, p_log) -> tuple[np.ndarray, np.ndarray]:
    """Encode one (C,) or a batch (N, C) of log-prepared predictions.

    Returns numpy ``(f_E, latent)``; a single vector yields unbatched arrays.
    """
    dtype = next(state.encoder.parameters()).dtype
    x, single = _as_batch(p_log, dtype)
    with torch.no_grad():
        f_e, latent = state.encoder(x)
    f_e, latent = f_e.numpy(), latent.numpy()
    return (f_e[0], latent[0]) if single else (f_e, latent)


def check_compatible(spec: EncoderSpec, gen: nn.Module) -> None:
    if tuple(gen.latent_shape) != spec.latent_shape:
        raise ShapeMismatch(f"generator latent shape {tuple(gen.latent_shape)} != encoder {spec.latent_shape}")
    if tuple(gen.image_shape) != spec.image_shape:
        raise ShapeMismatch(f"generator image shape {tuple(gen.image_shape)} != encoder {spec.image_shape}")


def generate(gen: nn.Module, w) -> np.ndarray:
    """Render latents (L, D) or (N, L, D) through the frozen generator."""
    w = torch.as_tensor(np.asarray(w, dtype=np.float32))
    single = w.dim() == 2
    if tuple(w.shape[-2:]) != tuple(gen.latent_shape):
        raise ShapeMismatch(f"latent shape {tuple(w.shape)} != generator {tuple(gen.latent_shape)}")
    with torch.no_grad():
        out = gen(w.unsqueeze(0) if single else w).numpy()
    return out[0] if single else out


def forward(state: PAEState, gen: nn.Module, p_log: torch.Tensor):
    """Differentiable prediction -> image pass. Returns (image, f_E, latent) tensors.

    Gradients reach the encoder only; the generator holds no trainable state.
    """
    f_e, latent = state.encoder(p_log)
    return gen(latent), f_e, latent
