"""Frozen, differentiable Gaussian-blob generator.

Each latent row ``w[l]`` drives its own group of blobs through a private
affine map, so layers control disjoint image components.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import RandomSource
from ..errors import ShapeMismatch


def splat(amplitude: torch.Tensor, center_u: torch.Tensor, center_v: torch.Tensor,
          sigma: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Render blob parameters to images in [-1, 1].

    amplitude: (N, B, Ch); center_u, center_v, sigma: (N, B) in pixels.
    Returns (N, Ch, H, W) with
    ``clamp(-1 + 2 * sum_b a_b * exp(-((u-u_b)^2 + (v-v_b)^2) / (2 sigma_b^2)), -1, 1)``.
    """
    dtype = amplitude.dtype
    u = torch.arange(height, dtype=dtype)
    v = torch.arange(width, dtype=dtype)
    inv = 1.0 / (2.0 * sigma.unsqueeze(-1) ** 2)
    gu = torch.exp(-((u - center_u.unsqueeze(-1)) ** 2) * inv)  # (N, B, H)
    gv = torch.exp(-((v - center_v.unsqueeze(-1)) ** 2) * inv)  # (N, B, W)
    intensity = torch.einsum("nbc,nbu,nbv->ncuv", amplitude, gu, gv)
    return torch.clamp(-1.0 + 2.0 * intensity, -1.0, 1.0)


class BlobGenerator(nn.Module):
    """Maps latent codes (N, L, D) to images (N, Ch, H, W).

    All parameters are buffers: nothing here is trainable, and gradients only
    flow through to the latent input.
    """

    def __init__(self, latent_layers: int, latent_dim: int, blobs_per_layer: int,
                 height: int, width: int, channels: int, sigma_min: float = 1.5,
                 rng: RandomSource | None = None, seed: int = 0):
        super().__init__()
        rng = rng if rng is not None else RandomSource(seed).substream("generator")
        self.latent_layers = latent_layers
        self.latent_dim = latent_dim
        self.blobs_per_layer = blobs_per_layer
        self.height, self.width, self.channels = height, width, channels
        self.sigma_min = float(sigma_min)
        self.params_per_blob = channels + 3
        out = blobs_per_layer * self.params_per_blob
        g = rng.np
        weight = g.standard_normal((latent_layers, latent_dim, out)) / np.sqrt(latent_dim)
        bias = np.zeros((latent_layers, blobs_per_layer, self.params_per_blob))
        # amplitudes sit around sigmoid(-0.5), sizes around sigma_min + 2 px
        bias[..., :channels] = -0.5
        bias[..., channels + 2] = 1.5
        bias = bias.reshape(latent_layers, out) + 0.1 * g.standard_normal((latent_layers, out))
        self.register_buffer("weight", torch.tensor(weight, dtype=torch.float32))
        self.register_buffer("bias", torch.tensor(bias, dtype=torch.float32))

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.latent_layers, self.latent_dim)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    def blob_params(self, w: torch.Tensor):
        """Affine map plus squashing: returns (amplitude, center_u, center_v, sigma)."""
        if w.shape[-2:] != self.latent_shape:
            raise ShapeMismatch(f"latent shape {tuple(w.shape)} does not end with {self.latent_shape}")
        raw = torch.einsum("nld,ldo->nlo", w, self.weight.to(w.dtype)) + self.bias.to(w.dtype)
        raw = raw.reshape(w.shape[0], -1, self.params_per_blob)  # (N, B, P)
        ch = self.channels
        amplitude = torch.sigmoid(raw[..., :ch])
        # keep centres off the border so blobs stay visible
        center_u = (self.height - 1) * (0.1 + 0.8 * torch.sigmoid(raw[..., ch]))
        center_v = (self.width - 1) * (0.1 + 0.8 * torch.sigmoid(raw[..., ch + 1]))
        sigma = self.sigma_min + F.softplus(raw[..., ch + 2])
        return amplitude, center_u, center_v, sigma

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        if w.dim() == 2:
            return self.forward(w.unsqueeze(0))[0]
        amplitude, cu, cv, sigma = self.blob_params(w)
        return splat(amplitude, cu, cv, sigma, self.height, self.width)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, buf in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(buf.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def config(self) -> dict:
        return {"latent_layers": self.latent_layers, "latent_dim": self.latent_dim,
                "blobs_per_layer": self.blobs_per_layer, "height": self.height,
                "width": self.width, "channels": self.channels, "sigma_min": self.sigma_min}


def render(gen: nn.Module, w) -> np.ndarray:
    """Render one latent code (L, D) to a float64 image array (Ch, H, W)."""
    w = torch.as_tensor(np.asarray(w, dtype=np.float64))
    if tuple(w.shape) != tuple(gen.latent_shape):
        raise ShapeMismatch(f"latent shape {tuple(w.shape)} != {gen.latent_shape}")
    with torch.no_grad():
        return gen(w.unsqueeze(0))[0].numpy()
