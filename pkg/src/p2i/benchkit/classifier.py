"""Small convolutional classifiers used as target, evaluation and identity models."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import ClassifierConfig, RandomSource
from ..errors import SingleClassData
from ..nn_utils import seeded_init

logger = logging.getLogger(__name__)


class SmallConvNet(nn.Module):
    """Four conv blocks, a pooled hidden layer and a linear head.

    ``taps()`` exposes five feature levels: the four block outputs and the
    penultimate feature vector.
    """

    def __init__(self, in_channels: int, num_classes: int, widths=(16, 32, 32, 64),
                 feature_dim: int = 64):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("SmallConvNet needs exactly four block widths")
        self.num_classes = num_classes
        blocks = []
        prev = in_channels
        for i, w in enumerate(widths):
            layers = [nn.Conv2d(prev, w, 3, padding=1), nn.SiLU()]
            if i < 3:
                layers.append(nn.AvgPool2d(2))
            blocks.append(nn.Sequential(*layers))
            prev = w
        self.blocks = nn.ModuleList(blocks)
        self.hidden = nn.Linear(prev, feature_dim)
        self.fc = nn.Linear(feature_dim, num_classes)
        # torch's default conv init shrinks activations ~4x per block here
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        out = []
        h = x
        for block in self.blocks:
            h = block(h)
            out.append(h)
        out.append(self.features_from(h))
        return out

    def features_from(self, h: torch.Tensor) -> torch.Tensor:
        return F.silu(self.hidden(h.mean(dim=(2, 3))))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Penultimate-layer features (the layer before the classification head)."""
        h = x
        for block in self.blocks:
            h = block(h)
        return self.features_from(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


@dataclass
class ClassifierHandle:
    """A trained, frozen classifier plus its held-out accuracy."""

    net: SmallConvNet
    num_classes: int
    heldout_accuracy: float
    train_accuracy: float

    def probabilities(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return _batched(lambda x: F.softmax(self.net(x), dim=1), images, batch_size)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.probabilities(images).argmax(axis=1)

    def features(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return _batched(self.net.features, images, batch_size)

    def taps(self, x: torch.Tensor) -> list[torch.Tensor]:
        return self.net.taps(x)


def _batched(fn, images, batch_size):
    images = torch.as_tensor(np.asarray(images, dtype=np.float32))
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(fn(images[start:start + batch_size]).double().numpy())
    return np.concatenate(outs, axis=0)


def freeze(net: nn.Module) -> nn.Module:
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def split_holdout(labels: np.ndarray, fraction: float, rng: np.random.Generator):
    """Stratified split; returns (train_idx, heldout_idx)."""
    train, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = int(round(fraction * len(idx)))
        held.extend(idx[:k])
        train.extend(idx[k:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(held, dtype=int))


def train_classifier(images: np.ndarray, labels: np.ndarray, num_classes: int,
                     cfg: ClassifierConfig, rng: RandomSource) -> ClassifierHandle:
    """Train a SmallConvNet with momentum SGD; returns the frozen model.

    images: (N, Ch, H, W) in [-1, 1]; labels in [0, num_classes).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise SingleClassData("classifier training needs at least two classes")
    train_idx, held_idx = split_holdout(labels, cfg.holdout_fraction, rng.substream("split").np)
    net = seeded_init(lambda: SmallConvNet(images.shape[1], num_classes, cfg.widths, cfg.feature_dim),
                      rng.substream("init"))
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    x_all = torch.as_tensor(np.asarray(images, dtype=np.float32))
    y_all = torch.as_tensor(labels)
    order_rng = rng.substream("order").np
    net.train()
    for epoch in range(cfg.epochs):
        perm = train_idx[order_rng.permutation(len(train_idx))]
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss = F.cross_entropy(net(x_all[idx]), y_all[idx], label_smoothing=cfg.label_smoothing)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logger.debug("classifier epoch %d loss %.4f", epoch, total / max(len(perm), 1))
    freeze(net)
    handle = ClassifierHandle(net, num_classes, float("nan"), float("nan"))
    pred = handle.predict(images)
    handle.train_accuracy = float(np.mean(pred[train_idx] == labels[train_idx]))
    handle.heldout_accuracy = (float(np.mean(pred[held_idx] == labels[held_idx]))
                               if len(held_idx) else float("nan"))
    logger.info("classifier trained: train acc %.3f, held-out acc %.3f",
                handle.train_accuracy, handle.heldout_accuracy)
    return handle
