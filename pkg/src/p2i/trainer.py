"""Encoder training loop and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import RandomSource, RunConfig
from .errors import CheckpointIOError, EmptyTrainingSet, ManifestMismatch, MissingCheckpoint
from .gateway import log_prepare
from .losses import FeatureExtractors, LossBreakdown, compute_losses
from .model import EncoderSpec, PAEState, PredictionAlignmentEncoder, check_compatible, forward, init_state
from .nn_utils import blob_to_state, state_to_blob

logger = logging.getLogger(__name__)


class Lookahead:
    """Lookahead wrapper: every ``k`` inner steps, slow weights move ``alpha`` of
    the way to the fast ones and the fast weights are reset onto them."""

    def __init__(self, inner: torch.optim.Optimizer, k: int = 6, alpha: float = 0.5):
        self.inner = inner
        self.k, self.alpha = k, alpha
        self._count = 0
        self._slow = [p.detach().clone() for g in inner.param_groups for p in g["params"]]

    def zero_grad(self, set_to_none: bool = True):
        self.inner.zero_grad(set_to_none=set_to_none)

    @torch.no_grad()
    def step(self, closure=None):
        loss = self.inner.step(closure)
        self._count += 1
        if self._count % self.k == 0:
            params = [p for g in self.inner.param_groups for p in g["params"]]
            for slow, fast in zip(self._slow, params):
                slow.add_(fast - slow, alpha=self.alpha)
                fast.copy_(slow)
        return loss


def make_optimizer(name: str, params, lr: float, betas):
    params = list(params)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr, betas=tuple(betas))
    radam = torch.optim.RAdam(params, lr=lr, betas=tuple(betas))
    return radam if name == "radam" else Lookahead(radam)


@dataclass
class TrainingPairs:
    """Aligned arrays of images (N, Ch, H, W) and raw prediction vectors (N, C)."""

    images: np.ndarray
    predictions: np.ndarray
    refs: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.predictions)


@dataclass
class TrainReport:
    epochs: list[LossBreakdown]
    wall_time: float
    checkpoint_hash: str
    steps: int

    def to_dict(self) -> dict:
        return {"epochs": [vars(b) for b in self.epochs], "wall_time": self.wall_time,
                "checkpoint_hash": self.checkpoint_hash, "steps": self.steps}


def _mean_breakdown(items: list[tuple[LossBreakdown, int]]) -> LossBreakdown:
    n = sum(k for _, k in items)
    return LossBreakdown(**{name: sum(getattr(b, name) * k for b, k in items) / n
                            for name in LossBreakdown.columns()})


def train_encoder(config: RunConfig, data: TrainingPairs, gen: nn.Module,
                  extractors: FeatureExtractors, rng: RandomSource,
                  state: PAEState | None = None) -> tuple[PAEState, TrainReport]:
    """Fit the encoder so that ``gen(encoder(log p)) ~ x`` over ``data``.

    Only encoder parameters are handed to the optimiser; ``gen`` and the
    extractors are never updated.
    """
    if len(data) == 0:
        raise EmptyTrainingSet("no training pairs")
    spec = EncoderSpec.from_config(config)
    check_compatible(spec, gen)
    if state is None:
        state = init_state(spec, rng.substream("init"))
    enc = state.encoder
    enc.train()
    opt = make_optimizer(config.optimizer, enc.parameters(), config.learning_rate, config.betas)
    x_all = torch.as_tensor(np.asarray(data.images, dtype=np.float32))
    p_all = torch.as_tensor(log_prepare(data.predictions, config.log_epsilon), dtype=torch.float32)
    order_rng = rng.substream("order").np
    history = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        perm = order_rng.permutation(len(data))
        parts = []
        for lo in range(0, len(perm), config.batch_size):
            idx = torch.as_tensor(perm[lo:lo + config.batch_size])
            x = x_all[idx]
            image, f_e, _ = forward(state, gen, p_all[idx])
            loss, breakdown = compute_losses(config.loss_weights, extractors, image, x, f_e)
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            parts.append((breakdown, len(idx)))
        history.append(_mean_breakdown(parts))
        logger.info("epoch %d/%d total %.4f (mse %.4f, lpips %.4f, id %.4f, align %.4f)",
                    epoch + 1, config.epochs, history[-1].total, history[-1].mse,
                    history[-1].lpips, history[-1].id, history[-1].align_reg)
    enc.eval()
    report = TrainReport(history, time.perf_counter() - start, state.param_hash(), state.step)
    return state, report


# ---------------------------------------------------------------------------
# checkpoints: flat float32 blob + JSON manifest

def save_checkpoint(state: PAEState, path: str | Path) -> Path:
    """Write ``<path>.f32`` and ``<path>.json``; returns the manifest path."""
    path = Path(path)
    blob, layout = state_to_blob(state.encoder)
    manifest = {
        "spec": state.spec.to_dict(),
        "step": state.step,
        "seed": state.seed,
        "content_hash": hashlib.sha256(blob).hexdigest(),
        "layout": layout,
        "blob": path.name + ".f32",
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        (path.parent / manifest["blob"]).write_bytes(blob)
        manifest_path = path.parent / (path.name + ".json")
        manifest_path.write_text(json.dumps(manifest, indent=2))
    except OSError as exc:
        raise CheckpointIOError(str(exc)) from exc
    return manifest_path


def _manifest_path(path: Path) -> Path:
    if path.suffix == ".json":
        return path
    return path.parent / (path.name + ".json")


def load_checkpoint(path: str | Path, expected_spec: EncoderSpec | None = None) -> PAEState:
    manifest_path = _manifest_path(Path(path))
    if not manifest_path.exists():
        raise MissingCheckpoint(f"no checkpoint at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        blob = (manifest_path.parent / manifest["blob"]).read_bytes()
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointIOError(f"unreadable checkpoint {manifest_path}: {exc}") from exc
    spec = EncoderSpec.from_dict(manifest["spec"])
    if expected_spec is not None and spec != expected_spec:
        raise ManifestMismatch(f"checkpoint spec {spec} does not match {expected_spec}")
    if hashlib.sha256(blob).hexdigest() != manifest["content_hash"]:
        raise CheckpointIOError("checkpoint blob does not match its content hash")
    try:
        tensors = blob_to_state(blob, manifest["layout"])
    except ValueError as exc:
        raise CheckpointIOError(str(exc)) from exc
    enc = PredictionAlignmentEncoder(spec)
    try:
        enc.load_state_dict(tensors)
    except RuntimeError as exc:
        raise ManifestMismatch(str(exc)) from exc
    enc.eval()
    return PAEState(enc, step=manifest["step"], seed=manifest["seed"])
