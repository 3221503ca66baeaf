"""Shared value types, run configuration and deterministic seeding."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import InvalidConfig, NegativeEntry, SumNotOne, WrongLength

INGEST_SUM_TOL = 1e-6
INTERNAL_SUM_TOL = 1e-9


def validate_prediction(p: Sequence[float] | np.ndarray, num_classes: int | None = None,
                        tol: float = INGEST_SUM_TOL) -> np.ndarray:
    """Check that ``p`` is a probability vector and return it as float64.

    Raises WrongLength (fewer than 2 entries, not 1-D, or not ``num_classes``
    long), NegativeEntry, or SumNotOne when ``|sum - 1| > tol``.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise WrongLength(f"prediction must be a 1-D vector with >= 2 entries, got shape {arr.shape}")
    if num_classes is not None and arr.shape[0] != num_classes:
        raise WrongLength(f"expected {num_classes} classes, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise SumNotOne("prediction has non-finite entries")
    if arr.min() < 0:
        raise NegativeEntry(f"negative confidence {arr.min():.3g}")
    total = float(arr.sum())
    if abs(total - 1.0) > tol:
        raise SumNotOne(f"entries sum to {total!r}")
    return arr


def one_hot(c: int, num_classes: int) -> np.ndarray:
    out = np.zeros(num_classes, dtype=np.float64)
    out[c] = 1.0
    return out


# ---------------------------------------------------------------------------
# randomness

def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")


class RandomSource:
    """A seeded random stream that can hand out named, independent substreams.

    Substreams depend only on the master seed and their name path, so adding
    a new consumer never shifts the draws seen by existing ones.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._seq = np.random.SeedSequence(self.seed % 2**64,
                                           spawn_key=tuple(_name_key(n) for n in self.path))
        self.np = np.random.default_rng(self._seq)

    def substream(self, name: str) -> "RandomSource":
        return RandomSource(self.seed, self.path + (name,))

    def integer_seed(self) -> int:
        """A 63-bit integer derived from this stream's identity (not its draw state)."""
        return int(self._seq.generate_state(1, np.uint64)[0]) & (2**63 - 1)

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"


def seeded_rng(seed: int) -> RandomSource:
    return RandomSource(seed)


# ---------------------------------------------------------------------------
# configuration

@dataclass
class LossWeights:
    """Weights of the perceptual, identity, parsing and alignment terms."""

    lpips: float = 0.2
    id: float = 0.1
    parse: float = 0.1
    align_reg: float = 1.0

    def __post_init__(self):
        for name in ("lpips", "id", "parse", "align_reg"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"loss weight {name} must be non-negative")


@dataclass
class ClassifierConfig:
    widths: tuple[int, ...] = (16, 32, 32, 64)
    feature_dim: int = 64
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    holdout_fraction: float = 0.2
    label_smoothing: float = 0.0


@dataclass
class EncoderConfig:
    stem_channels: int = 32
    deconv_widths: tuple[int, ...] = (64, 32, 16)
    block_widths: tuple[int, ...] = (16, 32, 64, 64)
    pool_grid: int = 1


@dataclass
class RunConfig:
    """Fully-resolved settings for one pipeline run.

    ``num_classes`` is the number of private identities the target model
    recognises. Image and latent dimensions are shared by the benchmark,
    generator, encoder and classifiers.
    """

    seed: int = 0
    num_classes: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    latent_layers: int = 6
    latent_dim: int = 8
    # benchmark world
    n_public_ids: int = 64
    images_per_id: int = 20
    n_synthetic: int = 640
    blobs_per_layer: int = 2
    noise_scale: float = 0.15
    attribute_dim: int = 8
    idiosyncratic: float = 0.3
    sigma_min: float = 1.5
    # selection
    top_n: int = 8
    use_synthetic: bool = True
    rank_by: str = "target_score"
    # encoder training
    loss_weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-4
    optimizer: str = "ranger"
    betas: tuple[float, float] = (0.95, 0.999)
    log_epsilon: float = 1e-8
    # "eval": identity loss taps the evaluation classifier; "public": a classifier
    # trained on the public identities only
    identity_features: str = "eval"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    # attack
    m: float = 0.035
    ensemble_weights: str = "original"
    interpolation_steps: int = 11
    interpolation_ids: int = 10
    # classifiers
    target_classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    eval_classifier: ClassifierConfig = field(
        default_factory=lambda: ClassifierConfig(widths=(24, 48, 48, 96), feature_dim=96))
    identity_classifier: ClassifierConfig = field(default_factory=ClassifierConfig)

    def __post_init__(self):
        if self.top_n < 1:
            raise InvalidConfig("top_n must be >= 1")
        if not 0.0 <= self.m < 1.0:
            raise InvalidConfig("m must lie in [0, 1)")
        if self.epochs < 0:
            raise InvalidConfig("epochs must be >= 0")
        dims = ("num_classes", "height", "width", "channels", "latent_layers", "latent_dim",
                "batch_size", "blobs_per_layer")
        for name in dims:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfig("num_classes must be >= 2")
        if self.rank_by not in ("target_score", "argmax"):
            raise InvalidConfig(f"unknown rank_by {self.rank_by!r}")
        if self.ensemble_weights not in ("original", "enhanced"):
            raise InvalidConfig(f"unknown ensemble_weights {self.ensemble_weights!r}")
        if self.optimizer not in ("ranger", "radam", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if self.log_epsilon <= 0:
            raise InvalidConfig("log_epsilon must be > 0")
        if self.identity_features not in ("eval", "public"):
            raise InvalidConfig(f"unknown identity_features {self.identity_features!r}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        """(channels, height, width), the layout used by every tensor in the package."""
        return (self.channels, self.height, self.width)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.latent_layers, self.latent_dim)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _build(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise InvalidConfig(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise InvalidConfig(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if known[name].default_factory is not dataclasses.MISSING \
            else known[name].default
        if dataclasses.is_dataclass(default):
            # partial overrides keep the field's own defaults, not the class's
            if not isinstance(value, dict):
                raise InvalidConfig(f"expected an object for {name}")
            value = _build(type(default), {**dataclasses.asdict(default), **value})
        elif isinstance(default, tuple):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfig(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: {exc}") from exc
    return RunConfig.from_dict(data)
