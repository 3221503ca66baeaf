"""Attack phase: enhance selected predictions toward the target identity,
encode them, and average the resulting latents weighted by confidence.

Nothing in this module touches the target model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from torch import nn

from .core import INTERNAL_SUM_TOL, one_hot
from .errors import (DegenerateOneHot, EmptyEnsemble, EnhancementTooLarge, NoContributors,
                     ShapeMismatch)
from .gateway import DEFAULT_EPSILON, Phase, QueryLedger, log_prepare
from .model import PAEState, encode, generate
from .selection import SelectedTrainingSet


class Scheme(str, Enum):
    ALIGNED_ENSEMBLE = "aligned_ensemble"
    PREDICTION_ENSEMBLE = "prediction_ensemble"
    ONE_HOT = "one_hot"


@dataclass
class AttackConfig:
    m: float = 0.035
    scheme: Scheme = Scheme.ALIGNED_ENSEMBLE
    epsilon: float = DEFAULT_EPSILON
    # "original": weight by pre-enhancement max confidence; "enhanced": after
    weights: str = "original"

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        if not 0.0 <= self.m < 1.0:
            raise ValueError("m must lie in [0, 1)")
        if self.weights not in ("original", "enhanced"):
            raise ValueError(f"unknown weights mode {self.weights!r}")


@dataclass
class Contributor:
    image_ref: str
    weight: float
    m_used: float


@dataclass
class AttackResult:
    identity: int
    scheme: Scheme
    latent: np.ndarray
    image: np.ndarray
    contributors: list[Contributor] = field(default_factory=list)


def enhance_prediction(p: np.ndarray, c: int, m: float) -> np.ndarray:
    """Raise entry ``c`` by ``m`` and shrink every other entry proportionally.

    Non-target entries become ``p_k - m * p_k / (1 - p_c)``, so their mutual
    ratios are unchanged and the vector still sums to one.
    """
    p = np.asarray(p, dtype=np.float64)
    if m < 0:
        raise ValueError("m must be non-negative")
    if m == 0:
        return p.copy()
    s_c = float(p[c])
    rest = 1.0 - s_c
    if rest <= 0.0:
        raise DegenerateOneHot(f"entry {c} is already 1; cannot enhance by {m}")
    if m > rest:
        raise EnhancementTooLarge(f"m={m} exceeds 1 - S_c = {rest}")
    out = p * max(0.0, 1.0 - m / rest)
    out[c] = s_c + m
    return out


def aligned_ensemble(ws: Sequence[np.ndarray], ps: Sequence[np.ndarray]) -> np.ndarray:
    """Confidence-weighted mean of latent codes, weights ``max(p_i)``."""
    if len(ws) == 0:
        raise EmptyEnsemble("no latents to ensemble")
    if len(ws) != len(ps):
        raise ShapeMismatch(f"{len(ws)} latents vs {len(ps)} predictions")
    weights = np.array([np.max(p) for p in ps], dtype=np.float64)
    return weighted_latent_mean(ws, weights)


def weighted_latent_mean(ws: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    stack = np.stack([np.asarray(w, dtype=np.float64) for w in ws]) if len(ws) else None
    if stack is None:
        raise EmptyEnsemble("no latents to ensemble")
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(stack),):
        raise ShapeMismatch("one weight per latent required")
    if np.any(weights <= 0):
        raise ValueError("ensemble weights must be positive")
    return np.tensordot(weights / weights.sum(), stack, axes=1)


def _clamped_m(p: np.ndarray, c: int, m: float) -> float:
    """Largest usable enhancement for this record (clamp instead of failing)."""
    return min(m, max(0.0, 1.0 - float(p[c])))


def attack_identity(c: int, selected: SelectedTrainingSet, state: PAEState, gen: nn.Module,
                    cfg: AttackConfig, ledger: QueryLedger | None = None) -> AttackResult:
    before = ledger[Phase.ATTACK] if ledger is not None else 0
    scheme = Scheme(cfg.scheme)
    if scheme is Scheme.ONE_HOT:
        _, latent = encode(state, log_prepare(one_hot(c, selected.num_classes), cfg.epsilon))
        result = AttackResult(c, scheme, latent.astype(np.float64), generate(gen, latent))
    else:
        records = selected.per_identity[c] if 0 <= c < selected.num_classes else []
        if not records:
            raise NoContributors(f"identity {c} has no selected records")
        raw = np.stack([r.prediction for r in records])
        m_used = [_clamped_m(p, c, cfg.m) for p in raw]
        enhanced = np.stack([enhance_prediction(p, c, m) for p, m in zip(raw, m_used)])
        weights = (raw if cfg.weights == "original" else enhanced).max(axis=1)
        contributors = [Contributor(r.image_ref, float(w), m)
                        for r, w, m in zip(records, weights, m_used)]
        if scheme is Scheme.ALIGNED_ENSEMBLE:
            _, latents = encode(state, log_prepare(enhanced, cfg.epsilon))
            latent = weighted_latent_mean(list(latents), weights)
        else:
            mixed = weights @ enhanced / weights.sum()
            mixed = mixed / mixed.sum()
            assert abs(mixed.sum() - 1.0) <= INTERNAL_SUM_TOL
            _, latent = encode(state, log_prepare(mixed, cfg.epsilon))
            latent = latent.astype(np.float64)
        result = AttackResult(c, scheme, latent, generate(gen, latent), contributors)
    if ledger is not None and ledger[Phase.ATTACK] != before:
        raise RuntimeError("attack phase issued target queries")
    return result


def attack_all(ids: Sequence[int], selected: SelectedTrainingSet, state: PAEState, gen: nn.Module,
               cfg: AttackConfig, ledger: QueryLedger | None = None) -> list[AttackResult]:
    return [attack_identity(c, selected, state, gen, cfg, ledger) for c in ids]
