"""Metered access to the black-box target classifier.

This is the only module allowed to call a model's ``predict_fn``. Everything
else sees prediction vectors, never the model.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .core import validate_prediction
from .errors import EmptyBatch, InvalidModelOutput, InvalidPrediction, NonPositiveEpsilon

DEFAULT_EPSILON = 1e-8


class Phase(str, Enum):
    SELECTION = "selection"
    TRAINING = "training"
    ATTACK = "attack"
    EVALUATION = "evaluation"


# phases that count towards the attack's query cost
COST_PHASES = (Phase.SELECTION, Phase.TRAINING, Phase.ATTACK)


@dataclass(frozen=True)
class TargetModelHandle:
    """Opaque callable from an image batch (N, Ch, H, W) to an (N, C) prediction batch."""

    predict_fn: Callable[[np.ndarray], np.ndarray]
    num_classes: int


class QueryLedger:
    """Per-phase counters of single-image forward passes. Counters only grow."""

    def __init__(self, counts: dict[str, int] | None = None):
        self._lock = threading.Lock()
        self._counts = {phase: 0 for phase in Phase}
        for name, value in (counts or {}).items():
            if value < 0:
                raise ValueError("ledger counts must be non-negative")
            self._counts[Phase(name)] = int(value)

    def record(self, phase: Phase | str, n: int) -> None:
        if n < 0:
            raise ValueError("cannot record a negative number of queries")
        phase = Phase(phase)
        with self._lock:
            self._counts[phase] += int(n)

    def __getitem__(self, phase: Phase | str) -> int:
        return self._counts[Phase(phase)]

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {phase.value: count for phase, count in self._counts.items()}

    def cost_total(self) -> int:
        """Target queries spent by the attack (evaluation-model queries excluded)."""
        snap = self.snapshot()
        return sum(snap[p.value] for p in COST_PHASES)

    def merge(self, other: "QueryLedger") -> None:
        for name, count in other.snapshot().items():
            self.record(name, count)

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QueryLedger":
        return cls(json.loads(text))

    def __repr__(self):
        return f"QueryLedger({self.snapshot()})"


def predict_metered(handle: TargetModelHandle, batch: Sequence[np.ndarray] | np.ndarray,
                    phase: Phase | str, ledger: QueryLedger) -> np.ndarray:
    """Run the model on ``batch`` and charge ``len(batch)`` queries to ``phase``.

    Returns an (N, C) float64 array whose rows have all passed
    ``validate_prediction``.
    """
    phase = Phase(phase)
    images = np.asarray(batch)
    if images.ndim == 0 or len(images) == 0:
        raise EmptyBatch("predict_metered needs at least one image")
    # charged before validation: a malformed answer still cost a query
    ledger.record(phase, len(images))
    raw = np.asarray(handle.predict_fn(images), dtype=np.float64)
    if raw.shape != (len(images), handle.num_classes):
        raise InvalidModelOutput(f"model returned shape {raw.shape}, "
                                 f"expected {(len(images), handle.num_classes)}")
    try:
        for row in raw:
            validate_prediction(row, handle.num_classes)
    except InvalidPrediction as exc:
        raise InvalidModelOutput(f"{exc.kind}: {exc}") from exc
    return raw


def log_prepare(p: np.ndarray | Sequence[float], epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Elementwise ``log(p + epsilon)``; works on a single vector or a batch of rows."""
    if not epsilon > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {epsilon!r}")
    return np.log(np.asarray(p, dtype=np.float64) + epsilon)
