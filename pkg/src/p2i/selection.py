"""Building the attacker's training set from metered target predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ClassCountMismatch, EmptyBatch
from .gateway import Phase, QueryLedger, TargetModelHandle, predict_metered


@dataclass(frozen=True)
class SelectionRecord:
    """One selected image. ``identity`` is the class it was selected for."""

    image_ref: str
    prediction: np.ndarray
    identity: int
    target_score: float


@dataclass
class SelectedTrainingSet:
    num_classes: int
    per_identity: list[list[SelectionRecord]] = field(default_factory=list)

    def __post_init__(self):
        if not self.per_identity:
            self.per_identity = [[] for _ in range(self.num_classes)]

    def __len__(self):
        return sum(len(records) for records in self.per_identity)

    def records(self) -> list[SelectionRecord]:
        return [r for records in self.per_identity for r in records]


def score_public(target: TargetModelHandle, refs: Sequence[str], images: np.ndarray,
                 ledger: QueryLedger, batch_size: int = 256) -> list[tuple[str, np.ndarray]]:
    """Query the target once per image; returns ``(image_ref, prediction)`` pairs."""
    if len(refs) == 0:
        raise EmptyBatch("nothing to score")
    if len(refs) != len(images):
        raise ValueError("refs and images differ in length")
    out = []
    for start in range(0, len(refs), batch_size):
        preds = predict_metered(target, images[start:start + batch_size], Phase.SELECTION, ledger)
        out.extend(zip(refs[start:start + batch_size], preds))
    return out


def select_top_n(scores: Sequence[tuple[str, np.ndarray]], n: int, num_classes: int,
                 rank_by: str = "target_score") -> SelectedTrainingSet:
    """Keep, for every identity, the ``n`` images with the highest score on that identity.

    Ties go to the smaller ``image_ref``. With ``rank_by="target_score"`` every
    image competes for every identity; ``"argmax"`` restricts each identity to
    images whose top class it is.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    selected = SelectedTrainingSet(num_classes)
    if not scores:
        return selected
    refs = [ref for ref, _ in scores]
    preds = np.stack([np.asarray(p, dtype=np.float64) for _, p in scores])
    if preds.shape[1] != num_classes:
        raise ClassCountMismatch(f"scores have {preds.shape[1]} classes, expected {num_classes}")
    ref_rank = np.empty(len(refs), dtype=np.int64)
    ref_rank[sorted(range(len(refs)), key=refs.__getitem__)] = np.arange(len(refs))
    winners = preds.argmax(axis=1)
    for c in range(num_classes):
        pool = np.arange(len(refs)) if rank_by == "target_score" else np.flatnonzero(winners == c)
        # lexsort: last key is primary
        order = pool[np.lexsort((ref_rank[pool], -preds[pool, c]))][:n]
        selected.per_identity[c] = [
            SelectionRecord(refs[i], preds[i], c, float(preds[i, c])) for i in order
        ]
    return selected


def merge_synthetic(selected_pub: SelectedTrainingSet,
                    selected_syn: SelectedTrainingSet) -> SelectedTrainingSet:
    if selected_pub.num_classes != selected_syn.num_classes:
        raise ClassCountMismatch(f"{selected_pub.num_classes} vs {selected_syn.num_classes} classes")
    return SelectedTrainingSet(
        selected_pub.num_classes,
        [list(a) + list(b) for a, b in zip(selected_pub.per_identity, selected_syn.per_identity)],
    )
