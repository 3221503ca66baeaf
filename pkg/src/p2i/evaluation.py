"""Attack metrics, latent interpolation traces and query reports."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from scipy.stats import spearmanr

from .attack import AttackResult, enhance_prediction
from .benchkit.classifier import ClassifierHandle
from .errors import (EmptyResults, MissingIdentityFeatures, MissingReference, StepsTooFew,
                     TargetAlreadySaturated)
from .gateway import COST_PHASES, DEFAULT_EPSILON, Phase, QueryLedger, TargetModelHandle, log_prepare, predict_metered
from .losses import perceptual_dist
from .model import PAEState, encode, generate

TRACE_CEILING = 0.95


@dataclass
class MetricRow:
    identity: int
    predicted: int
    correct: bool
    knn: float
    feat: float
    lpips_proxy: float


@dataclass
class MetricsReport:
    attack_acc: float
    knn_dist: float
    feat_dist: float
    lpips_proxy: float
    rows: list[MetricRow] = field(default_factory=list)

    def summary(self) -> dict:
        return {"attack_acc": self.attack_acc, "knn_dist": self.knn_dist,
                "feat_dist": self.feat_dist, "lpips_proxy": self.lpips_proxy,
                "attacked": len(self.rows), "correct": sum(r.correct for r in self.rows)}


def _require(results):
    if len(results) == 0:
        raise EmptyResults("no attack results to evaluate")


def eval_predictions(results: Sequence[AttackResult], eval_classifier: ClassifierHandle,
                     ledger: QueryLedger | None = None) -> np.ndarray:
    """Eval-model labels for each reconstruction.

    With a ledger the calls are metered under the evaluation phase, which
    is kept out of the attack's cost.
    """
    _require(results)
    images = np.stack([r.image for r in results])
    if ledger is None:
        return eval_classifier.predict(images)
    handle = TargetModelHandle(eval_classifier.probabilities, eval_classifier.num_classes)
    return predict_metered(handle, images, Phase.EVALUATION, ledger).argmax(axis=1)


def attack_accuracy(results: Sequence[AttackResult], eval_classifier: ClassifierHandle,
                    ledger: QueryLedger | None = None) -> float:
    predicted = eval_predictions(results, eval_classifier, ledger)
    targets = np.array([r.identity for r in results])
    return float(np.mean(predicted == targets))


def _lookup(table: Mapping[int, np.ndarray], c: int, what: str) -> np.ndarray:
    if c not in table or len(np.atleast_1d(table[c])) == 0:
        raise MissingIdentityFeatures(f"no {what} for identity {c}")
    return np.asarray(table[c], dtype=np.float64)


def knn_distances(identities: Sequence[int], recon_features: np.ndarray,
                  private_features: Mapping[int, np.ndarray]) -> np.ndarray:
    out = []
    for c, f in zip(identities, np.asarray(recon_features, dtype=np.float64)):
        feats = np.atleast_2d(_lookup(private_features, c, "private features"))
        out.append(np.min(np.linalg.norm(feats - f, axis=1)))
    return np.array(out)


def knn_dist(identities: Sequence[int], recon_features: np.ndarray,
             private_features: Mapping[int, np.ndarray]) -> float:
    """Mean distance from each reconstruction's feature to its identity's nearest private feature."""
    if len(identities) == 0:
        raise EmptyResults("no results")
    return float(np.mean(knn_distances(identities, recon_features, private_features)))


def feat_distances(identities: Sequence[int], recon_features: np.ndarray,
                   centroids: Mapping[int, np.ndarray]) -> np.ndarray:
    return np.array([np.linalg.norm(f - _lookup(centroids, c, "centroid"))
                     for c, f in zip(identities, np.asarray(recon_features, dtype=np.float64))])


def feat_dist(identities: Sequence[int], recon_features: np.ndarray,
              centroids: Mapping[int, np.ndarray]) -> float:
    """Mean distance from each reconstruction's feature to its identity's feature centroid."""
    if len(identities) == 0:
        raise EmptyResults("no results")
    return float(np.mean(feat_distances(identities, recon_features, centroids)))


def feature_centroids(private_features: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    return {c: np.atleast_2d(np.asarray(f, dtype=np.float64)).mean(axis=0)
            for c, f in private_features.items()}


def lpips_proxies(identities: Sequence[int], recon_images: np.ndarray,
                  references: Mapping[int, np.ndarray], extractor: Callable) -> np.ndarray:
    out = []
    with torch.no_grad():
        for c, img in zip(identities, recon_images):
            if c not in references:
                raise MissingReference(f"no reference image for identity {c}")
            a = torch.as_tensor(np.asarray(img, dtype=np.float32)).unsqueeze(0)
            b = torch.as_tensor(np.asarray(references[c], dtype=np.float32)).unsqueeze(0)
            out.append(float(perceptual_dist(extractor, a, b)))
    return np.array(out)


def lpips_proxy(identities: Sequence[int], recon_images: np.ndarray,
                references: Mapping[int, np.ndarray], extractor: Callable) -> float:
    """Mean perceptual distance (fixed random extractor) to a per-identity reference image.

    This is a desk-scale stand-in for LPIPS, not the learned metric itself.
    """
    if len(identities) == 0:
        raise EmptyResults("no results")
    return float(np.mean(lpips_proxies(identities, recon_images, references, extractor)))


def nearest_references(private_images: Mapping[int, np.ndarray], private_features: Mapping[int, np.ndarray],
                       identities: Sequence[int], recon_features: np.ndarray) -> dict[int, np.ndarray]:
    """For each attacked identity, the private image whose feature is nearest the reconstruction."""
    refs = {}
    for c, f in zip(identities, np.asarray(recon_features, dtype=np.float64)):
        feats = np.atleast_2d(_lookup(private_features, c, "private features"))
        refs[c] = np.asarray(private_images[c])[int(np.argmin(np.linalg.norm(feats - f, axis=1)))]
    return refs


def evaluate(results: Sequence[AttackResult], eval_classifier: ClassifierHandle,
             private_images: Mapping[int, np.ndarray], extractor: Callable,
             ledger: QueryLedger | None = None) -> MetricsReport:
    """All four metrics for a set of reconstructions; rows follow ``results`` order."""
    _require(results)
    ids = [r.identity for r in results]
    predicted = eval_predictions(results, eval_classifier, ledger)
    recon_images = np.stack([r.image for r in results])
    recon_features = eval_classifier.features(recon_images)
    private_features = {c: eval_classifier.features(imgs) for c, imgs in private_images.items()}
    knn = knn_distances(ids, recon_features, private_features)
    feat = feat_distances(ids, recon_features, feature_centroids(private_features))
    refs = nearest_references(private_images, private_features, ids, recon_features)
    lp = lpips_proxies(ids, recon_images, refs, extractor)
    rows = [MetricRow(c, int(pc), bool(pc == c), float(k), float(fd), float(lv))
            for c, pc, k, fd, lv in zip(ids, predicted, knn, feat, lp)]
    return MetricsReport(float(np.mean([r.correct for r in rows])), float(knn.mean()),
                         float(feat.mean()), float(lp.mean()), rows)


# ---------------------------------------------------------------------------
# interpolation along the target dimension

@dataclass
class InterpolationTrace:
    identity: int
    target_values: np.ndarray
    dist_w: np.ndarray
    predicted_ids: np.ndarray
    normalization: float
    images: np.ndarray | None = None

    def spearman(self) -> float:
        return float(spearmanr(self.target_values, self.dist_w).correlation)


def interpolation_trace(p0: np.ndarray, c: int, steps: int, state: PAEState, gen,
                        w_id: np.ndarray, classifier: ClassifierHandle | None = None,
                        epsilon: float = DEFAULT_EPSILON, ceiling: float = TRACE_CEILING,
                        keep_images: bool = False) -> InterpolationTrace:
    """Move ``p0`` along dimension ``c`` from its own value up to ``ceiling``.

    Intermediate vectors keep summing to one by shrinking the other entries
    proportionally. ``dist_w`` is the latent distance to ``w_id`` divided by
    the distance at the first step.
    """
    if steps < 2:
        raise StepsTooFew(f"need at least 2 steps, got {steps}")
    p0 = np.asarray(p0, dtype=np.float64)
    start = float(p0[c])
    if start >= ceiling:
        raise TargetAlreadySaturated(f"S_c(p0) = {start:.4f} >= {ceiling}")
    values = np.linspace(start, ceiling, steps)
    preds = np.stack([enhance_prediction(p0, c, v - start) for v in values])
    _, latents = encode(state, log_prepare(preds, epsilon))
    raw = np.linalg.norm((latents.astype(np.float64) - np.asarray(w_id, dtype=np.float64))
                         .reshape(steps, -1), axis=1)
    norm = float(raw[0])
    dist = raw / norm if norm > 0 else raw
    images = generate(gen, latents)
    predicted = classifier.predict(images) if classifier is not None else np.full(steps, -1)
    return InterpolationTrace(c, values, dist, np.asarray(predicted), norm,
                              images if keep_images else None)


# ---------------------------------------------------------------------------
# query accounting

def query_report(ledger: QueryLedger, n_scored: int | None = None) -> dict:
    """Per-phase counts, their cumulative sums, and invariant flags.

    ``n_scored`` is the number of images pushed through selection
    (public plus synthetic); the report checks the cost equals it.
    """
    snap = ledger.snapshot()
    rows, running = [], 0
    for phase in Phase:
        running += snap[phase.value]
        rows.append({"phase": phase.value, "count": snap[phase.value], "cumulative": running})
    cost = sum(snap[p.value] for p in COST_PHASES)
    violations = []
    if snap[Phase.ATTACK.value] != 0:
        violations.append("attack phase issued target queries")
    if snap[Phase.TRAINING.value] != 0:
        violations.append("training phase issued target queries")
    report = {"rows": rows, "total": running, "attack_cost": cost, "violations": violations}
    if n_scored is not None:
        report["scored_images"] = n_scored
        report["cost_per_scored_image"] = cost / n_scored if n_scored else float("nan")
        if cost != n_scored:
            violations.append(f"attack cost {cost} != scored images {n_scored}")
    return report


def query_fraction(ours: float, other: float) -> float:
    """Our query count as a fraction of another method's."""
    return ours / other
