"""Pipeline stages over output directories.

Every stage reads its inputs through the upstream directory's
``manifest.json``, refuses inputs produced under a different resolved
config, and writes its own files next to a fresh ``manifest.json`` and
``config.resolved.json``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import __version__
from .attack import AttackConfig, AttackResult, Scheme, attack_identity
from .benchkit.classifier import ClassifierHandle, SmallConvNet, freeze, train_classifier
from .benchkit.data import (BenchmarkSpec, ImageSet, build_benchmark, load_image_sets, load_latent,
                            load_png, save_image_sets, save_latent, save_png)
from .benchkit.generator import BlobGenerator
from .core import RandomSource, RunConfig, load_config
from .errors import (ConfigMismatch, ManifestMismatch, MissingCheckpoint, MissingInput,
                     OutputExists, TargetAlreadySaturated)
from .evaluation import TRACE_CEILING, MetricsReport, evaluate, interpolation_trace, query_report
from .gateway import Phase, QueryLedger, TargetModelHandle
from .losses import FeatureExtractors, PerceptualExtractor, make_perceptual
from .model import EncoderSpec, PAEState
from .nn_utils import load_module_state, save_module
from .selection import (SelectedTrainingSet, SelectionRecord, merge_synthetic, score_public,
                        select_top_n)
from .trainer import TrainingPairs, load_checkpoint, save_checkpoint, train_encoder

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RESOLVED_CONFIG = "config.resolved.json"
LEDGER = "ledger.json"
SEED_ENV = "P2I_SEED"


# ---------------------------------------------------------------------------
# config and directory plumbing

def resolve_config(config_path: str | Path | None, upstream: Path | None = None,
                   environ: dict | None = None) -> RunConfig:
    """Config from ``config_path``, else the upstream stage's resolved config.

    ``P2I_SEED`` in the environment replaces the seed.
    """
    environ = os.environ if environ is None else environ
    if config_path is not None:
        cfg = load_config(config_path)
    elif upstream is not None:
        cfg = load_config(stage_dir(upstream) / RESOLVED_CONFIG)
    else:
        cfg = RunConfig()
    override = environ.get(SEED_ENV)
    if override not in (None, ""):
        seed = int(override)
        if seed != cfg.seed:
            logger.warning("%s=%d overrides config seed %d", SEED_ENV, seed, cfg.seed)
        cfg = cfg.replace(seed=seed)
    return cfg


def prepare_out_dir(out_dir: str | Path, stage: str, force: bool = False) -> Path:
    """Create an empty output directory holding a placeholder manifest.

    An existing non-empty directory is an error unless ``force`` is set, and
    even then only directories holding one of our manifests are cleared. The
    placeholder marks the directory as ours (so a failed run can be forced
    over) but incomplete (so downstream stages refuse it).
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExists(f"{out} exists; pass --force to replace it")
        if not (out / MANIFEST).exists():
            raise OutputExists(f"{out} is not a pipeline output directory; refusing to clear it")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / MANIFEST).write_text(json.dumps({"stage": stage, "incomplete": True}))
    return out


def file_digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_dir(path: str | Path) -> Path:
    """Accept either a stage directory or its manifest file."""
    path = Path(path)
    return path.parent if path.name == MANIFEST else path


def write_manifest(out: Path, stage: str, cfg: RunConfig, inputs: dict[str, Path],
                   extra: dict | None = None) -> dict:
    """Hash every file under ``out`` into its manifest and write the resolved config."""
    (out / RESOLVED_CONFIG).write_text(cfg.to_json())
    files = {}
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST):
        files[path.relative_to(out).as_posix()] = file_digest(path)
    manifest = {
        "stage": stage,
        "config_hash": cfg.hash(),
        "version": __version__,
        "inputs": {name: os.path.relpath(stage_dir(p), out) for name, p in inputs.items()},
        "files": files,
        **(extra or {}),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


@dataclass
class StageOutput:
    path: Path
    manifest: dict

    def input(self, name: str) -> Path:
        if name not in self.manifest["inputs"]:
            raise ManifestMismatch(f"{self.path} has no input named {name!r}")
        return (self.path / self.manifest["inputs"][name]).resolve()


def read_stage(path: str | Path, stage: str | None, cfg: RunConfig | None,
               verify_files: bool = True) -> StageOutput:
    """Load and check an upstream stage's manifest."""
    root = stage_dir(path)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise MissingInput(f"no {MANIFEST} in {root}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("incomplete"):
        raise MissingInput(f"{root} holds an unfinished {manifest.get('stage')!r} stage")
    if stage is not None and manifest.get("stage") != stage:
        raise ManifestMismatch(f"{root} holds a {manifest.get('stage')!r} stage, expected {stage!r}")
    if cfg is not None and manifest.get("config_hash") != cfg.hash():
        raise ConfigMismatch(f"{root} was produced with config {manifest.get('config_hash')}, "
                             f"current config is {cfg.hash()}")
    if verify_files:
        for rel, digest in manifest.get("files", {}).items():
            target = root / rel
            if not target.exists() or file_digest(target) != digest:
                raise ManifestMismatch(f"{target} is missing or does not match its manifest")
    return StageOutput(root, manifest)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# bench-init

CLASSIFIER_ROLES = ("target", "eval", "identity")


@dataclass
class BenchArtifacts:
    generator: BlobGenerator
    sets: dict[str, ImageSet]
    centroids: dict[int, np.ndarray]
    classifiers: dict[str, ClassifierHandle]
    perceptual: PerceptualExtractor

    def image_lookup(self) -> dict[str, np.ndarray]:
        return {ref: img for s in self.sets.values() for ref, img in zip(s.refs, s.images)}

    def private_by_identity(self) -> dict[int, np.ndarray]:
        private = self.sets["private"]
        return {int(c): private.images[private.identities == c] for c in np.unique(private.identities)}


def _classifier_meta(handle: ClassifierHandle, role: str) -> dict:
    net = handle.net
    return {"role": role, "in_channels": net.blocks[0][0].in_channels,
            "num_classes": handle.num_classes,
            "widths": [b[0].out_channels for b in net.blocks],
            "feature_dim": net.hidden.out_features,
            "heldout_accuracy": handle.heldout_accuracy, "train_accuracy": handle.train_accuracy}


def _load_classifier(path: Path) -> ClassifierHandle:
    state, meta = load_module_state(path)
    net = SmallConvNet(meta["in_channels"], meta["num_classes"], tuple(meta["widths"]),
                       meta["feature_dim"])
    net.load_state_dict(state)
    return ClassifierHandle(freeze(net), meta["num_classes"], meta["heldout_accuracy"],
                            meta["train_accuracy"])


def bench_init(cfg: RunConfig, out: Path) -> dict:
    """Render the benchmark world, train the three classifiers, persist everything."""
    bench = build_benchmark(BenchmarkSpec.from_config(cfg))
    rng = RandomSource(cfg.seed)
    private, public = bench.private, bench.public
    classifiers = {
        "target": train_classifier(private.images, private.identities, cfg.num_classes,
                                   cfg.target_classifier, rng.substream("target")),
        "eval": train_classifier(private.images, private.identities, cfg.num_classes,
                                 cfg.eval_classifier, rng.substream("eval")),
        # optional identity-loss features learned from public identities only
        "identity": train_classifier(public.images, public.identities - cfg.num_classes,
                                     cfg.n_public_ids, cfg.identity_classifier,
                                     rng.substream("identity")),
    }
    perceptual = make_perceptual(cfg.channels, rng.substream("perceptual"))

    centroids = {ident.id: ident.w_id for ident in bench.private_ids + bench.public_ids}
    save_image_sets(out / "data", [private, public, bench.synthetic], centroids)
    models = out / "models"
    models.mkdir()
    save_module(bench.generator, models / "generator",
                {"config": bench.generator.config(), "param_hash": bench.generator.param_hash()})
    for role, handle in classifiers.items():
        save_module(handle.net, models / role, _classifier_meta(handle, role))
    save_module(perceptual, models / "perceptual", {"channels": cfg.channels})

    report = {
        "generator_hash": bench.generator.param_hash(),
        "classifiers": {role: {"heldout_accuracy": h.heldout_accuracy,
                               "train_accuracy": h.train_accuracy}
                        for role, h in classifiers.items()},
        "counts": {"private": len(private), "public": len(public),
                   "synthetic": len(bench.synthetic)},
    }
    (out / "bench_report.json").write_text(json.dumps(report, indent=2))
    write_manifest(out, "bench", cfg, {}, {"counts": report["counts"]})
    return report


def load_bench(path: Path, cfg: RunConfig | None) -> BenchArtifacts:
    stage = read_stage(path, "bench", cfg)
    root = stage.path
    models = root / "models"
    state, meta = load_module_state(models / "generator")
    gen = BlobGenerator(**meta["config"])
    gen.load_state_dict(state)
    gen.requires_grad_(False)
    if gen.param_hash() != meta["param_hash"]:
        raise ManifestMismatch("stored generator does not match its recorded hash")
    sets, centroids = load_image_sets(root / "data")
    classifiers = {role: _load_classifier(models / role) for role in CLASSIFIER_ROLES}
    pstate, pmeta = load_module_state(models / "perceptual")
    perceptual = PerceptualExtractor(pmeta["channels"])
    perceptual.load_state_dict(pstate)
    perceptual.requires_grad_(False)
    return BenchArtifacts(gen, sets, centroids, classifiers, perceptual.eval())


# ---------------------------------------------------------------------------
# select

def select(cfg: RunConfig, bench_path: Path, out: Path) -> SelectedTrainingSet:
    """Score public (and synthetic) images with the target and keep the top ``n`` per identity."""
    bench = load_bench(bench_path, cfg)
    target = bench.classifiers["target"]
    handle = TargetModelHandle(target.probabilities, cfg.num_classes)
    ledger = QueryLedger()
    public = bench.sets["public"]
    all_scores = score_public(handle, public.refs, public.images, ledger)
    selected = select_top_n(all_scores, cfg.top_n, cfg.num_classes, cfg.rank_by)
    synthetic = bench.sets.get("synthetic")
    if cfg.use_synthetic and synthetic is not None and len(synthetic):
        syn_scores = score_public(handle, synthetic.refs, synthetic.images, ledger)
        selected = merge_synthetic(
            selected, select_top_n(syn_scores, cfg.top_n, cfg.num_classes, cfg.rank_by))
        all_scores = all_scores + syn_scores
    scored = len(all_scores)

    records = selected.records()
    rank = {}
    rows = []
    for r in records:
        rank[r.identity] = rank.get(r.identity, -1) + 1
        rows.append([r.identity, rank[r.identity], r.image_ref, _fmt(r.target_score)])
    _write_csv(out / "selected.csv", ["identity", "rank", "image_ref", "target_score"], rows)
    preds = np.stack([r.prediction for r in records]) if records else np.zeros((0, cfg.num_classes))
    np.ascontiguousarray(preds, dtype=np.float64).tofile(out / "predictions.f64")
    (out / "predictions.json").write_text(json.dumps(
        {"shape": list(preds.shape), "dtype": "float64", "row_order": "selected.csv"}, indent=2))
    # every scored image, so later stages never need to query the target again
    table = np.stack([p for _, p in all_scores]) if all_scores else np.zeros((0, cfg.num_classes))
    np.ascontiguousarray(table, dtype=np.float64).tofile(out / "scores.f64")
    (out / "scores.json").write_text(json.dumps(
        {"shape": list(table.shape), "dtype": "float64", "refs": [ref for ref, _ in all_scores]}))
    (out / LEDGER).write_text(ledger.to_json())
    write_manifest(out, "select", cfg, {"bench": bench_path}, {"scored_images": scored})
    return selected


def load_selection(path: Path, cfg: RunConfig | None) -> tuple[StageOutput, SelectedTrainingSet]:
    stage = read_stage(path, "select", cfg)
    meta = json.loads((stage.path / "predictions.json").read_text())
    preds = np.fromfile(stage.path / "predictions.f64", dtype=np.float64).reshape(meta["shape"])
    rows = _read_csv(stage.path / "selected.csv")
    if len(rows) != len(preds):
        raise ManifestMismatch("selected.csv and predictions.f64 disagree in length")
    num_classes = cfg.num_classes if cfg is not None else preds.shape[1]
    selected = SelectedTrainingSet(num_classes)
    for row, p in zip(rows, preds):
        c = int(row["identity"])
        selected.per_identity[c].append(
            SelectionRecord(row["image_ref"], p, c, float(row["target_score"])))
    return stage, selected


def load_scores(stage: StageOutput) -> tuple[list[str], np.ndarray]:
    """Every image the select stage scored: (refs, predictions (N, C))."""
    meta = json.loads((stage.path / "scores.json").read_text())
    table = np.fromfile(stage.path / "scores.f64", dtype=np.float64).reshape(meta["shape"])
    if len(meta["refs"]) != len(table):
        raise ManifestMismatch("scores.json and scores.f64 disagree in length")
    return meta["refs"], table


# ---------------------------------------------------------------------------
# train

LOSS_COLUMNS = ["epoch", "mse", "lpips", "id", "parse", "align_reg", "recon", "total"]


def train(cfg: RunConfig, select_path: Path, out: Path) -> dict:
    stage, selected = load_selection(select_path, cfg)
    bench = load_bench(stage.input("bench"), cfg)
    lookup = bench.image_lookup()
    records = selected.records()
    pairs = TrainingPairs(np.stack([lookup[r.image_ref] for r in records]),
                          np.stack([r.prediction for r in records]),
                          [r.image_ref for r in records])
    identity = bench.classifiers["eval" if cfg.identity_features == "eval" else "identity"]
    extractors = FeatureExtractors(bench.perceptual, identity.taps)
    gen_before = bench.generator.param_hash()
    state, report = train_encoder(cfg, pairs, bench.generator, extractors,
                                  RandomSource(cfg.seed).substream("trainer"))
    gen_after = bench.generator.param_hash()
    save_checkpoint(state, out / "encoder")
    _write_csv(out / "losses.csv", LOSS_COLUMNS,
               ([i + 1] + [_fmt(v) for v in b.as_row()] for i, b in enumerate(report.epochs)))
    summary = {**report.to_dict(), "training_pairs": len(pairs),
               "generator_hash_before": gen_before, "generator_hash_after": gen_after,
               "generator_unchanged": gen_before == gen_after}
    (out / "train_report.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "train", cfg, {"select": stage.path})
    return summary


def resolve_checkpoint(path: str | Path) -> Path:
    """A train directory, its manifest, or the checkpoint itself -> checkpoint path."""
    path = Path(path)
    if path.is_dir() or path.name == MANIFEST:
        return stage_dir(path) / "encoder"
    return path.with_suffix("") if path.suffix in (".json", ".f32") else path


def load_trained(checkpoint: str | Path, cfg: RunConfig) -> PAEState:
    ckpt = resolve_checkpoint(checkpoint)
    if not Path(str(ckpt) + ".json").exists():
        raise MissingCheckpoint(f"no checkpoint at {ckpt}")
    read_stage(ckpt.parent, "train", cfg)
    return load_checkpoint(ckpt, EncoderSpec.from_config(cfg))


# ---------------------------------------------------------------------------
# attack

ATTACK_COLUMNS = ["identity", "scheme", "m", "contributors", "output_path"]


def _parallel_map(fn, items: Sequence, jobs: int) -> list:
    # map preserves input order, so results do not depend on scheduling
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def attack(cfg: RunConfig, checkpoint: Path, select_path: Path, out: Path,
           scheme: str = Scheme.ALIGNED_ENSEMBLE.value, m: float | None = None,
           ids: Sequence[int] | None = None, jobs: int = 1) -> list[AttackResult]:
    state = load_trained(checkpoint, cfg)
    stage, selected = load_selection(select_path, cfg)
    bench = load_bench(stage.input("bench"), cfg)
    m = cfg.m if m is None else m
    acfg = AttackConfig(m=m, scheme=scheme, epsilon=cfg.log_epsilon, weights=cfg.ensemble_weights)
    ids = list(range(cfg.num_classes)) if ids is None else list(ids)
    ledger = QueryLedger()
    results = _parallel_map(
        lambda c: attack_identity(c, selected, state, bench.generator, acfg, ledger), ids, jobs)

    (out / "images").mkdir()
    (out / "latents").mkdir()
    rows, contrib_rows = [], []
    for r in results:
        name = f"{acfg.scheme.value}_{r.identity:03d}"
        image_path = f"images/{name}.png"
        save_png(out / image_path, r.image)
        save_latent(out / "latents" / f"{name}.f32", r.latent)
        rows.append([r.identity, acfg.scheme.value, _fmt(m), len(r.contributors), image_path])
        contrib_rows.extend([r.identity, k.image_ref, _fmt(k.weight), _fmt(k.m_used)]
                            for k in r.contributors)
    _write_csv(out / "attack_manifest.csv", ATTACK_COLUMNS, rows)
    _write_csv(out / "contributors.csv", ["identity", "image_ref", "weight", "m_used"], contrib_rows)
    (out / LEDGER).write_text(ledger.to_json())
    write_manifest(out, "attack", cfg, {"select": stage.path, "train": resolve_checkpoint(checkpoint).parent},
                   {"scheme": acfg.scheme.value, "m": m,
                    "latent_shape": list(cfg.latent_shape)})
    return results


def load_attack(path: Path, cfg: RunConfig | None) -> tuple[StageOutput, list[AttackResult]]:
    stage = read_stage(path, "attack", cfg)
    shape = tuple(stage.manifest["latent_shape"])
    results = []
    for row in _read_csv(stage.path / "attack_manifest.csv"):
        image_path = stage.path / row["output_path"]
        latent_path = stage.path / "latents" / (Path(row["output_path"]).stem + ".f32")
        results.append(AttackResult(int(row["identity"]), Scheme(row["scheme"]),
                                    load_latent(latent_path, shape).astype(np.float64),
                                    load_png(image_path)))
    return stage, results


# ---------------------------------------------------------------------------
# eval

METRIC_COLUMNS = ["identity", "correct", "knn", "feat", "lpips_proxy"]


def evaluate_stage(cfg: RunConfig, attack_path: Path, out: Path) -> MetricsReport:
    stage, results = load_attack(attack_path, cfg)
    select_stage = read_stage(stage.input("select"), "select", cfg, verify_files=False)
    bench = load_bench(select_stage.input("bench"), cfg)
    ledger = QueryLedger()
    report = evaluate(results, bench.classifiers["eval"], bench.private_by_identity(),
                      bench.perceptual, ledger)
    _write_csv(out / "metrics.csv", METRIC_COLUMNS,
               ([r.identity, int(r.correct), _fmt(r.knn), _fmt(r.feat), _fmt(r.lpips_proxy)]
                for r in report.rows))
    summary = {**report.summary(), "scheme": stage.manifest["scheme"], "m": stage.manifest["m"]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    (out / LEDGER).write_text(ledger.to_json())
    write_manifest(out, "eval", cfg, {"attack": stage.path})
    return report


# ---------------------------------------------------------------------------
# interpolate

TRACE_COLUMNS = ["step", "target_value", "dist_w", "raw_dist", "predicted_id"]


def trace_start(refs: Sequence[str], scores: np.ndarray, c: int,
                ceiling: float = TRACE_CEILING) -> int | None:
    """Row of the public image to start identity ``c``'s trace from.

    Among public images the target classifies as ``c`` with room below
    ``ceiling``, the one with the lowest score for ``c``, so the trace
    covers as much of the range as possible. Ties go to the smaller ref.
    """
    best = None
    for i, ref in enumerate(refs):
        p = scores[i]
        if "public" not in Path(ref).name or int(np.argmax(p)) != c or p[c] >= ceiling:
            continue
        key = (float(p[c]), ref)
        if best is None or key < best[0]:
            best = (key, i)
    return None if best is None else best[1]


def interpolate(cfg: RunConfig, checkpoint: Path, select_path: Path, out: Path,
                ids: Sequence[int] | None = None) -> dict:
    state = load_trained(checkpoint, cfg)
    stage = read_stage(select_path, "select", cfg)
    refs, scores = load_scores(stage)
    bench = load_bench(stage.input("bench"), cfg)
    candidates = list(range(cfg.num_classes)) if ids is None else list(ids)
    limit = cfg.interpolation_ids if ids is None else len(candidates)
    traces, skipped = {}, []
    for c in candidates:
        if len(traces) == limit:
            break
        row = trace_start(refs, scores, c)
        if row is None:
            skipped.append(c)
            continue
        try:
            trace = interpolation_trace(scores[row], c, cfg.interpolation_steps, state,
                                        bench.generator, bench.centroids[c],
                                        bench.classifiers["eval"], cfg.log_epsilon,
                                        keep_images=True)
        except TargetAlreadySaturated:
            skipped.append(c)
            continue
        _write_csv(out / f"trace_{c}.csv", TRACE_COLUMNS,
                   ([i, _fmt(v), _fmt(d), _fmt(d * trace.normalization), int(k)]
                    for i, (v, d, k) in enumerate(zip(trace.target_values, trace.dist_w,
                                                      trace.predicted_ids))))
        save_png(out / f"trace_{c}.png", np.concatenate(list(trace.images), axis=2))
        traces[c] = {"start_image": refs[row], "start_score": float(scores[row][c]),
                     "spearman": trace.spearman()}
    rhos = [t["spearman"] for t in traces.values() if np.isfinite(t["spearman"])]
    summary = {"identities": {str(c): t for c, t in traces.items()}, "skipped": skipped,
               "mean_spearman": float(np.mean(rhos)) if rhos else None,
               "steps": cfg.interpolation_steps, "ceiling": TRACE_CEILING}
    (out / "traces.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "interpolate", cfg,
                   {"select": stage.path, "train": resolve_checkpoint(checkpoint).parent})
    return summary


# ---------------------------------------------------------------------------
# report

def _collect_stages(paths: Sequence[Path], cfg: RunConfig | None) -> dict[Path, StageOutput]:
    """Every stage reachable from ``paths`` through manifest inputs."""
    seen: dict[Path, StageOutput] = {}
    pending = [stage_dir(p).resolve() for p in paths]
    while pending:
        path = pending.pop()
        if path in seen:
            continue
        stage = read_stage(path, None, cfg, verify_files=False)
        seen[path] = stage
        pending.extend(stage.input(name) for name in stage.manifest["inputs"])
    return seen


def report(cfg: RunConfig, paths: Sequence[Path], out: Path) -> dict:
    """Sum the query ledgers of every stage upstream of ``paths`` into ``queries.csv``."""
    stages = _collect_stages(paths, cfg)
    ledger = QueryLedger()
    scored = None
    for path in sorted(stages):
        if (path / LEDGER).exists():
            ledger.merge(QueryLedger.from_json((path / LEDGER).read_text()))
        if stages[path].manifest["stage"] == "select":
            if scored is not None:
                raise ManifestMismatch("report inputs trace back to more than one selection")
            scored = stages[path].manifest["scored_images"]
    result = query_report(ledger, scored)
    _write_csv(out / "queries.csv", ["phase", "count", "cumulative"],
               ([r["phase"], r["count"], r["cumulative"]] for r in result["rows"]))
    (out / "report.json").write_text(json.dumps(result, indent=2))
    write_manifest(out, "report", cfg, {f"source_{i}": p for i, p in enumerate(sorted(stages))})
    return result


# ---------------------------------------------------------------------------
# e2e

def e2e(cfg: RunConfig, out: Path, jobs: int = 1) -> dict:
    """Every stage in order under ``out``; all three schemes are attacked and evaluated."""
    dirs = {name: out / name for name in ("bench", "select", "train", "interpolate", "report")}
    for name in ("bench", "select", "train"):
        prepare_out_dir(dirs[name], name)
    bench_report = bench_init(cfg, dirs["bench"])
    select(cfg, dirs["bench"], dirs["select"])
    train_summary = train(cfg, dirs["select"], dirs["train"])
    summaries, eval_dirs = {}, []
    for scheme in Scheme:
        attack_dir = out / "attack" / scheme.value
        eval_dir = out / "eval" / scheme.value
        prepare_out_dir(attack_dir, "attack")
        prepare_out_dir(eval_dir, "eval")
        attack(cfg, dirs["train"], dirs["select"], attack_dir, scheme.value, jobs=jobs)
        summaries[scheme.value] = evaluate_stage(cfg, attack_dir, eval_dir).summary()
        eval_dirs.append(eval_dir)
    prepare_out_dir(dirs["interpolate"], "interpolate")
    traces = interpolate(cfg, dirs["train"], dirs["select"], dirs["interpolate"])
    prepare_out_dir(dirs["report"], "report")
    queries = report(cfg, eval_dirs + [dirs["interpolate"]], dirs["report"])
    shutil.copyfile(out / "eval" / Scheme.ALIGNED_ENSEMBLE.value / "metrics.csv",
                    out / "metrics.csv")
    summary = {
        "attack_acc": {k: v["attack_acc"] for k, v in summaries.items()},
        "schemes": summaries,
        "mean_spearman": traces["mean_spearman"],
        "queries": {r["phase"]: r["count"] for r in queries["rows"]},
        "query_violations": queries["violations"],
        "generator_unchanged": train_summary["generator_unchanged"],
        "classifiers": bench_report["classifiers"],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "e2e", cfg, {})
    return summary


def pin_torch_threads() -> None:
    """One intra-op thread, so float reductions (and outputs) do not depend on --jobs.

    ``--jobs`` parallelizes across identities instead.
    """
    torch.set_num_threads(1)
