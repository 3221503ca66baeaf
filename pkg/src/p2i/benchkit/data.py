"""Synthetic identities and datasets rendered through the blob generator."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..core import RandomSource, RunConfig
from ..errors import SpecTooSmall
from .generator import BlobGenerator

SYNTHETIC_IDENTITY = -1


@dataclass(frozen=True)
class BenchmarkSpec:
    n_private_ids: int = 16
    n_public_ids: int = 64
    images_per_id: int = 20
    n_synthetic: int = 640
    height: int = 32
    width: int = 32
    channels: int = 3
    blobs_per_layer: int = 2
    latent_layers: int = 6
    latent_dim: int = 8
    noise_scale: float = 0.15
    attribute_dim: int = 8
    idiosyncratic: float = 0.3
    sigma_min: float = 1.5
    seed: int = 0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "BenchmarkSpec":
        return cls(n_private_ids=cfg.num_classes, n_public_ids=cfg.n_public_ids,
                   images_per_id=cfg.images_per_id, n_synthetic=cfg.n_synthetic,
                   height=cfg.height, width=cfg.width, channels=cfg.channels,
                   blobs_per_layer=cfg.blobs_per_layer, latent_layers=cfg.latent_layers,
                   latent_dim=cfg.latent_dim, noise_scale=cfg.noise_scale,
                   attribute_dim=cfg.attribute_dim, idiosyncratic=cfg.idiosyncratic,
                   sigma_min=cfg.sigma_min, seed=cfg.seed)


@dataclass
class SyntheticIdentity:
    id: int
    w_id: np.ndarray
    noise_scale: float


@dataclass
class ImageSet:
    """Images (N, Ch, H, W) with their source identity and ground-truth latent."""

    split: str
    images: np.ndarray
    identities: np.ndarray
    latents: np.ndarray
    refs: list[str]

    def __len__(self):
        return len(self.refs)


@dataclass
class Benchmark:
    generator: BlobGenerator
    private_ids: list[SyntheticIdentity]
    public_ids: list[SyntheticIdentity]
    private: ImageSet
    public: ImageSet
    synthetic: ImageSet

    def centroid(self, identity: int) -> np.ndarray:
        for ident in self.private_ids + self.public_ids:
            if ident.id == identity:
                return ident.w_id
        raise KeyError(identity)


def quantize(images: np.ndarray) -> np.ndarray:
    """Snap [-1, 1] values onto the 8-bit grid so PNG storage is lossless."""
    levels = np.round((np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5)
    return (levels / 127.5 - 1.0).astype(np.float32)


def render_batch(gen: BlobGenerator, latents: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(latents), batch_size):
            w = torch.as_tensor(latents[start:start + batch_size], dtype=torch.float32)
            out.append(gen(w).numpy())
    return np.concatenate(out, axis=0)


class LatentPrior:
    """Shared-attribute prior over latent codes.

    ``w = sqrt(1 - r^2) * reshape(A z) + r * g`` with ``z ~ N(0, I_k)`` and
    ``g ~ N(0, I)``, so each coordinate has unit variance while most of the
    variation lives in a ``k``-dimensional attribute subspace that every
    identity draws from.
    """

    def __init__(self, shape: tuple[int, int], attribute_dim: int, idiosyncratic: float,
                 rng: np.random.Generator):
        self.shape = shape
        self.idiosyncratic = idiosyncratic
        size = int(np.prod(shape))
        self.mixing = rng.standard_normal((size, attribute_dim)) / np.sqrt(attribute_dim)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.mixing.shape[1]))
        g = rng.standard_normal((n, self.mixing.shape[0]))
        r = self.idiosyncratic
        w = np.sqrt(1.0 - r * r) * z @ self.mixing.T + r * g
        return w.reshape((n,) + self.shape)


def _identity_set(gen, identities, per_id, split, rng) -> ImageSet:
    latents, labels = [], []
    for ident in identities:
        noise = rng.standard_normal((per_id,) + ident.w_id.shape) * ident.noise_scale
        latents.append(ident.w_id[None] + noise)
        labels.extend([ident.id] * per_id)
    latents = np.concatenate(latents).astype(np.float32)
    refs = [f"images/{split}_{i:05d}.png" for i in range(len(latents))]
    return ImageSet(split, quantize(render_batch(gen, latents)), np.array(labels), latents, refs)


def build_benchmark(spec: BenchmarkSpec) -> Benchmark:
    """Generator, identities and the private/public/synthetic image sets for ``spec``.

    Private identities are ``0..n_private-1``, public ones follow on from
    there, so the two sets never overlap. Identity centroids and synthetic
    latents share one ``LatentPrior``; synthetic images carry identity -1.
    """
    if spec.n_private_ids < 2 or spec.images_per_id < 2:
        raise SpecTooSmall("need at least 2 private identities and 2 images per identity")
    root = RandomSource(spec.seed).substream("benchkit")
    gen = BlobGenerator(spec.latent_layers, spec.latent_dim, spec.blobs_per_layer, spec.height,
                        spec.width, spec.channels, spec.sigma_min, rng=root.substream("generator"))
    gen.requires_grad_(False)
    shape = (spec.latent_layers, spec.latent_dim)
    prior = LatentPrior(shape, spec.attribute_dim, spec.idiosyncratic, root.substream("prior").np)
    n_total = spec.n_private_ids + spec.n_public_ids
    centroids = prior.sample(n_total, root.substream("identities").np)
    idents = [SyntheticIdentity(i, centroids[i], spec.noise_scale) for i in range(n_total)]
    private_ids, public_ids = idents[:spec.n_private_ids], idents[spec.n_private_ids:]
    private = _identity_set(gen, private_ids, spec.images_per_id, "private",
                            root.substream("private").np)
    public = _identity_set(gen, public_ids, spec.images_per_id, "public",
                           root.substream("public").np)
    syn_lat = prior.sample(spec.n_synthetic, root.substream("synthetic").np).astype(np.float32)
    synthetic = ImageSet("synthetic", quantize(render_batch(gen, syn_lat)) if len(syn_lat)
                         else np.zeros((0,) + gen.image_shape, np.float32),
                         np.full(len(syn_lat), SYNTHETIC_IDENTITY),
                         syn_lat, [f"images/synthetic_{i:05d}.png" for i in range(len(syn_lat))])
    return Benchmark(gen, private_ids, public_ids, private, public, synthetic)


# ---------------------------------------------------------------------------
# persistence: PNG images + index.csv, float32 latents with JSON sidecars

def to_uint8(image: np.ndarray) -> np.ndarray:
    """(Ch, H, W) in [-1, 1] -> (H, W, Ch) uint8."""
    hwc = np.transpose(np.asarray(image), (1, 2, 0))
    return np.round((np.clip(hwc, -1, 1) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    return (np.transpose(pixels, (2, 0, 1)).astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def save_png(path: Path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    mode = "L" if pixels.shape[2] == 1 else "RGB"
    Image.fromarray(pixels[..., 0] if mode == "L" else pixels, mode=mode).save(path)


def load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return from_uint8(np.asarray(img))


def save_latent(path: Path, latent: np.ndarray) -> None:
    np.ascontiguousarray(latent, dtype=np.float32).tofile(path)


def load_latent(path: Path, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype=np.float32)
    return arr.reshape(shape)


def save_image_sets(root: Path, sets: list[ImageSet], centroids: dict[int, np.ndarray]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "latents").mkdir(parents=True, exist_ok=True)
    shape = None
    with open(root / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "identity", "split", "ground_truth_latent_path"])
        for s in sets:
            for ref, img, ident, lat in zip(s.refs, s.images, s.identities, s.latents):
                shape = list(lat.shape)
                lat_ref = "latents/" + Path(ref).stem + ".f32"
                save_png(root / ref, img)
                save_latent(root / lat_ref, lat)
                writer.writerow([ref, int(ident), s.split, lat_ref])
    ids = sorted(centroids)
    if ids:
        shape = list(next(iter(centroids.values())).shape)
        save_latent(root / "latents" / "centroids.f32", np.stack([centroids[i] for i in ids]))
    with open(root / "latents" / "shape.json", "w") as fh:
        json.dump({"latent_shape": shape, "dtype": "float32", "centroid_ids": ids}, fh, indent=2)


def load_image_sets(root: Path) -> tuple[dict[str, ImageSet], dict[int, np.ndarray]]:
    root = Path(root)
    with open(root / "latents" / "shape.json") as fh:
        meta = json.load(fh)
    shape = tuple(meta["latent_shape"])
    rows: dict[str, list] = {}
    with open(root / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["split"], []).append(row)
    sets = {}
    for split, entries in rows.items():
        sets[split] = ImageSet(
            split,
            np.stack([load_png(root / r["path"]) for r in entries]),
            np.array([int(r["identity"]) for r in entries]),
            np.stack([load_latent(root / r["ground_truth_latent_path"], shape) for r in entries]),
            [r["path"] for r in entries],
        )
    centroids = {}
    if meta.get("centroid_ids"):
        stacked = load_latent(root / "latents" / "centroids.f32", (len(meta["centroid_ids"]),) + shape)
        centroids = {int(i): stacked[k] for k, i in enumerate(meta["centroid_ids"])}
    return sets, centroids
