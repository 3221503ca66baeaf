"""Desk-scale benchmark world: blob generator, synthetic identities, classifiers."""

from .classifier import ClassifierHandle, SmallConvNet, train_classifier
from .data import Benchmark, BenchmarkSpec, ImageSet, SyntheticIdentity, build_benchmark
from .generator import BlobGenerator, render, splat

__all__ = [
    "Benchmark", "BenchmarkSpec", "BlobGenerator", "ClassifierHandle", "ImageSet",
    "SmallConvNet", "SyntheticIdentity", "build_benchmark", "render", "splat", "train_classifier",
]
