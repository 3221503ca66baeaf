"""Torch helpers: seeded module construction and flat parameter blobs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, TypeVar

import numpy as np
import torch
from torch import nn

from .core import RandomSource

M = TypeVar("M", bound=nn.Module)


def seeded_init(factory: Callable[[], M], rng: RandomSource) -> M:
    """Build a module with torch's default init, drawing from ``rng`` only."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.integer_seed())
        return factory()


def state_to_blob(module: nn.Module) -> tuple[bytes, list[dict]]:
    """Concatenate every tensor in the state dict as float32; returns bytes and a layout."""
    chunks, layout = [], []
    for name, tensor in module.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype(np.float32, copy=False)
        layout.append({"name": name, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks), layout


def blob_to_state(blob: bytes, layout: list[dict]) -> dict[str, torch.Tensor]:
    flat = np.frombuffer(blob, dtype=np.float32)
    state, offset = {}, 0
    for entry in layout:
        size = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + size > flat.size:
            raise ValueError("parameter blob is shorter than its layout")
        state[entry["name"]] = torch.tensor(flat[offset:offset + size].reshape(entry["shape"]))
        offset += size
    if offset != flat.size:
        raise ValueError("parameter blob is longer than its layout")
    return state


def module_hash(module: nn.Module) -> str:
    blob, _ = state_to_blob(module)
    return hashlib.sha256(blob).hexdigest()


def save_module(module: nn.Module, path, meta: dict) -> None:
    """Write ``<path>.f32`` (parameters) and ``<path>.json`` (layout, meta, hash)."""
    path = Path(path)
    blob, layout = state_to_blob(module)
    path.with_suffix(".f32").write_bytes(blob)
    manifest = {"meta": meta, "layout": layout, "content_hash": hashlib.sha256(blob).hexdigest()}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))


def load_module_state(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Inverse of ``save_module``; returns (state dict, meta). Raises ValueError on corruption."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".f32").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["content_hash"]:
        raise ValueError(f"{path}: parameter blob does not match its hash")
    return blob_to_state(blob, manifest["layout"]), manifest["meta"]
