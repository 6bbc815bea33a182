"""Dataset manifests: a flat key-value text file naming per-split tensors.

Schema (``key = value`` lines, ``#`` comments, blank lines ignored)::

    k = 10
    channel_names = olr,u200,u850
    normalize = none                  # none | per_channel_standard
    train_images = train_images.pgt   # rank-4 float32 (n, H, W, C)
    train_labels = train_labels.pgt   # rank-1 uint8
    validation_images = ...
    validation_labels = ...
    test_images = ...
    test_labels = ...

Relative paths resolve against the manifest's directory. Sample ids are
assigned sequentially across train, validation, test, in that order.
``per_channel_standard`` standardizes every channel to zero mean and unit
variance using statistics of the train split only.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from ..tensorfile import load_tensor, save_tensor
from .types import DatasetSplit, SplitPart, channel_stats

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "validation", "test")
_REQUIRED_KEYS = ("k", "channel_names") + tuple(
    f"{s}_{kind}" for s in SPLIT_NAMES for kind in ("images", "labels")
)


def parse_keyvalue(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; duplicate keys are an error."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _resolve_manifest(path: str | Path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.cfg"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    return path


def load_raster_dataset(manifest: str | Path) -> DatasetSplit:
    """Load a DatasetSplit from a manifest, enforcing all split invariants."""
    manifest = _resolve_manifest(manifest)
    base = manifest.parent
    entries = parse_keyvalue(manifest)

    missing = [key for key in _REQUIRED_KEYS if key not in entries]
    if missing:
        raise ValueError(f"{manifest}: missing manifest keys: {', '.join(missing)}")
    k = int(entries["k"])
    channel_names = [name.strip() for name in entries["channel_names"].split(",") if name.strip()]
    normalize = entries.get("normalize", "none")
    if normalize not in ("none", "per_channel_standard"):
        raise ValueError(f"{manifest}: unknown normalize mode {normalize!r}")

    parts: dict[str, SplitPart] = {}
    next_id = 0
    for split in SPLIT_NAMES:
        images = load_tensor(base / entries[f"{split}_images"]).astype(np.float32)
        labels = load_tensor(base / entries[f"{split}_labels"]).astype(np.int64)
        if images.ndim != 4:
            raise ValueError(f"{split} images must be rank-4 (n, H, W, C), got rank {images.ndim}")
        if images.shape[0] == 0:
            raise ValueError(f"{split} split is empty")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise ValueError(f"{split}: {labels.shape[0]} labels for {images.shape[0]} images")
        if images.shape[3] != len(channel_names):
            raise ValueError(
                f"{split}: images carry {images.shape[3]} channels, "
                f"manifest names {len(channel_names)}"
            )
        ids = np.arange(next_id, next_id + images.shape[0], dtype=np.int64)
        next_id += images.shape[0]
        parts[split] = SplitPart(images, labels, ids)

    if normalize == "per_channel_standard":
        mean = parts["train"].images.mean(axis=(0, 1, 2), keepdims=True, dtype=np.float64)
        std = parts["train"].images.std(axis=(0, 1, 2), keepdims=True, dtype=np.float64)
        std = np.where(std < 1e-12, 1.0, std)
        for split, part in parts.items():
            scaled = ((part.images - mean) / std).astype(np.float32)
            parts[split] = SplitPart(scaled, part.labels, part.ids)

    dataset = DatasetSplit(
        train=parts["train"], validation=parts["validation"], test=parts["test"],
        k=k, channel_names=channel_names,
    )
    for split in SPLIT_NAMES:
        for name, stats in zip(channel_names, channel_stats(dataset.part(split))):
            log.info(
                "%s %s: min=%.4g max=%.4g mean=%.4g",
                split, name, stats["min"], stats["max"], stats["mean"],
            )
    return dataset


def save_raster_dataset(dataset: DatasetSplit, out_dir: str | Path, normalize: str = "none") -> Path:
    """Write all splits as tensor files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        f"k = {dataset.k}",
        f"channel_names = {','.join(dataset.channel_names)}",
        f"normalize = {normalize}",
    ]
    for split in SPLIT_NAMES:
        part = dataset.part(split)
        if part.labels.max(initial=0) > 255:
            raise ValueError("labels above 255 are not representable in the manifest label files")
        save_tensor(out_dir / f"{split}_images.pgt", part.images.astype(np.float32))
        save_tensor(out_dir / f"{split}_labels.pgt", part.labels.astype(np.uint8))
        lines.append(f"{split}_images = {split}_images.pgt")
        lines.append(f"{split}_labels = {split}_labels.pgt")
    manifest = out_dir / "manifest.cfg"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
