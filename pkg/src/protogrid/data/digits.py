"""Digit pools: 28x28 grayscale digit images with labels.

Two sources are supported:

* a directory with the classic IDX pair (``*images-idx3-ubyte[.gz]`` /
  ``*labels-idx1-ubyte[.gz]``), i.e. standard MNIST files, or a portable
  ``images.pgt`` / ``labels.pgt`` tensor pair;
* :func:`render_digit_pool`, a procedural generator producing handwriting-like
  digits for fully offline experiments. Stroke skeletons are warped per sample
  by a random affine map, vertex jitter, and a smooth elastic field, so the
  intra-class variability is tunable via ``distortion``.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..tensorfile import load_tensor, save_tensor

DIGIT_SIZE = 28


@dataclass(frozen=True)
class DigitPool:
    """Grayscale digit images in [0,1] with labels 0-9."""

    images: np.ndarray  # (n, 28, 28) float32
    labels: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.images.ndim != 3 or self.images.shape[1:] != (DIGIT_SIZE, DIGIT_SIZE):
            raise ValueError(f"digit images must be (n, 28, 28), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("label count must match image count")

    def by_class(self) -> dict[int, np.ndarray]:
        """Indices of pool entries per digit class."""
        return {d: np.nonzero(self.labels == d)[0] for d in range(10)}


def _arc(cx, cy, rx, ry, a0, a1, n=14):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _digit_strokes(digit: int) -> list[np.ndarray]:
    """Polyline skeletons in a unit box; x grows right, y grows downward."""
    if digit == 0:
        return [_arc(0.5, 0.5, 0.32, 0.42, 90, 450, 24)]
    if digit == 1:
        return [np.array([[0.32, 0.28], [0.52, 0.12], [0.52, 0.88]])]
    if digit == 2:
        return [
            _arc(0.48, 0.30, 0.28, 0.20, 180, 360, 12),
            np.array([[0.76, 0.30], [0.70, 0.50], [0.30, 0.82], [0.24, 0.88]]),
            np.array([[0.24, 0.88], [0.78, 0.88]]),
        ]
    if digit == 3:
        return [
            _arc(0.45, 0.30, 0.26, 0.19, 150, 400, 14),
            _arc(0.45, 0.70, 0.29, 0.21, -40, 210, 14),
        ]
    if digit == 4:
        return [
            np.array([[0.62, 0.10], [0.22, 0.62], [0.80, 0.62]]),
            np.array([[0.62, 0.10], [0.62, 0.90]]),
        ]
    if digit == 5:
        return [
            np.array([[0.74, 0.12], [0.30, 0.12], [0.27, 0.47]]),
            _arc(0.47, 0.66, 0.26, 0.23, 160, 420, 16),
        ]
    if digit == 6:
        return [
            np.array([[0.66, 0.10], [0.42, 0.36], [0.30, 0.62]]),
            _arc(0.48, 0.68, 0.22, 0.21, 0, 360, 18),
        ]
    if digit == 7:
        return [
            np.array([[0.22, 0.13], [0.78, 0.13], [0.42, 0.88]]),
        ]
    if digit == 8:
        return [
            _arc(0.5, 0.30, 0.23, 0.18, 0, 360, 16),
            _arc(0.5, 0.69, 0.27, 0.21, 0, 360, 16),
        ]
    if digit == 9:
        return [
            _arc(0.52, 0.32, 0.22, 0.21, 0, 360, 18),
            np.array([[0.72, 0.38], [0.62, 0.66], [0.42, 0.90]]),
        ]
    raise ValueError(f"digit must be 0-9, got {digit}")


def _segment_distance(px: np.ndarray, py: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each pixel to a polyline, vectorized over segments."""
    d = np.full(px.shape, np.inf)
    for (x0, y0), (x1, y1) in zip(poly[:-1], poly[1:]):
        vx, vy = x1 - x0, y1 - y0
        ln2 = vx * vx + vy * vy
        if ln2 < 1e-12:
            dist = np.hypot(px - x0, py - y0)
        else:
            t = np.clip(((px - x0) * vx + (py - y0) * vy) / ln2, 0.0, 1.0)
            dist = np.hypot(px - (x0 + t * vx), py - (y0 + t * vy))
        d = np.minimum(d, dist)
    return d


def _smooth_field(rng: np.random.Generator, strength: float) -> np.ndarray:
    """Bilinear upsampling of a coarse random grid; one (28,28,2) warp field."""
    coarse = rng.normal(0.0, strength, size=(4, 4, 2))
    xs = np.linspace(0, 3, DIGIT_SIZE)
    i0 = np.minimum(xs.astype(int), 2)
    f = xs - i0
    rows = coarse[i0] * (1 - f)[:, None, None] + coarse[i0 + 1] * f[:, None, None]
    field = rows[:, i0] * (1 - f)[None, :, None] + rows[:, i0 + 1] * f[None, :, None]
    return field


def render_digit(digit: int, rng: np.random.Generator, distortion: float = 1.0) -> np.ndarray:
    """Render one 28x28 digit image in [0,1] with randomized handwriting style."""
    strokes = [s.copy() for s in _digit_strokes(digit)]

    angle = rng.normal(0.0, 0.16) * distortion
    shear = rng.normal(0.0, 0.18) * distortion
    sx = 1.0 + rng.normal(0.0, 0.12) * distortion
    sy = 1.0 + rng.normal(0.0, 0.10) * distortion
    tx, ty = rng.normal(0.0, 0.035, size=2) * distortion
    ca, sa = np.cos(angle), np.sin(angle)
    mat = np.array([[ca * sx, (-sa + shear) * sy], [sa * sx, ca * sy]])

    warped = []
    for poly in strokes:
        pts = poly - 0.5
        pts = pts @ mat.T + 0.5 + np.array([tx, ty])
        pts += rng.normal(0.0, 0.012 * distortion, size=pts.shape)
        warped.append(pts)

    margin = 3.0
    scale = DIGIT_SIZE - 2 * margin
    yy, xx = np.mgrid[0:DIGIT_SIZE, 0:DIGIT_SIZE].astype(np.float64)

    field = _smooth_field(rng, 0.9 * distortion)
    sample_x = xx + field[..., 0]
    sample_y = yy + field[..., 1]

    radius = rng.uniform(0.85, 1.5)
    img = np.zeros((DIGIT_SIZE, DIGIT_SIZE))
    for poly in warped:
        pix = poly * scale + margin
        dist = _segment_distance(sample_x, sample_y, pix)
        img = np.maximum(img, np.clip(1.0 - (dist - radius) / 1.1, 0.0, 1.0))

    img *= rng.uniform(0.75, 1.0)
    img[img < 0.03] = 0.0
    return img.astype(np.float32)


def render_digit_pool(n_per_class: int, seed: int, distortion: float = 1.0) -> DigitPool:
    """Procedural pool with ``n_per_class`` images of each digit 0-9."""
    rng = np.random.default_rng(seed)
    images = np.empty((10 * n_per_class, DIGIT_SIZE, DIGIT_SIZE), dtype=np.float32)
    labels = np.empty(10 * n_per_class, dtype=np.int64)
    i = 0
    for digit in range(10):
        for _ in range(n_per_class):
            images[i] = render_digit(digit, rng, distortion=distortion)
            labels[i] = digit
            i += 1
    return DigitPool(images=images, labels=labels)


def save_digit_pool(pool: DigitPool, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_tensor(out_dir / "images.pgt", pool.images.astype(np.float32))
    save_tensor(out_dir / "labels.pgt", pool.labels.astype(np.uint8))


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    magic, = struct.unpack_from(">I", blob, 0)
    if magic == 2051:
        n, rows, cols = struct.unpack_from(">III", blob, 4)
        data = np.frombuffer(blob, dtype=np.uint8, offset=16, count=n * rows * cols)
        return data.reshape(n, rows, cols)
    if magic == 2049:
        (n,) = struct.unpack_from(">I", blob, 4)
        return np.frombuffer(blob, dtype=np.uint8, offset=8, count=n)
    raise ValueError(f"{path}: not an IDX image/label file (magic {magic})")


def _find_idx_pair(directory: Path) -> tuple[Path, Path] | None:
    images = sorted(directory.glob("*images-idx3-ubyte*"))
    labels = sorted(directory.glob("*labels-idx1-ubyte*"))
    if images and labels:
        return images[0], labels[0]
    return None


def load_digit_pool(source: str | Path) -> DigitPool:
    """Load a digit pool from a directory holding either format."""
    source = Path(source)
    if not source.is_dir():
        raise FileNotFoundError(f"digit source directory not found: {source}")
    if (source / "images.pgt").exists():
        images = load_tensor(source / "images.pgt").astype(np.float32)
        labels = load_tensor(source / "labels.pgt").astype(np.int64)
        if images.max() > 1.0:
            images = images / 255.0
        return DigitPool(images=images, labels=labels)
    pair = _find_idx_pair(source)
    if pair is None:
        raise FileNotFoundError(
            f"{source} holds neither images.pgt/labels.pgt nor an IDX image/label pair"
        )
    images = _read_idx(pair[0]).astype(np.float32) / 255.0
    labels = _read_idx(pair[1]).astype(np.int64)
    return DigitPool(images=images, labels=labels)
