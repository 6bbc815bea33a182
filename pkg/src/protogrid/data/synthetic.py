"""Synthetic channel-rule dataset built from a pool of digit images.

Each 56x56x3 sample is assembled from four 28x28 quadrants:

* channel 1 carries one "free" digit (0-9) copied into all four quadrants;
* channel 2 carries one even digit in the two quadrants of a randomly chosen
  side (right or left), the other side stays zero;
* channel 3 carries one odd digit in the same selected side.

The label is the even digit when the right side was selected, the odd digit
otherwise, so channel 1 is irrelevant by construction.

Per sample the seeded generator draws, in this fixed order: side, free digit
class, free pool index, even class, even pool index, odd class, odd pool
index. Samples get sequential ids and are split sequentially into
train/validation/test, so generation is reproducible from the seed alone.
"""

from __future__ import annotations

import numpy as np

from .digits import DigitPool
from .types import DatasetSplit, SplitPart

EVEN_DIGITS = (0, 2, 4, 6, 8)
ODD_DIGITS = (1, 3, 5, 7, 9)


class GenerationError(RuntimeError):
    pass


def split_sizes(n_total: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n_train = round(n_total * fractions[0])
    n_val = round(n_total * fractions[1])
    n_test = n_total - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"degenerate split sizes {(n_train, n_val, n_test)} for n_total={n_total}")
    return n_train, n_val, n_test


def generate_synthetic_mnist(
    pool: DigitPool,
    n_total: int = 12000,
    fractions: tuple[float, float, float] = (0.72, 0.18, 0.10),
    seed: int = 0,
) -> DatasetSplit:
    """Build the channel-rule dataset from ``pool``, deterministically per seed."""
    by_class = pool.by_class()
    for digit in range(10):
        if by_class[digit].size == 0:
            raise GenerationError(f"digit pool has no images of class {digit}")

    n_train, n_val, n_test = split_sizes(n_total, fractions)
    rng = np.random.default_rng(seed)

    images = np.zeros((n_total, 56, 56, 3), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    for i in range(n_total):
        right = bool(rng.integers(2))
        free_cls = int(rng.integers(10))
        free_img = pool.images[by_class[free_cls][rng.integers(by_class[free_cls].size)]]
        even_cls = EVEN_DIGITS[rng.integers(5)]
        even_img = pool.images[by_class[even_cls][rng.integers(by_class[even_cls].size)]]
        odd_cls = ODD_DIGITS[rng.integers(5)]
        odd_img = pool.images[by_class[odd_cls][rng.integers(by_class[odd_cls].size)]]

        for r0 in (0, 28):
            for c0 in (0, 28):
                images[i, r0 : r0 + 28, c0 : c0 + 28, 0] = free_img
        cols = slice(28, 56) if right else slice(0, 28)
        for r0 in (0, 28):
            images[i, r0 : r0 + 28, cols, 1] = even_img
            images[i, r0 : r0 + 28, cols, 2] = odd_img
        labels[i] = even_cls if right else odd_cls

    ids = np.arange(n_total, dtype=np.int64)
    bounds = (0, n_train, n_train + n_val, n_total)
    parts = [
        SplitPart(images[a:b], labels[a:b], ids[a:b])
        for a, b in zip(bounds[:-1], bounds[1:])
    ]
    return DatasetSplit(
        train=parts[0],
        validation=parts[1],
        test=parts[2],
        k=10,
        channel_names=["free_digit", "even_digit", "odd_digit"],
    )


def append_noise_channel(split: DatasetSplit, seed: int) -> DatasetSplit:
    """Return a copy with one extra channel of uniform [0,1) noise per pixel.

    Noise is drawn from one seeded generator in split order (train, then
    validation, then test); labels and ids are unchanged.
    """
    rng = np.random.default_rng(seed)

    def extend(part: SplitPart) -> SplitPart:
        noise = rng.random(size=part.images.shape[:3] + (1,), dtype=np.float32)
        return SplitPart(np.concatenate([part.images, noise], axis=3), part.labels, part.ids)

    return DatasetSplit(
        train=extend(split.train),
        validation=extend(split.validation),
        test=extend(split.test),
        k=split.k,
        channel_names=split.channel_names + ["noise"],
    )
