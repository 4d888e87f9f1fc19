"""Transient symmetric bit-error model for weight reads.

Each read of a packed weight matrix goes through a freshly sampled flip
mask: every logical bit is flipped independently with probability p, and
the stored bits are never modified.  All randomness derives from one
64-bit seed through named Philox substreams, so any mask is reproducible
from (seed, stream path, sample index) alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bitcore import BitMask, BitMatrix, apply_mask_xor

# substream namespaces (first spawn_key component)
STREAM_EVAL = 0
STREAM_TRAIN = 1
STREAM_SHUFFLE = 2
STREAM_INIT = 3

SCOPE_WEIGHTS = "weights"  # extension point: activation-bit flips


@dataclass(frozen=True)
class FaultConfig:
    """Bit-error probability and the seed all flip masks derive from."""

    p: float
    seed: int
    scope: str = SCOPE_WEIGHTS

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"bit-error probability {self.p} outside [0, 1]")
        if self.scope != SCOPE_WEIGHTS:
            raise ValueError(f"unsupported flip scope {self.scope!r}")


def derive_stream(seed: int, *path: int) -> np.random.Generator:
    """Independent, reproducible RNG stream for a (seed, path) pair."""
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def draws_per_mask(rows: int, cols: int) -> int:
    """Uniform draws consumed per mask, padded to a Philox block boundary.

    Padding to a multiple of 4 lets seek_sample() position a stream at any
    sample index with a counter advance instead of drawing and discarding.
    """
    n = rows * cols
    return (n + 3) // 4 * 4


def seek_sample(rng: np.random.Generator, sample: int, rows: int, cols: int) -> None:
    """Advance `rng` to the start of the given sample's mask block."""
    rng.bit_generator.advance(sample * (draws_per_mask(rows, cols) // 4))


def sample_flip_mask(rows: int, cols: int, p: float, rng: np.random.Generator) -> BitMask:
    """One mask: each logical bit set independently with probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bit-error probability {p} outside [0, 1]")
    draws = rng.random(draws_per_mask(rows, cols))
    bits = (draws[: rows * cols] < p).astype(np.uint8).reshape(rows, cols)
    return BitMatrix.from_bits(bits)


def flip_mask_block(
    rows: int, cols: int, p: float, rng: np.random.Generator, count: int
) -> np.ndarray:
    """Masks for `count` consecutive samples, as (count, rows, words) words.

    Row i equals the mask sample_flip_mask would produce for the i-th
    consecutive sample of the same stream.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"bit-error probability {p} outside [0, 1]")
    draws = rng.random((count, draws_per_mask(rows, cols)))
    bits = (draws[:, : rows * cols] < p).astype(np.uint8).reshape(count * rows, cols)
    return BitMatrix.from_bits(bits).words.reshape(count, rows, -1)


def corrupted_read(
    weights: BitMatrix, cfg: FaultConfig, stream: tuple, sample: int = 0
) -> BitMatrix:
    """Read `weights` through a fresh flip mask; the source is unmodified.

    `stream` identifies the read, e.g. (trial, layer); `sample` selects a
    mask block within that stream, so per-sample reads stay addressable.
    """
    rng = derive_stream(cfg.seed, STREAM_EVAL, *stream)
    if sample:
        seek_sample(rng, sample, weights.rows, weights.cols)
    mask = sample_flip_mask(weights.rows, weights.cols, cfg.p, rng)
    return apply_mask_xor(weights, mask)
