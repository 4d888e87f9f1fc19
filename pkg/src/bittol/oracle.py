"""Slow reference implementations used to cross-check the fast paths.

Everything here is written for clarity, not speed: plain Python loops,
dense ±1 integer arrays, and exhaustive enumeration.  The test suite
compares the packed engine and the analytic tolerance formulas against
these; nothing in this module is used on the hot path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .bitcore import BitMatrix, unpack_signs
from .errors import ShapeError
from .model import (
    BnnModel,
    ConvLayer,
    FcLayer,
    MaxPoolLayer,
    ThresholdLayer,
)

EXHAUSTIVE_FANIN_CAP = 25  # enumeration above this is unreasonably slow


def dense_forward(model: BnnModel, x: np.ndarray) -> np.ndarray:
    """Naive ±1 integer forward pass, one sample, no packing anywhere."""
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape}, expected {model.input_shape}")
    value = x.astype(np.int64)
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            signs = unpack_signs(layer.weights).astype(np.int64)
            c, h, w = value.shape
            pad_fill = 0 if layer.first else -1
            padded = np.full((c, h + 2, w + 2), pad_fill, dtype=np.int64)
            padded[:, 1:-1, 1:-1] = value
            out = np.zeros((layer.out_ch, h, w), dtype=np.int64)
            for f in range(layer.out_ch):
                taps = signs[f].reshape(c, 3, 3)
                for i in range(h):
                    for j in range(w):
                        acc = 0
                        for ci in range(c):
                            for ki in range(3):
                                for kj in range(3):
                                    acc += taps[ci, ki, kj] * padded[ci, i + ki, j + kj]
                        out[f, i, j] = acc
            value = out
        elif isinstance(layer, FcLayer):
            signs = unpack_signs(layer.weights).astype(np.int64)
            flat = value.reshape(-1)
            out = np.zeros(layer.out_dim, dtype=np.int64)
            for n in range(layer.out_dim):
                acc = 0
                for k in range(layer.in_dim):
                    acc += int(signs[n, k]) * int(flat[k])
                out[n] = acc
            value = out
        elif isinstance(layer, ThresholdLayer):
            s = layer.thresholds
            d = layer.directions
            if value.ndim == 1:
                value = np.array(
                    [d[n] * (1 if value[n] > s[n] else -1) for n in range(layer.width)],
                    dtype=np.int64,
                )
            else:
                out = np.empty_like(value)
                for n in range(value.shape[0]):
                    out[n] = np.where(value[n] > s[n], 1, -1) * int(d[n])
                value = out
        elif isinstance(layer, MaxPoolLayer):
            c, h, w = value.shape
            out = np.empty((c, h // 2, w // 2), dtype=np.int64)
            for ci in range(c):
                for i in range(h // 2):
                    for j in range(w // 2):
                        block = value[ci, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                        out[ci, i, j] = block.max()
            value = out
    return value


@dataclass
class FlipWitness:
    """A minimal weight-flip set observed to change one neuron's output."""

    neuron: int
    input_index: int
    budget: int
    flipped: tuple
    before: int
    after: int


def neuron_output(w: np.ndarray, x: np.ndarray, s: int) -> int:
    """±1 output of one neuron: sign(w·x - s - 1/2) with w ±1."""
    h = int(np.dot(w.astype(np.int64), x.astype(np.int64)))
    return 1 if h > s else -1


def min_flips_to_change(
    w: np.ndarray, x: np.ndarray, s: int, max_flips: int
) -> tuple:
    """Smallest weight-flip subset (size <= max_flips) that changes the output.

    Returns (k, subset) for the first subset found at the smallest size k,
    or (None, None) if no subset within budget changes the decision.
    Exhaustive over all C(fan_in, k); callers keep fan_in small.
    """
    fan_in = w.shape[0]
    if fan_in > EXHAUSTIVE_FANIN_CAP:
        raise ValueError(f"fan-in {fan_in} too large for exhaustive search")
    base = neuron_output(w, x, s)
    for k in range(1, max_flips + 1):
        for subset in combinations(range(fan_in), k):
            wf = w.copy()
            wf[list(subset)] *= -1
            if neuron_output(wf, x, s) != base:
                return k, subset
    return None, None


def _flip_deltas(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Change in w·x caused by flipping each single weight: -2 * w_k * x_k."""
    return -2 * w.astype(np.int64) * x.astype(np.int64)


def verify_neuron_tolerance(
    w: np.ndarray, x: np.ndarray, s: int, b: int, z_div: int = 1
) -> FlipWitness | None:
    """Check that tolerance >= b protects against floor(b/2) weight flips.

    The claim under test: if |h - s - 1/2| / z_div >= b then no set of at
    most floor(b/2) weight flips changes the thresholded output.  Runs the
    exhaustive search and returns a FlipWitness when the claim fails for
    this (w, x, s), else None.  The caller guarantees the tolerance
    precondition holds.
    """
    budget = b // 2
    if budget == 0:
        return None
    k, subset = min_flips_to_change(w, x, s, budget)
    if k is None:
        return None
    before = neuron_output(w, x, s)
    wf = w.copy()
    wf[list(subset)] *= -1
    return FlipWitness(
        neuron=0,
        input_index=0,
        budget=b,
        flipped=subset,
        before=before,
        after=neuron_output(wf, x, s),
    )


def scan_flip_subsets(
    w_rows: np.ndarray,
    x_cols: np.ndarray,
    s: np.ndarray,
    budget: int,
    z_div: int = 1,
) -> list:
    """Exhaustively test every (neuron, input, flip subset) combination.

    w_rows: (N, K) ±1 weights; x_cols: (M, K) inputs (±1, or integers for
    a first-layer check); s: (N,) integer thresholds.  For every neuron n
    and input m whose tolerance floor(|2(h-s)-1| / (2*z_div)) is at least
    2*budget, every flip subset of size <= budget is applied and the
    output recomputed from scratch.  Returns a list of FlipWitness for
    each violation (expected empty).

    Vectorized over subsets per size: for size k the deltas of the k
    flipped weights are summed via precomputed index arrays, so the
    recomputation is a genuine full evaluation of h' = h + sum(deltas)
    for every subset, not a shortcut through the theorem being tested.
    """
    n, k_in = w_rows.shape
    m = x_cols.shape[0]
    if k_in > EXHAUSTIVE_FANIN_CAP:
        raise ValueError(f"fan-in {k_in} too large for exhaustive scan")
    h = w_rows.astype(np.int64) @ x_cols.astype(np.int64).T  # (N, M)
    out = np.where(h > s[:, None], 1, -1)
    # integer tolerance floor: b_max = floor(|2(h-s)-1| / (2*z_div))
    num = np.abs(2 * (h - s[:, None]) - 1)
    b_max = num // (2 * z_div)
    eligible = b_max >= 2 * budget
    witnesses: list = []
    deltas = np.einsum("nk,mk->nmk", -2 * w_rows.astype(np.int64), x_cols.astype(np.int64))
    for size in range(1, budget + 1):
        idx = np.array(list(combinations(range(k_in), size)), dtype=np.int64)
        # (N, M, C(k_in, size)) total change to h for every subset of this size
        subset_delta = deltas[:, :, idx].sum(axis=3)
        h_new = h[:, :, None] + subset_delta
        out_new = np.where(h_new > s[:, None, None], 1, -1)
        bad = (out_new != out[:, :, None]) & eligible[:, :, None]
        for ni, mi, si in zip(*np.nonzero(bad)):
            witnesses.append(
                FlipWitness(
                    neuron=int(ni),
                    input_index=int(mi),
                    budget=2 * budget,
                    flipped=tuple(int(v) for v in idx[si]),
                    before=int(out[ni, mi]),
                    after=int(out_new[ni, mi, si]),
                )
            )
    return witnesses


def scan_input_flip_subsets(
    w_rows: np.ndarray, x_cols: np.ndarray, s: np.ndarray, budget: int
) -> list:
    """Same exhaustive scan but flipping ±1 input bits instead of weights.

    Only meaningful for binary (non-first) layers: flipping x_k changes
    w_k * x_k exactly like flipping w_k, so the same tolerance bound must
    hold.  Deltas are recomputed from the inputs to keep this an
    independent check rather than a reuse of the weight-flip scan.
    """
    if not np.all(np.abs(x_cols) == 1):
        raise ValueError("input-flip scan requires ±1 inputs")
    n, k_in = w_rows.shape
    if k_in > EXHAUSTIVE_FANIN_CAP:
        raise ValueError(f"fan-in {k_in} too large for exhaustive scan")
    h = w_rows.astype(np.int64) @ x_cols.astype(np.int64).T
    out = np.where(h > s[:, None], 1, -1)
    num = np.abs(2 * (h - s[:, None]) - 1)
    b_max = num // 2
    eligible = b_max >= 2 * budget
    witnesses: list = []
    deltas = np.einsum("nk,mk->nmk", w_rows.astype(np.int64), -2 * x_cols.astype(np.int64))
    for size in range(1, budget + 1):
        idx = np.array(list(combinations(range(k_in), size)), dtype=np.int64)
        subset_delta = deltas[:, :, idx].sum(axis=3)
        h_new = h[:, :, None] + subset_delta
        out_new = np.where(h_new > s[:, None, None], 1, -1)
        bad = (out_new != out[:, :, None]) & eligible[:, :, None]
        for ni, mi, si in zip(*np.nonzero(bad)):
            witnesses.append(
                FlipWitness(
                    neuron=int(ni),
                    input_index=int(mi),
                    budget=2 * budget,
                    flipped=tuple(int(v) for v in idx[si]),
                    before=int(out[ni, mi]),
                    after=int(out_new[ni, mi, si]),
                )
            )
    return witnesses


def all_sign_inputs(fan_in: int) -> np.ndarray:
    """Every ±1 input vector of the given width, as a (2^fan_in, fan_in) array."""
    if fan_in > 20:
        raise ValueError(f"refusing to enumerate 2^{fan_in} inputs")
    codes = np.arange(1 << fan_in, dtype=np.int64)
    return (((codes[:, None] >> np.arange(fan_in)) & 1) * 2 - 1).astype(np.int64)


def theorem_harness(
    neurons: int = 200,
    fan_in: int = 9,
    span: int = 9,
    bs: tuple = (2, 4, 8),
    seed: int = 0,
    variant: str = "weights",
    z: int = 3,
    samples: int = 512,
    chunk: int = 50,
) -> dict:
    """Randomized-but-exhaustive certification of the flip-safety bound.

    Draws `neurons` random ±1 weight rows with integer thresholds in
    [-span, span], then for every margin threshold b exhaustively applies
    every flip subset of size <= floor(b/2) to every (neuron, input) pair
    whose margin is at least b, and recomputes the output.  Variants:

    * "weights": hidden-layer neuron over all 2^fan_in ±1 inputs.
    * "inputs": same, but the input bits are flipped instead (only
      defined away from the first layer, where inputs are not binary).
    * "first-layer": integer inputs in {0..z}, margin scaled by 1/z,
      over `samples` random inputs.

    Returns a summary dict with the number of pairs checked per b and a
    list of witnesses (expected empty; any witness is a correctness bug).
    """
    if variant not in ("weights", "inputs", "first-layer"):
        raise ValueError(f"unknown variant {variant!r}")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    w = (rng.integers(0, 2, (neurons, fan_in)) * 2 - 1).astype(np.int64)
    s = rng.integers(-span, span + 1, neurons).astype(np.int64)
    if variant == "first-layer":
        x = rng.integers(0, z + 1, (samples, fan_in)).astype(np.int64)
        z_div = z
    else:
        x = all_sign_inputs(fan_in)
        z_div = 1

    h = w @ x.T
    num = np.abs(2 * (h - s[:, None]) - 1)
    b_max = num // (2 * z_div)

    checked = {}
    witnesses = []
    for b in bs:
        budget = int(b) // 2
        checked[int(b)] = int(np.count_nonzero(b_max >= 2 * budget))
        if budget == 0:
            continue
        for start in range(0, neurons, chunk):
            stop = min(start + chunk, neurons)
            if variant == "inputs":
                found = scan_input_flip_subsets(w[start:stop], x, s[start:stop], budget)
            else:
                found = scan_flip_subsets(w[start:stop], x, s[start:stop], budget, z_div)
            for wit in found:
                wit.neuron += start
                witnesses.append(wit)
    return {
        "variant": variant,
        "neurons": neurons,
        "fan_in": fan_in,
        "inputs": x.shape[0],
        "bs": [int(b) for b in bs],
        "z": z_div,
        "checked": checked,
        "witnesses": witnesses,
    }


def naive_variance(values) -> float:
    """Population variance via accurate summation, for cross-checking."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("variance of an empty sequence")
    mean = math.fsum(vals) / n
    return math.fsum((v - mean) ** 2 for v in vals) / n


def naive_mean(values) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise ValueError("mean of an empty sequence")
    return math.fsum(vals) / len(vals)
