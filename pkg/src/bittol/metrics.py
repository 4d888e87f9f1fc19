"""Bit-error-tolerance metrics over trained binarized networks.

Two families:

* Margin tolerance.  Each thresholded position carries the margin
  |h - s - 1/2| between its integer pre-activation and the decision
  boundary (scaled by 1/Z in the first layer, whose summands can reach
  ±Z).  A position with margin at least b survives any floor(b/2)
  weight flips, so the fraction of positions clearing a grid of b
  values summarizes how much slack the network has.

* Importance dispersion.  Flipping one neuron's entire activation
  output and measuring the relative accuracy drop gives a per-neuron
  importance; the population variance of those values measures how
  evenly the network spreads its computation.

Both are computed on clean forwards only; fault injection enters solely
through `accuracy_under_ber`.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ShapeError
from .fault import FaultConfig
from .model import BnnModel, ThresholdLayer, forward_batch, resume_batch

DEFAULT_GRID = (2, 4, 8, 16, 32, 64)

FLIP_WHOLE_MAP = "map"
FLIP_PER_POSITION = "position"


@dataclass(frozen=True)
class BGrid:
    """Ascending positive margin thresholds; defaults to powers of two."""

    values: tuple = DEFAULT_GRID

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if not vals:
            raise ValueError("empty threshold grid")
        if any(v <= 0 for v in vals):
            raise ValueError(f"grid values must be positive, got {vals}")
        if any(a >= b for a, b in zip(vals, vals[1:])):
            raise ValueError(f"grid values must be strictly ascending, got {vals}")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def position_tolerance(h: int, s: int, first_layer: bool = False, z: int = 1) -> Fraction:
    """Margin |h - s - 1/2| of one position, exact, scaled by 1/z up front.

    Kept rational so that comparisons against integer grid values never
    hinge on float rounding: the value is |2(h - s) - 1| over 2 (hidden
    layers) or over 2z (first layer).
    """
    if first_layer and z < 1:
        raise ValueError(f"first-layer scale {z} must be >= 1")
    num = abs(2 * (int(h) - int(s)) - 1)
    den = 2 * z if first_layer else 2
    return Fraction(num, den)


def neuron_tolerance(positions, b) -> Fraction:
    """Fraction of a neuron's positions whose margin is at least b."""
    positions = list(positions)
    if not positions:
        raise ValueError("neuron has no recorded positions")
    hits = sum(1 for t in positions if t >= b)
    return Fraction(hits, len(positions))


@dataclass(frozen=True)
class ToleranceReport:
    """Margin-tolerance aggregates for one model over one dataset.

    per_b[k] is the dataset-level fraction for grid value b_k; per_input
    is (samples, grid) and per_neuron (neurons, grid) hold the two
    intermediate aggregation levels, neuron rows ordered by layer then
    unit index.
    """

    grid: tuple
    per_b: tuple
    per_input: np.ndarray
    per_neuron: np.ndarray
    n_samples: int
    n_neurons: int

    @property
    def t_bar(self) -> float:
        return summary_tbar(self)


def summary_tbar(report: ToleranceReport) -> float:
    """Mean of the tolerance tuple across the whole grid."""
    if not report.per_b:
        raise ValueError("empty tolerance tuple")
    return float(np.mean(report.per_b))


def dataset_tolerance(
    model: BnnModel, images: np.ndarray, grid: BGrid | tuple = DEFAULT_GRID, chunk: int = 256
) -> ToleranceReport:
    """Margin-tolerance report from clean forwards over a dataset.

    For every thresholded position the integer comparison
    |2(h - s) - 1| >= b * (2z) decides margin >= b exactly.  Positions
    are averaged per neuron, neurons per input, inputs over the dataset;
    every average is an integer count divided by a fixed denominator, so
    results are deterministic and order-independent.
    """
    if not isinstance(grid, BGrid):
        grid = BGrid(tuple(grid))
    images = np.asarray(images)
    total = images.shape[0]
    if total == 0:
        raise ShapeError("empty dataset")
    bvals = np.array(grid.values, dtype=np.int64)
    n_neurons = model.n_neurons()
    per_input = np.empty((total, len(grid)), dtype=np.float64)
    neuron_sums = np.zeros((n_neurons, len(grid)), dtype=np.float64)
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        _, trace, _ = forward_batch(model, images[start:stop], trace=True, chunk=chunk)
        cols = []
        for h, s, _, first in trace.entries:
            h = h.astype(np.int64)
            width = s.shape[0]
            s_b = s.astype(np.int64).reshape((width,) + (1,) * (h.ndim - 2))
            num = np.abs(2 * (h - s_b) - 1)  # (S, n[, U, V])
            den = 2 * (model.z_max if first else 1)
            # (S, n, B) indicator counts averaged over spatial positions
            hit = num[..., None] >= bvals * den
            if h.ndim > 2:
                frac = hit.mean(axis=tuple(range(2, h.ndim)))
            else:
                frac = hit.astype(np.float64)
            cols.append(frac)
        stacked = np.concatenate(cols, axis=1)  # (S, N, B)
        per_input[start:stop] = stacked.mean(axis=1)
        neuron_sums += stacked.sum(axis=0)
    per_neuron = neuron_sums / total
    per_b = tuple(float(v) for v in per_input.mean(axis=0))
    return ToleranceReport(
        grid=grid.values,
        per_b=per_b,
        per_input=per_input,
        per_neuron=per_neuron,
        n_samples=total,
        n_neurons=n_neurons,
    )


@dataclass(frozen=True)
class ImportanceReport:
    """Per-neuron importance values and their dispersion."""

    pi: np.ndarray
    clean_accuracy: float
    neuron_ids: tuple  # (threshold layer ordinal, unit index) per entry
    flip_scope: str = FLIP_WHOLE_MAP

    @property
    def pi_mean(self) -> float:
        return float(np.mean(self.pi))

    @property
    def variance(self) -> float:
        return importance_variance(self)


def importance_variance(report) -> float:
    """Population variance (divisor N) of the importance values."""
    pi = np.asarray(report.pi if isinstance(report, ImportanceReport) else report, dtype=np.float64)
    if pi.size == 0:
        raise ValueError("no importance values")
    return float(np.var(pi))


def accuracy(model: BnnModel, images: np.ndarray, labels: np.ndarray, chunk: int = 512) -> float:
    """Clean top-1 accuracy; ties go to the lowest class index."""
    scores, _, _ = forward_batch(model, images, chunk=chunk)
    return float(np.mean(np.argmax(scores, axis=1) == labels))


def neuron_importance(
    model: BnnModel,
    images: np.ndarray,
    labels: np.ndarray,
    flip_scope: str = FLIP_WHOLE_MAP,
    chunk: int = 512,
) -> ImportanceReport:
    """Importance of every non-output neuron by activation ablation.

    For each neuron the ±1 activation it produces is inverted for every
    sample (the whole spatial map at once by default) and the network is
    re-evaluated from that point on; the importance is the relative
    accuracy drop (A - A*) / A.  With flip_scope "position" each spatial
    position of a convolutional map is flipped separately instead,
    yielding one value per (neuron, position); the default treats the
    filter as one neuron.
    """
    if flip_scope not in (FLIP_WHOLE_MAP, FLIP_PER_POSITION):
        raise ValueError(f"unknown flip scope {flip_scope!r}")
    images = np.asarray(images)
    labels = np.asarray(labels)
    total = images.shape[0]
    if total == 0 or labels.shape[0] != total:
        raise ShapeError("dataset images/labels mismatch")

    # enumerate flip targets: (layer position, unit index[, u, v])
    targets = []
    ordinal = 0
    for li, layer in enumerate(model.layers):
        if not isinstance(layer, ThresholdLayer):
            continue
        shape = _layer_value_shape(model, li)
        for n in range(layer.width):
            if flip_scope == FLIP_PER_POSITION and len(shape) == 3:
                for u in range(shape[1]):
                    for v in range(shape[2]):
                        targets.append((li, (ordinal, n), (n, u, v)))
            else:
                targets.append((li, (ordinal, n), (n,)))
        ordinal += 1

    clean_correct = 0
    flipped_correct = np.zeros(len(targets), dtype=np.int64)
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        y = labels[start:stop]
        scores, _, acts = forward_batch(model, images[start:stop], keep_acts=True, chunk=chunk)
        clean_correct += int(np.sum(np.argmax(scores, axis=1) == y))
        for t_idx, (li, _, where) in enumerate(targets):
            flipped = acts[li].copy()
            flipped[(slice(None),) + where] *= -1
            out = resume_batch(model, li + 1, flipped)
            flipped_correct[t_idx] += int(np.sum(np.argmax(out, axis=1) == y))

    a_clean = clean_correct / total
    if a_clean == 0:
        raise ValueError("clean accuracy is 0; importance ratio undefined")
    pi = (a_clean - flipped_correct / total) / a_clean
    return ImportanceReport(
        pi=pi,
        clean_accuracy=a_clean,
        neuron_ids=tuple(t[1] for t in targets),
        flip_scope=flip_scope,
    )


def _layer_value_shape(model: BnnModel, layer_index: int) -> tuple:
    from .model import trace_shapes

    return trace_shapes(model.layers, model.input_shape)[layer_index + 1]


def accuracy_under_ber(
    model: BnnModel,
    images: np.ndarray,
    labels: np.ndarray,
    p: float,
    trials: int = 10,
    seed: int = 0,
    chunk: int = 512,
) -> tuple:
    """Mean accuracy over repeated corrupted evaluations at error rate p.

    Every trial re-reads every weight matrix of every sample through a
    fresh flip mask; stored weights are untouched.  Returns (mean,
    per-trial list); with p == 0 every trial equals the clean accuracy.
    """
    if not 0 <= p <= 1:
        raise ValueError(f"bit error rate {p} outside [0, 1]")
    if trials < 1:
        raise ValueError("need at least one trial")
    images = np.asarray(images)
    labels = np.asarray(labels)
    cfg = FaultConfig(p=p, seed=seed)
    accs = []
    for trial in range(trials):
        scores, _, _ = forward_batch(model, images, inject=cfg, trial=trial, chunk=chunk)
        accs.append(float(np.mean(np.argmax(scores, axis=1) == labels)))
    return float(np.mean(accs)), accs
