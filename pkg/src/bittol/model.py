"""Layer stack and forward passes for binarized networks.

Architectures follow the compact string notation "In-C64-MP2-FC2048-10":
every convolutional or fully connected layer except the last is implicitly
followed by an integer-threshold activation, and 2x2 max-pooling acts on
the ±1 activations.  The first learnable layer consumes raw integer inputs
in {0, ..., Z}; everything downstream is ±1.

Two forward paths are provided: `forward` runs one sample through the
bit-packed XNOR/popcount engine (optionally reading weights through the
transient fault model, optionally recording pre-activations), and
`forward_batch` evaluates many samples at once with dense integer
arithmetic.  Both produce identical integer scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import fault
from .bitcore import BitMatrix, apply_mask_xor, unpack_signs, xnor_popcount_matmul
from .errors import ArchError, ShapeError

# layer kind tags (also the container format tags)
FIRST_CONV = "FirstConv3x3"
BIN_CONV = "BinConv3x3"
MAX_POOL = "MaxPool2"
THRESHOLD = "ThresholdAct"
BIN_FC = "BinFC"
FIRST_FC = "FirstFC"
OUTPUT_FC = "OutputFC"

CONV_KERNEL = 3  # filters are 3x3 only
POOL_WINDOW = 2  # pooling windows are 2x2 only


@dataclass
class ConvLayer:
    """3x3 stride-1 binary convolution; rows of `weights` are filters."""

    weights: BitMatrix  # (out_ch, in_ch * 9), filter taps in (c, ky, kx) order
    in_ch: int
    out_ch: int
    first: bool = False

    @property
    def kind(self) -> str:
        return FIRST_CONV if self.first else BIN_CONV

    @property
    def fan_in(self) -> int:
        return self.in_ch * CONV_KERNEL * CONV_KERNEL


@dataclass
class FcLayer:
    weights: BitMatrix  # (out_dim, in_dim)
    in_dim: int
    out_dim: int
    first: bool = False
    output: bool = False

    @property
    def kind(self) -> str:
        if self.output:
            return OUTPUT_FC
        return FIRST_FC if self.first else BIN_FC

    @property
    def fan_in(self) -> int:
        return self.in_dim


@dataclass
class ThresholdLayer:
    """Integer thresholds s and per-neuron comparison direction d."""

    thresholds: np.ndarray  # (n,) int32
    directions: np.ndarray  # (n,) int8, ±1
    first_layer: bool = False

    kind = THRESHOLD

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.int32)
        self.directions = np.asarray(self.directions, dtype=np.int8)
        if self.thresholds.shape != self.directions.shape:
            raise ShapeError("threshold and direction counts differ")
        if not np.all(np.abs(self.directions) == 1):
            raise ValueError("directions must be ±1")

    @property
    def width(self) -> int:
        return self.thresholds.shape[0]


@dataclass
class MaxPoolLayer:
    kind = MAX_POOL


@dataclass
class BatchNormParams:
    """Per-neuron batch-norm parameters (training time only)."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5


def threshold_activation(h, s, d):
    """±1 activation d * sign(h - s - 1/2); never zero for integer h, s."""
    return np.where(np.asarray(h) > np.asarray(s), 1, -1).astype(np.int8) * np.asarray(
        d, dtype=np.int8
    )


def _bn_positive(h, gamma: float, beta: float, mean: float, sigma: float):
    # shared by folding and any eval-mode reference; float64 throughout
    return gamma * ((np.asarray(h, dtype=np.float64) - mean) / sigma) + beta > 0


def fold_batchnorm_neuron(
    gamma: float, beta: float, mean: float, var: float, eps: float = 1e-5
) -> tuple:
    """Fold one neuron's batch-norm + sign activation into (s, d).

    The folded pair satisfies threshold_activation(h, s, d) == +1 exactly
    when gamma * (h - mean) / sqrt(var + eps) + beta > 0, for every
    integer h.  The candidate s = floor(theta) is nudged across the
    boundary where float rounding or an exactly-integer crossing point
    would break that equivalence.
    """
    if var + eps <= 0:
        raise ValueError(f"batch-norm variance {var} + eps {eps} not positive")
    if gamma == 0:
        raise ValueError("gamma == 0 cannot be folded to a threshold")
    sigma = math.sqrt(var + eps)
    theta = mean - beta * sigma / gamma
    if not math.isfinite(theta):
        raise ValueError("batch-norm crossing point is not finite")
    d = 1 if gamma > 0 else -1
    s = math.floor(theta)
    if d > 0:
        # want: positive exactly for h >= s + 1
        while _bn_positive(s, gamma, beta, mean, sigma):
            s -= 1
        while not _bn_positive(s + 1, gamma, beta, mean, sigma):
            s += 1
    else:
        # want: positive exactly for h <= s
        while not _bn_positive(s, gamma, beta, mean, sigma):
            s -= 1
        while _bn_positive(s + 1, gamma, beta, mean, sigma):
            s += 1
    return s, d


def fold_batchnorm(bn: BatchNormParams) -> ThresholdLayer:
    """Fold per-neuron batch-norm parameters into a threshold layer."""
    pairs = [
        fold_batchnorm_neuron(g, b, m, v, bn.eps)
        for g, b, m, v in zip(bn.gamma, bn.beta, bn.mean, bn.var)
    ]
    s = np.array([p[0] for p in pairs], dtype=np.int32)
    d = np.array([p[1] for p in pairs], dtype=np.int8)
    return ThresholdLayer(s, d)


def maxpool2(plane: np.ndarray) -> np.ndarray:
    """2x2 max pooling over the trailing two axes of a ±1 array."""
    h, w = plane.shape[-2:]
    if h % POOL_WINDOW or w % POOL_WINDOW:
        raise ShapeError(f"cannot 2x2-pool odd spatial dims {h}x{w}")
    shaped = plane.reshape(*plane.shape[:-2], h // 2, 2, w // 2, 2)
    return shaped.max(axis=(-3, -1))


class BnnModel:
    """Immutable inference model: layer stack plus input metadata."""

    def __init__(self, layers: list, input_shape: tuple, z_max: int, n_classes: int, arch: str):
        self.layers = layers
        self.input_shape = tuple(int(v) for v in input_shape)
        self.z_max = int(z_max)
        self.n_classes = int(n_classes)
        self.arch = arch
        self._dense_cache = None
        self._validate()

    def _validate(self):
        shapes = trace_shapes(self.layers, self.input_shape)
        out = shapes[-1]
        if out != (self.n_classes,):
            raise ArchError(f"stack produces {out}, expected ({self.n_classes},) scores")
        for layer in self.layers:
            if isinstance(layer, (ConvLayer, FcLayer)):
                scale = self.z_max if getattr(layer, "first", False) else 1
                # batch paths accumulate in float32; keep |h| exactly representable
                if layer.fan_in * scale >= 2**24:
                    raise ArchError(f"fan-in {layer.fan_in} x scale {scale} too large")

    def weight_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, (ConvLayer, FcLayer))]

    def threshold_layers(self) -> list:
        return [l for l in self.layers if isinstance(l, ThresholdLayer)]

    def n_neurons(self) -> int:
        """Neurons outside the output layer (one per filter / FC unit)."""
        return sum(t.width for t in self.threshold_layers())

    def _dense_weights(self) -> list:
        # unpacked ±1 copies of the stored weights, built once
        if self._dense_cache is None:
            self._dense_cache = [
                unpack_signs(l.weights).astype(np.float32) for l in self.weight_layers()
            ]
        return self._dense_cache

    def __eq__(self, other) -> bool:
        if not isinstance(other, BnnModel):
            return False
        if (self.input_shape, self.z_max, self.n_classes, self.arch) != (
            other.input_shape,
            other.z_max,
            other.n_classes,
            other.arch,
        ):
            return False
        if len(self.layers) != len(other.layers):
            return False
        for a, b in zip(self.layers, other.layers):
            if a.kind != b.kind:
                return False
            if isinstance(a, (ConvLayer, FcLayer)) and a.weights != b.weights:
                return False
            if isinstance(a, ThresholdLayer) and not (
                np.array_equal(a.thresholds, b.thresholds)
                and np.array_equal(a.directions, b.directions)
                and a.first_layer == b.first_layer
            ):
                return False
        return True


@dataclass
class ForwardTrace:
    """Recorded pre-activations for every threshold layer of one forward."""

    entries: list = field(default_factory=list)  # (h, thresholds, directions, first_layer)

    def add(self, h, layer: ThresholdLayer):
        self.entries.append((h, layer.thresholds, layer.directions, layer.first_layer))

    def position_count(self) -> int:
        return sum(h.size for h, _, _, _ in self.entries)


# ---------------------------------------------------------------------------
# architecture strings


def parse_arch(arch: str) -> list:
    """Split "In-C64-MP2-FC2048-10" into validated tokens."""
    tokens = arch.strip().split("-")
    if len(tokens) < 3 or tokens[0] != "In":
        raise ArchError(f"architecture {arch!r} must look like In-...-<classes>")
    body = []
    for tok in tokens[1:-1]:
        if tok == "MP2":
            body.append(("MP2", None))
        elif tok.startswith("C") and tok[1:].isdigit():
            body.append(("C", int(tok[1:])))
        elif tok.startswith("FC") and tok[2:].isdigit():
            body.append(("FC", int(tok[2:])))
        else:
            raise ArchError(f"unknown architecture token {tok!r} in {arch!r}")
    if not tokens[-1].isdigit():
        raise ArchError(f"architecture {arch!r} must end with a class count")
    n_classes = int(tokens[-1])
    if not any(kind in ("C", "FC") for kind, _ in body):
        raise ArchError(f"architecture {arch!r} has no hidden layer")
    return body + [("OUT", n_classes)]


def build_layers(arch: str, input_shape: tuple, weight_init) -> tuple:
    """Instantiate the layer stack; `weight_init(rows, cols)` supplies bits.

    Returns (layers, n_classes).  Thresholds start at 0 with direction +1;
    training or deserialization replaces them.
    """
    tokens = parse_arch(arch)
    layers = []
    shape = tuple(input_shape)
    if len(shape) != 3:
        raise ArchError(f"input shape {shape} must be (channels, height, width)")
    spatial = True
    first = True
    for kind, width in tokens:
        if kind == "C":
            if not spatial:
                raise ArchError("convolution after flattening is unsupported")
            c, h, w = shape
            layers.append(ConvLayer(weight_init(width, c * 9), c, width, first=first))
            layers.append(
                ThresholdLayer(np.zeros(width, np.int32), np.ones(width, np.int8), first)
            )
            shape = (width, h, w)
            first = False
        elif kind == "MP2":
            if not spatial or first:
                raise ArchError("MP2 needs a preceding convolutional stage")
            c, h, w = shape
            if h % 2 or w % 2:
                raise ArchError(f"MP2 on odd feature map {h}x{w}")
            layers.append(MaxPoolLayer())
            shape = (c, h // 2, w // 2)
        elif kind in ("FC", "OUT"):
            in_dim = int(np.prod(shape)) if spatial else shape[0]
            spatial = False
            out_dim = width
            layers.append(
                FcLayer(weight_init(out_dim, in_dim), in_dim, out_dim, first=first,
                        output=(kind == "OUT"))
            )
            if kind == "FC":
                layers.append(
                    ThresholdLayer(np.zeros(out_dim, np.int32), np.ones(out_dim, np.int8), first)
                )
            shape = (out_dim,)
            first = False
    return layers, tokens[-1][1]


def trace_shapes(layers: list, input_shape: tuple) -> list:
    """Value shape after each layer, validating the chain as it goes."""
    shape = tuple(input_shape)
    shapes = [shape]
    for layer in layers:
        if isinstance(layer, ConvLayer):
            if len(shape) != 3 or shape[0] != layer.in_ch:
                raise ShapeError(f"conv expects ({layer.in_ch}, H, W), got {shape}")
            shape = (layer.out_ch, shape[1], shape[2])
        elif isinstance(layer, FcLayer):
            flat = int(np.prod(shape))
            if flat != layer.in_dim:
                raise ShapeError(f"fc expects {layer.in_dim} inputs, got {shape}")
            shape = (layer.out_dim,)
        elif isinstance(layer, ThresholdLayer):
            if shape[0] != layer.width:
                raise ShapeError(f"threshold width {layer.width} vs value {shape}")
        elif isinstance(layer, MaxPoolLayer):
            c, h, w = shape
            if h % 2 or w % 2:
                raise ShapeError(f"2x2 pool on odd map {h}x{w}")
            shape = (c, h // 2, w // 2)
        shapes.append(shape)
    return shapes


def random_model(
    arch: str,
    input_shape: tuple,
    z_max: int = 255,
    seed: int = 0,
    threshold_span: int = 0,
) -> BnnModel:
    """Model with random ±1 weights; thresholds uniform in ±threshold_span."""
    rng = fault.derive_stream(seed, fault.STREAM_INIT)

    def init(rows, cols):
        return BitMatrix.from_bits(rng.integers(0, 2, (rows, cols), dtype=np.uint8))

    layers, n_classes = build_layers(arch, input_shape, init)
    if threshold_span:
        for layer in layers:
            if isinstance(layer, ThresholdLayer):
                layer.thresholds = rng.integers(
                    -threshold_span, threshold_span + 1, layer.width
                ).astype(np.int32)
                layer.directions = (rng.integers(0, 2, layer.width) * 2 - 1).astype(np.int8)
    return BnnModel(layers, input_shape, z_max, n_classes, arch)


# ---------------------------------------------------------------------------
# packed single-sample forward (the XNOR/popcount engine)


def _read_weights(layer, inject, trial, layer_idx, sample) -> BitMatrix:
    if inject is None or inject.p == 0:
        return layer.weights
    return fault.corrupted_read(layer.weights, inject, (trial, layer_idx), sample)


def _conv_patches_bits(bits: np.ndarray) -> np.ndarray:
    """im2col for a (C, H, W) 0/1 map, zero-bit (-1) padded, 3x3 stride 1."""
    c, h, w = bits.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=bits.dtype)
    padded[:, 1:-1, 1:-1] = bits
    windows = sliding_window_view(padded, (CONV_KERNEL, CONV_KERNEL), axis=(1, 2))
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def _conv_patches_int(x: np.ndarray) -> np.ndarray:
    """im2col for a (C, H, W) integer image, zero padded, 3x3 stride 1."""
    c, h, w = x.shape
    padded = np.zeros((c, h + 2, w + 2), dtype=np.int64)
    padded[:, 1:-1, 1:-1] = x
    windows = sliding_window_view(padded, (CONV_KERNEL, CONV_KERNEL), axis=(1, 2))
    return windows.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)


def forward(
    model: BnnModel,
    x: np.ndarray,
    inject: fault.FaultConfig | None = None,
    trace: bool = False,
    trial: int = 0,
    sample: int = 0,
):
    """Run one sample through the packed engine.

    Returns (scores, trace) where scores is an int64 vector of class
    scores and trace is a ForwardTrace or None.  With `inject`, every
    weight matrix is read through a fresh flip mask derived from
    (inject.seed, trial, layer, sample); stored weights are untouched.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        raise ShapeError(f"input dtype {x.dtype} is not integer")
    if x.shape != model.input_shape:
        raise ShapeError(f"input shape {x.shape}, model expects {model.input_shape}")
    if x.min() < 0 or x.max() > model.z_max:
        raise ValueError(f"input values outside [0, {model.z_max}]")

    value = x.astype(np.int64)
    rec = ForwardTrace() if trace else None
    layer_idx = 0
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            weights = _read_weights(layer, inject, trial, layer_idx, sample)
            layer_idx += 1
            c, h, w = value.shape
            if layer.first:
                patches = _conv_patches_int(value)  # (H*W, 9c)
                signs = unpack_signs(weights).astype(np.int64)  # (F, 9c)
                value = (patches @ signs.T).T.reshape(layer.out_ch, h, w)
            else:
                bits = (value > 0).astype(np.uint8)
                cols = BitMatrix.from_bits(_conv_patches_bits(bits))
                value = xnor_popcount_matmul(weights, cols).reshape(layer.out_ch, h, w)
        elif isinstance(layer, FcLayer):
            weights = _read_weights(layer, inject, trial, layer_idx, sample)
            layer_idx += 1
            flat = value.reshape(-1)
            if layer.first:
                signs = unpack_signs(weights).astype(np.int64)
                value = signs @ flat
            else:
                row = BitMatrix.from_bits((flat > 0).astype(np.uint8)[None, :])
                value = xnor_popcount_matmul(weights, row)[:, 0]
        elif isinstance(layer, ThresholdLayer):
            h = value
            if rec is not None:
                rec.add(h.copy(), layer)
            if h.ndim == 1:
                value = threshold_activation(h, layer.thresholds, layer.directions)
            else:
                value = threshold_activation(
                    h, layer.thresholds[:, None, None], layer.directions[:, None, None]
                )
        elif isinstance(layer, MaxPoolLayer):
            value = maxpool2(value)
    return value.astype(np.int64), rec


# ---------------------------------------------------------------------------
# dense batched forward (vectorized over samples; integer-exact)


@dataclass
class BatchTrace:
    """Per-threshold-layer pre-activations for a batch of samples."""

    entries: list = field(default_factory=list)  # (h, thresholds, directions, first_layer)


def _batch_corrupt_signs(layer, inject, trial, layer_idx, start, count):
    """±1 weight stacks (count, rows, cols) read through per-sample masks."""
    w = layer.weights
    rng = fault.derive_stream(inject.seed, fault.STREAM_EVAL, trial, layer_idx)
    if start:
        fault.seek_sample(rng, start, w.rows, w.cols)
    masks = fault.flip_mask_block(w.rows, w.cols, inject.p, rng, count)
    corrupted = w.words[None, :, :] ^ masks
    as_bytes = corrupted.view(np.uint8).reshape(count * w.rows, -1)
    bits = np.unpackbits(as_bytes, axis=1, bitorder="little")[:, : w.cols]
    return (bits.astype(np.float32) * 2 - 1).reshape(count, w.rows, w.cols)


def _batch_conv(value, signs, pad_value=0.0):
    """Convolve (S, C, H, W) values with ±1 filters (F, C*9) or (S, F, C*9).

    Border handling must match the packed engine: the first layer pads
    with integer 0, binary layers pad with -1 so every tap is a full ±1
    product and the parity of each pre-activation stays fixed.
    """
    s, c, h, w = value.shape
    pad = np.full((s, c, h + 2, w + 2), pad_value, dtype=value.dtype)
    pad[:, :, 1:-1, 1:-1] = value
    windows = sliding_window_view(pad, (CONV_KERNEL, CONV_KERNEL), axis=(2, 3))
    patches = windows.transpose(0, 2, 3, 1, 4, 5).reshape(s, h * w, c * 9)
    if signs.ndim == 2:
        out = patches @ signs.T.astype(value.dtype)  # (S, HW, F)
        return out.transpose(0, 2, 1).reshape(s, -1, h, w)
    out = np.einsum("spk,sfk->sfp", patches, signs.astype(value.dtype))
    return out.reshape(s, -1, h, w)


def forward_batch(
    model: BnnModel,
    x: np.ndarray,
    inject: fault.FaultConfig | None = None,
    trial: int = 0,
    trace: bool = False,
    keep_acts: bool = False,
    chunk: int = 512,
):
    """Evaluate a batch (S, C, H, W) of integer images.

    Returns (scores, trace, acts): scores (S, classes) int64; trace a
    BatchTrace or None; acts a per-layer list of post-layer values or
    None.  Per-sample fault masks match the single-sample `forward` bit
    for bit.  Work is chunked to bound memory.
    """
    x = np.asarray(x)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"batch shape {x.shape[1:]} vs model {model.input_shape}")
    corrupt = inject is not None and inject.p > 0
    total = x.shape[0]
    if keep_acts and corrupt:
        raise ValueError("activation capture is only supported on clean forwards")

    scores = np.empty((total, model.n_classes), dtype=np.int64)
    rec = BatchTrace() if trace else None
    acts: list | None = [None] * len(model.layers) if keep_acts else None
    chunk_traces: list = []
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        value = x[start:stop].astype(np.float32)
        count = stop - start
        layer_idx = 0
        t_idx = 0
        for li, layer in enumerate(model.layers):
            if isinstance(layer, (ConvLayer, FcLayer)):
                if corrupt:
                    signs = _batch_corrupt_signs(layer, inject, trial, layer_idx, start, count)
                else:
                    signs = model._dense_weights()[layer_idx]
                layer_idx += 1
                if isinstance(layer, ConvLayer):
                    value = _batch_conv(value, signs, 0.0 if layer.first else -1.0)
                else:
                    flat = value.reshape(count, -1)
                    if signs.ndim == 2:
                        value = flat @ signs.T
                    else:
                        value = np.einsum("si,soi->so", flat, signs)
            elif isinstance(layer, ThresholdLayer):
                h = value.astype(np.int32)
                if trace:
                    if len(chunk_traces) <= t_idx:
                        chunk_traces.append([])
                    chunk_traces[t_idx].append(h)
                t_idx += 1
                s = layer.thresholds
                d = layer.directions
                if h.ndim > 2:
                    s = s[:, None, None]
                    d = d[:, None, None]
                value = (np.where(h > s, 1, -1) * d).astype(np.float32)
            elif isinstance(layer, MaxPoolLayer):
                value = maxpool2(value)
            if keep_acts:
                piece = value.astype(np.int32) if isinstance(layer, (ConvLayer, FcLayer)) else value.astype(np.int8)
                acts[li] = piece if acts[li] is None else np.concatenate([acts[li], piece])
        scores[start:stop] = value.astype(np.int64)
    if trace:
        for t_idx, pieces in enumerate(chunk_traces):
            layer = model.threshold_layers()[t_idx]
            rec.entries.append(
                (np.concatenate(pieces), layer.thresholds, layer.directions, layer.first_layer)
            )
    return scores, rec, acts


def resume_batch(model: BnnModel, start_layer: int, value: np.ndarray) -> np.ndarray:
    """Re-run layers[start_layer:] on a batch of intermediate values."""
    value = value.astype(np.float32)
    count = value.shape[0]
    layer_idx = sum(
        1 for l in model.layers[:start_layer] if isinstance(l, (ConvLayer, FcLayer))
    )
    for layer in model.layers[start_layer:]:
        if isinstance(layer, (ConvLayer, FcLayer)):
            signs = model._dense_weights()[layer_idx]
            layer_idx += 1
            if isinstance(layer, ConvLayer):
                value = _batch_conv(value, signs, 0.0 if layer.first else -1.0)
            else:
                value = value.reshape(count, -1) @ signs.T
        elif isinstance(layer, ThresholdLayer):
            h = value.astype(np.int32)
            s = layer.thresholds
            d = layer.directions
            if h.ndim > 2:
                s = s[:, None, None]
                d = d[:, None, None]
            value = (np.where(h > s, 1, -1) * d).astype(np.float32)
        elif isinstance(layer, MaxPoolLayer):
            value = maxpool2(value)
    return value.astype(np.int64)
