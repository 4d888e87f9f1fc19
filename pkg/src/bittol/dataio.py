"""Dataset ingestion, the model container format, and report files.

Loaders return immutable integer-pixel datasets; nothing here normalizes
or rescales (the first network layer consumes raw values in {0..Z}).
The model container is a little-endian binary format with a trailing
CRC32 so that a damaged file is rejected loudly instead of showing up
later as mysteriously corrupted weights.
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .bitcore import BitMatrix, word_count
from .errors import DataFormatError
from .model import (
    BIN_CONV,
    BIN_FC,
    FIRST_CONV,
    FIRST_FC,
    MAX_POOL,
    OUTPUT_FC,
    THRESHOLD,
    BnnModel,
    ConvLayer,
    FcLayer,
    MaxPoolLayer,
    ThresholdLayer,
)

log = logging.getLogger("bittol")

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

MODEL_MAGIC = b"BTOL"
MODEL_VERSION = 1

_KIND_TAGS = {
    FIRST_CONV: 1,
    BIN_CONV: 2,
    MAX_POOL: 3,
    THRESHOLD: 4,
    BIN_FC: 5,
    FIRST_FC: 6,
    OUTPUT_FC: 7,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}

FASHION_ENV = "BITTOL_FASHION_DIR"


@dataclass(frozen=True)
class Dataset:
    """Integer images in {0..z_max} with class labels."""

    images: np.ndarray  # (S, C, H, W)
    labels: np.ndarray  # (S,)
    n_classes: int
    z_max: int = 255
    split: str = ""

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (S, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError("label count does not match image count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataFormatError(f"labels outside [0, {self.n_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > self.z_max):
            raise DataFormatError(f"pixel values outside [0, {self.z_max}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple:
        return self.images.shape[1:]

    def subset(self, count: int) -> "Dataset":
        return Dataset(
            self.images[:count], self.labels[:count], self.n_classes, self.z_max, self.split
        )


def _open_maybe_gzip(path: str):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path: str, labels_path: str, split: str = "") -> Dataset:
    """Load an IDX image/label file pair (gzip transparently accepted)."""
    with _open_maybe_gzip(images_path) as f:
        raw = f.read()
    if len(raw) < 16:
        raise DataFormatError(f"{images_path}: truncated IDX header")
    magic, count, height, width = struct.unpack(">IIII", raw[:16])
    if magic != IDX_MAGIC_IMAGES:
        raise DataFormatError(f"{images_path}: bad IDX image magic 0x{magic:08x}")
    expect = 16 + count * height * width
    if len(raw) != expect:
        raise DataFormatError(f"{images_path}: expected {expect} bytes, found {len(raw)}")
    images = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, height, width)

    with _open_maybe_gzip(labels_path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataFormatError(f"{labels_path}: truncated IDX header")
    magic, lcount = struct.unpack(">II", raw[:8])
    if magic != IDX_MAGIC_LABELS:
        raise DataFormatError(f"{labels_path}: bad IDX label magic 0x{magic:08x}")
    if len(raw) != 8 + lcount:
        raise DataFormatError(f"{labels_path}: expected {8 + lcount} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)
    if lcount != count:
        raise DataFormatError(f"image count {count} != label count {lcount}")
    n_classes = int(labels.max()) + 1 if count else 0
    return Dataset(images, labels, n_classes=max(n_classes, 10), split=split)


def load_cifar10_bin(batch_paths, split: str = "") -> Dataset:
    """Load CIFAR-10 binary batches (1 label byte + 3072 pixel bytes each)."""
    record = 1 + 3 * 32 * 32
    images = []
    labels = []
    for path in batch_paths:
        with _open_maybe_gzip(path) as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % record:
            raise DataFormatError(f"{path}: size {len(raw)} not a multiple of {record}")
        block = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        labels.append(block[:, 0].astype(np.int64))
        images.append(block[:, 1:].reshape(-1, 3, 32, 32))
    return Dataset(np.concatenate(images), np.concatenate(labels), n_classes=10, split=split)


def synth_blobs(
    classes: int,
    samples: int,
    dims: tuple,
    separation: float,
    seed: int,
    noise: float = 8.0,
    split: str = "",
    center_seed: int | None = None,
) -> Dataset:
    """Deterministic integer-quantized Gaussian blobs around class centers.

    Class centers sit at 128 + N(0, separation) per pixel; samples add
    N(0, noise) and are clipped to {0..255}.  separation 0 collapses all
    classes onto one center (chance-level task); large separation is
    trivially linearly separable.  Centers are drawn from center_seed
    (defaulting to seed), so train/test splits of one task share centers
    by passing the same center_seed with different seeds.
    """
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if center_seed is None:
        center_seed = seed
    crng = np.random.default_rng(np.random.SeedSequence(center_seed, spawn_key=(16,)))
    centers = 128.0 + crng.normal(0.0, separation, size=(classes,) + tuple(dims))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(17,)))
    labels = rng.integers(0, classes, size=samples)
    pixels = centers[labels] + rng.normal(0.0, noise, size=(samples,) + tuple(dims))
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), n_classes=classes, split=split)


def _box_blur(planes: np.ndarray, passes: int = 2) -> np.ndarray:
    """Repeated 3x3 box filter over the trailing two axes (edge-clamped)."""
    out = planes.astype(np.float64)
    for _ in range(passes):
        padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        acc = np.zeros_like(out)
        for di in range(3):
            for dj in range(3):
                acc += padded[..., di : di + out.shape[-2], dj : dj + out.shape[-1]]
        out = acc / 9.0
    return out


def synth_patterns(
    classes: int,
    samples: int,
    dims: tuple,
    seed: int,
    on_fraction: float = 0.2,
    brightness: float = 320.0,
    noise: float = 24.0,
    split: str = "",
    center_seed: int | None = None,
    clusters: int = 1,
    mix: float = 0.4,
    common_fraction: float = 0.0,
) -> Dataset:
    """Deterministic grayscale images: dark background, bright class motifs.

    Each class gets a fixed smoothed random pattern occupying roughly
    `on_fraction` of the pixels; everything else stays near zero.  Samples
    add pixel noise and are clipped to {0..255}.  Compared with the dense
    blobs of synth_blobs, the mostly-zero background mimics photographed
    objects on black: first-layer sums are dominated by the lit region and
    a flipped weight over a dark pixel barely moves them.

    With clusters > 1 the classes are grouped (round robin) and each
    class pattern blends a shared cluster motif with a class-specific
    one; `mix` is the class-specific share of the field variance.
    Telling clusters apart is then coarse and easy while classes within
    a cluster differ only in detail, the way photographed object
    categories share silhouettes.

    common_fraction > 0 lights one extra motif shared by every image
    regardless of class, mimicking the centered silhouette mass that
    photographed objects share.  It carries no class evidence, but its
    bright pixels are exposed to weight bit errors like any others, so
    it widens the gap between models that trained against such errors
    and models that did not.
    """
    if not 0 < on_fraction < 1:
        raise ValueError("on_fraction must sit strictly between 0 and 1")
    if not 1 <= clusters <= classes:
        raise ValueError(f"clusters {clusters} outside [1, {classes}]")
    if not 0 < mix <= 1:
        raise ValueError("mix must sit in (0, 1]")
    if not 0 <= common_fraction < 1:
        raise ValueError("common_fraction must sit in [0, 1)")
    if center_seed is None:
        center_seed = seed
    crng = np.random.default_rng(np.random.SeedSequence(center_seed, spawn_key=(18,)))
    g = _box_blur(crng.normal(0.0, 1.0, size=(classes,) + tuple(dims)))
    if clusters > 1:
        shared = _box_blur(crng.normal(0.0, 1.0, size=(clusters,) + tuple(dims)))
        owner = np.arange(classes) % clusters
        g = math.sqrt(1.0 - mix) * shared[owner] + math.sqrt(mix) * g
    # per-class cut that lights the requested pixel fraction; smoothing
    # shrinks the variance, so the cut comes from the observed quantile
    flat = g.reshape(classes, -1)
    cuts = np.quantile(flat, 1 - on_fraction, axis=1)
    centers = np.clip((g - cuts.reshape((classes,) + (1,) * len(dims))) * brightness, 0, 255)
    if common_fraction > 0:
        base = _box_blur(crng.normal(0.0, 1.0, size=(1,) + tuple(dims)))[0]
        floor = np.clip((base - np.quantile(base, 1 - common_fraction)) * brightness, 0, 255)
        centers = np.clip(centers + floor, 0, 255)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(19,)))
    labels = rng.integers(0, classes, size=samples)
    pixels = centers[labels] + rng.normal(0.0, noise, size=(samples,) + tuple(dims))
    images = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return Dataset(images, labels.astype(np.int64), n_classes=classes, split=split)


def load_fashion(split: str, data_dir: str | None = None) -> Dataset:
    """Fashion-style 28x28 10-class data for the given split.

    With a directory (argument or the BITTOL_FASHION_DIR environment
    variable) the real IDX files are loaded.  Without one, a deterministic
    synthetic stand-in of the same shape and texture (dark background,
    bright per-class motifs) is generated, and a warning is logged: trend
    experiments still run, but absolute numbers are not comparable to
    results on the real data.
    """
    if split not in ("train", "test"):
        raise ValueError(f"unknown split {split!r}")
    data_dir = data_dir or os.environ.get(FASHION_ENV)
    if data_dir:
        prefix = "train" if split == "train" else "t10k"
        images = _find_idx(data_dir, f"{prefix}-images-idx3-ubyte")
        labels = _find_idx(data_dir, f"{prefix}-labels-idx1-ubyte")
        return load_idx(images, labels, split=split)
    log.warning(
        "no fashion data directory configured (set %s); using a synthetic "
        "28x28 stand-in of the same shape — trends are comparable, absolute "
        "accuracy numbers are not",
        FASHION_ENV,
    )
    count = 60000 if split == "train" else 10000
    seed = 2001 if split == "train" else 2002
    return synth_patterns(10, count, (1, 28, 28), seed=seed, split=split, center_seed=2000)


def _find_idx(data_dir: str, stem: str) -> str:
    for name in (stem, stem + ".gz"):
        path = os.path.join(data_dir, name)
        if os.path.exists(path):
            return path
    raise DataFormatError(f"missing {stem}[.gz] under {data_dir}")


# ---------------------------------------------------------------------------
# model container


def _pack_bitmatrix(out: io.BytesIO, m: BitMatrix):
    out.write(struct.pack("<II", m.rows, m.cols))
    out.write(m.words.astype("<u8").tobytes())


def _read_bitmatrix(buf: memoryview, pos: int) -> tuple:
    rows, cols = struct.unpack_from("<II", buf, pos)
    pos += 8
    nbytes = rows * word_count(cols) * 8
    words = np.frombuffer(buf, dtype="<u8", count=rows * word_count(cols), offset=pos)
    return BitMatrix(rows, cols, words.reshape(rows, word_count(cols)).copy()), pos + nbytes


def save_model(path: str, model: BnnModel):
    """Serialize a model to the little-endian container with CRC32."""
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    arch = model.arch.encode()
    out.write(struct.pack("<HH", MODEL_VERSION, len(arch)))
    out.write(arch)
    out.write(struct.pack("<IIIIII", *model.input_shape, model.z_max, model.n_classes,
                          len(model.layers)))
    for layer in model.layers:
        out.write(struct.pack("<B", _KIND_TAGS[layer.kind]))
        if isinstance(layer, ConvLayer):
            out.write(struct.pack("<II", layer.in_ch, layer.out_ch))
            _pack_bitmatrix(out, layer.weights)
        elif isinstance(layer, FcLayer):
            out.write(struct.pack("<II", layer.in_dim, layer.out_dim))
            _pack_bitmatrix(out, layer.weights)
        elif isinstance(layer, ThresholdLayer):
            out.write(struct.pack("<IB", layer.width, int(layer.first_layer)))
            out.write(layer.thresholds.astype("<i4").tobytes())
            out.write(np.packbits(layer.directions == 1, bitorder="little").tobytes())
    body = out.getvalue()
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_model(path: str) -> BnnModel:
    """Load a model container, verifying magic, version, and checksum."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8 or raw[:4] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model container")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise DataFormatError(f"{path}: checksum mismatch (file damaged?)")
    buf = memoryview(body)
    version, arch_len = struct.unpack_from("<HH", buf, 4)
    if version != MODEL_VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    pos = 8
    arch = bytes(buf[pos : pos + arch_len]).decode()
    pos += arch_len
    c, h, w, z_max, n_classes, n_layers = struct.unpack_from("<IIIIII", buf, pos)
    pos += 24
    layers = []
    for _ in range(n_layers):
        (tag,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        kind = _TAG_KINDS.get(tag)
        if kind is None:
            raise DataFormatError(f"{path}: unknown layer tag {tag}")
        if kind in (FIRST_CONV, BIN_CONV):
            in_ch, out_ch = struct.unpack_from("<II", buf, pos)
            pos += 8
            weights, pos = _read_bitmatrix(buf, pos)
            layers.append(ConvLayer(weights, in_ch, out_ch, first=(kind == FIRST_CONV)))
        elif kind in (FIRST_FC, BIN_FC, OUTPUT_FC):
            in_dim, out_dim = struct.unpack_from("<II", buf, pos)
            pos += 8
            weights, pos = _read_bitmatrix(buf, pos)
            layers.append(
                FcLayer(weights, in_dim, out_dim, first=(kind == FIRST_FC),
                        output=(kind == OUTPUT_FC))
            )
        elif kind == THRESHOLD:
            width, first_flag = struct.unpack_from("<IB", buf, pos)
            pos += 5
            thresholds = np.frombuffer(buf, dtype="<i4", count=width, offset=pos).astype(np.int32)
            pos += width * 4
            nbytes = (width + 7) // 8
            bits = np.unpackbits(
                np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos),
                bitorder="little",
            )[:width]
            pos += nbytes
            directions = (bits.astype(np.int8) * 2 - 1).astype(np.int8)
            layers.append(ThresholdLayer(thresholds, directions, bool(first_flag)))
        else:
            layers.append(MaxPoolLayer())
    if pos != len(body):
        raise DataFormatError(f"{path}: {len(body) - pos} trailing bytes")
    return BnnModel(layers, (c, h, w), z_max, n_classes, arch)


# ---------------------------------------------------------------------------
# report files


def write_json(path: str, payload: dict):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def tolerance_payload(report) -> dict:
    return {
        "grid": list(report.grid),
        "per_b": list(report.per_b),
        "t_bar": report.t_bar,
        "n_samples": report.n_samples,
        "n_neurons": report.n_neurons,
        "per_neuron": np.asarray(report.per_neuron).tolist(),
    }


def importance_payload(report) -> dict:
    return {
        "pi": np.asarray(report.pi).tolist(),
        "pi_mean": report.pi_mean,
        "variance": report.variance,
        "clean_accuracy": report.clean_accuracy,
        "neuron_ids": [list(t) for t in report.neuron_ids],
        "flip_scope": report.flip_scope,
    }


def write_csv(path: str, header: list, rows: list):
    """Plain delimited writer; all cells already stringified by caller."""
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")
