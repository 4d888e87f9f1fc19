"""Training of binarized networks with latent real-valued weights.

The forward pass binarizes weights and activations deterministically
(sign, with sign(0) = +1); gradients flow through a hard-tanh
straight-through estimator and update the latent weights, which are
clipped back to [-1, 1] after every optimizer step.  Optionally the
binarized weights are read through a fresh flip mask each batch during
the forward pass, which is what trains bit-error tolerance into the
model.

Torch does the autodiff and optimizer bookkeeping; every random draw
(init, shuffling, flip masks) comes from the package's own seeded
streams so runs are reproducible end to end.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import fault
from .bitcore import BitMatrix
from .dataio import Dataset
from .errors import ArchError, DivergenceError
from .model import (
    BatchNormParams,
    BnnModel,
    ConvLayer,
    FcLayer,
    MaxPoolLayer,
    ThresholdLayer,
    fold_batchnorm,
    parse_arch,
)

log = logging.getLogger("bittol")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    lr_halve_every: int = 25
    ber_train: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ber_train <= 1:
            raise ValueError(f"training bit error rate {self.ber_train} outside [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch: halved every lr_halve_every."""
        return self.lr * 0.5 ** ((epoch - 1) // self.lr_halve_every)


class _SignSte(torch.autograd.Function):
    """sign with sign(0) = +1; gradient passed through inside [-1, 1]."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, 1.0, -1.0)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


class _ActSte(torch.autograd.Function):
    """±1 activation on the batch-norm output, same hard-tanh gradient."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x > 0, 1.0, -1.0)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * (x.abs() <= 1).to(grad.dtype)


def sign_ste(x):
    return _SignSte.apply(x)


def act_ste(x):
    return _ActSte.apply(x)


@dataclass
class _Stage:
    """One learnable stage of the latent stack."""

    kind: str  # "conv" | "fc" | "pool"
    weight: torch.nn.Parameter | None = None
    bn: torch.nn.Module | None = None
    first: bool = False
    output: bool = False
    in_ch: int = 0
    out_ch: int = 0


class LatentModel:
    """Latent (shadow) weights plus batch-norm state mirroring an arch."""

    def __init__(self, arch: str, input_shape: tuple, z_max: int = 255, seed: int = 0):
        torch.set_num_threads(int(os.environ.get("BITTOL_THREADS", "0")) or torch.get_num_threads())
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.z_max = int(z_max)
        self.seed = seed
        tokens = parse_arch(arch)
        rng = fault.derive_stream(seed, fault.STREAM_INIT)
        self.stages: list = []
        shape = self.input_shape
        spatial = True
        first = True
        def glorot(shape_, fan_in, fan_out):
            # small latent magnitudes let early updates actually flip signs
            limit = min(1.0, math.sqrt(6.0 / (fan_in + fan_out)))
            return torch.nn.Parameter(
                torch.from_numpy(rng.uniform(-limit, limit, shape_).astype(np.float32))
            )

        for kind, width in tokens:
            if kind == "C":
                if not spatial:
                    raise ArchError("convolution after flattening is unsupported")
                c = shape[0]
                w = glorot((width, c, 3, 3), c * 9, width * 9)
                self.stages.append(
                    _Stage("conv", w, torch.nn.BatchNorm2d(width), first, False, c, width)
                )
                shape = (width, shape[1], shape[2])
                first = False
            elif kind == "MP2":
                self.stages.append(_Stage("pool"))
                shape = (shape[0], shape[1] // 2, shape[2] // 2)
            else:  # FC or OUT
                in_dim = int(np.prod(shape)) if spatial else shape[0]
                spatial = False
                w = glorot((width, in_dim), in_dim, width)
                is_out = kind == "OUT"
                bn = None if is_out else torch.nn.BatchNorm1d(width)
                self.stages.append(_Stage("fc", w, bn, first, is_out, in_dim, width))
                shape = (width,)
                first = False
        self.n_classes = tokens[-1][1]
        self.output_fan_in = self.stages[-1].in_ch

    def parameters(self):
        for st in self.stages:
            if st.weight is not None:
                yield st.weight
            if st.bn is not None:
                yield from st.bn.parameters()

    def train_mode(self, flag: bool = True):
        for st in self.stages:
            if st.bn is not None:
                st.bn.train(flag)

    def clip_weights(self):
        with torch.no_grad():
            for st in self.stages:
                if st.weight is not None:
                    st.weight.clamp_(-1.0, 1.0)

    def weight_stages(self) -> list:
        return [st for st in self.stages if st.weight is not None]


def _flip_signs(stage: _Stage, cfg: TrainConfig, epoch: int, step: int, layer_idx: int):
    """±1 flip multipliers for one layer's binarized weights, one mask per batch.

    Each forward pass reads the weights through a single fresh mask, so
    every step trains against one concrete corrupted network and batch
    norm normalizes that realization; sharing the mask across the batch
    is what lets narrow layers adapt instead of drowning in mask noise.
    """
    rows = stage.weight.shape[0]
    cols = int(np.prod(stage.weight.shape[1:]))
    rng = fault.derive_stream(cfg.seed, fault.STREAM_TRAIN, epoch, step, layer_idx)
    mask = fault.sample_flip_mask(rows, cols, cfg.ber_train, rng)
    flips = mask.to_bits().astype(np.float32).reshape(stage.weight.shape)
    return torch.from_numpy(1.0 - 2.0 * flips)


def binarize_forward(
    latent: LatentModel,
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    epoch: int = 1,
    step: int = 0,
) -> tuple:
    """One forward pass with binarized weights/activations; returns (loss, logits).

    Class scores are divided by the output fan-in before the cross-entropy
    so a random initialization sits at ~ln(n_classes) loss regardless of
    layer width; the argmax prediction is unaffected.
    """
    value = images
    layer_idx = 0
    for stage in latent.stages:
        if stage.kind == "pool":
            value = F.max_pool2d(value, 2)
            continue
        wb = sign_ste(stage.weight)
        if cfg.ber_train > 0:
            wb = wb * _flip_signs(stage, cfg, epoch, step, layer_idx)
        layer_idx += 1
        if stage.kind == "conv":
            pad_value = 0.0 if stage.first else -1.0
            padded = F.pad(value, (1, 1, 1, 1), value=pad_value)
            value = F.conv2d(padded, wb)
        else:
            value = value.flatten(1) @ wb.t()
        if stage.output:
            break
        value = act_ste(stage.bn(value))
    logits = value / latent.output_fan_in
    loss = F.cross_entropy(logits, labels)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss at epoch {epoch} step {step}")
    return loss, logits


def backward_ste(loss: torch.Tensor, latent: LatentModel) -> dict:
    """Backpropagate; returns the shadow-weight gradients by stage index."""
    loss.backward()
    return {
        i: st.weight.grad.detach().clone()
        for i, st in enumerate(latent.stages)
        if st.weight is not None and st.weight.grad is not None
    }


def predict_eval(latent: LatentModel, images: torch.Tensor) -> torch.Tensor:
    """Eval-mode class scores (running batch-norm statistics, no flips)."""
    latent.train_mode(False)
    with torch.no_grad():
        value = images
        for stage in latent.stages:
            if stage.kind == "pool":
                value = F.max_pool2d(value, 2)
                continue
            wb = torch.where(stage.weight >= 0, 1.0, -1.0)
            if stage.kind == "conv":
                padded = F.pad(value, (1, 1, 1, 1), value=0.0 if stage.first else -1.0)
                value = F.conv2d(padded, wb)
            else:
                value = value.flatten(1) @ wb.t()
            if stage.output:
                return value
            value = torch.where(stage.bn(value) > 0, 1.0, -1.0)
    raise ArchError("stack has no output layer")


def recalibrate_bn(latent: LatentModel, images: np.ndarray, chunk: int = 8192) -> None:
    """Replace batch-norm running statistics with exact full-dataset moments.

    The running statistics collected during training are a momentum
    average dominated by the last few batches; under flip injection they
    are additionally conditioned on the last few masks drawn.  Deployment
    thresholds should reflect the clean forward pass over all the
    training data, so each normalization layer gets the exact mean and
    population variance of its pre-activations, computed layer by layer
    with the earlier layers already recalibrated.
    """
    with torch.no_grad():
        acts = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        for stage in latent.stages:
            if stage.kind == "pool":
                acts = F.max_pool2d(acts, 2)
                continue
            wb = torch.where(stage.weight >= 0, 1.0, -1.0)

            def pre_of(part, stage=stage, wb=wb):
                if stage.kind == "conv":
                    padded = F.pad(part, (1, 1, 1, 1), value=0.0 if stage.first else -1.0)
                    return F.conv2d(padded, wb)
                return part.flatten(1) @ wb.t()

            if stage.output:
                return
            count = 0
            total = torch.zeros(stage.out_ch, dtype=torch.float64)
            total_sq = torch.zeros(stage.out_ch, dtype=torch.float64)
            for i in range(0, len(acts), chunk):
                pre = pre_of(acts[i : i + chunk]).double()
                dims = (0,) if pre.dim() == 2 else (0, 2, 3)
                count += pre.numel() // pre.shape[1]
                total += pre.sum(dim=dims)
                total_sq += (pre * pre).sum(dim=dims)
            mean = total / count
            var = total_sq / count - mean * mean
            stage.bn.running_mean.copy_(mean.to(stage.bn.running_mean.dtype))
            stage.bn.running_var.copy_(var.clamp_(min=0.0).to(stage.bn.running_var.dtype))
            was_training = stage.bn.training
            stage.bn.eval()
            pieces = [
                torch.where(stage.bn(pre_of(acts[i : i + chunk])) > 0, 1.0, -1.0)
                for i in range(0, len(acts), chunk)
            ]
            stage.bn.train(was_training)
            acts = torch.cat(pieces)


def export_model(latent: LatentModel) -> BnnModel:
    """Snapshot the latent state as a packed integer-threshold model."""
    layers = []
    for stage in latent.stages:
        if stage.kind == "pool":
            layers.append(MaxPoolLayer())
            continue
        w = stage.weight.detach().numpy()
        rows = w.shape[0]
        bits = (w.reshape(rows, -1) >= 0).astype(np.uint8)
        weights = BitMatrix.from_bits(bits)
        if stage.kind == "conv":
            layers.append(ConvLayer(weights, stage.in_ch, stage.out_ch, first=stage.first))
        else:
            layers.append(
                FcLayer(weights, stage.in_ch, stage.out_ch, first=stage.first,
                        output=stage.output)
            )
        if stage.output:
            continue
        bn = stage.bn
        params = BatchNormParams(
            gamma=bn.weight.detach().numpy().astype(np.float64),
            beta=bn.bias.detach().numpy().astype(np.float64),
            mean=bn.running_mean.numpy().astype(np.float64),
            var=bn.running_var.numpy().astype(np.float64),
            eps=bn.eps,
        )
        folded = fold_batchnorm(params)
        folded.first_layer = stage.first
        layers.append(folded)
    return BnnModel(layers, latent.input_shape, latent.z_max, latent.n_classes, latent.arch)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    test_acc: float = float("nan")

    def row(self) -> list:
        return [self.epoch, self.lr, f"{self.train_loss:.6f}",
                f"{self.train_acc:.4f}", f"{self.test_acc:.4f}"]


def train(
    latent: LatentModel,
    data: Dataset,
    cfg: TrainConfig,
    test_data: Dataset | None = None,
    log_every: int = 10,
) -> tuple:
    """Full training loop; returns (exported BnnModel, list of EpochLog).

    Before export the batch-norm running statistics are recalibrated to
    the exact clean-forward moments over the training set, so the folded
    integer thresholds do not depend on which batches (or flip masks)
    happened to come last.
    """
    if data.input_shape != latent.input_shape:
        raise ArchError(f"dataset shape {data.input_shape} vs model {latent.input_shape}")
    images = torch.from_numpy(np.ascontiguousarray(data.images, dtype=np.float32))
    labels = torch.from_numpy(np.ascontiguousarray(data.labels, dtype=np.int64))
    test_tensors = None
    if test_data is not None:
        test_tensors = (
            torch.from_numpy(np.ascontiguousarray(test_data.images, dtype=np.float32)),
            torch.from_numpy(np.ascontiguousarray(test_data.labels, dtype=np.int64)),
        )
    opt = torch.optim.Adam(latent.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    n = len(data)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = fault.derive_stream(cfg.seed, fault.STREAM_SHUFFLE, epoch).permutation(n)
        latent.train_mode(True)
        total_loss = 0.0
        total_correct = 0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            if len(idx) < 2 and n > 1:
                continue  # batch-norm needs at least two samples per batch
            xb, yb = images[idx], labels[idx]
            opt.zero_grad(set_to_none=True)
            loss, logits = binarize_forward(latent, xb, yb, cfg, epoch, step)
            loss.backward()
            opt.step()
            latent.clip_weights()
            total_loss += float(loss.detach()) * len(idx)
            total_correct += int((logits.argmax(dim=1) == yb).sum())
        test_acc = float("nan")
        if test_tensors is not None:
            with torch.no_grad():
                scores = _eval_scores(latent, test_tensors[0])
                test_acc = float((scores.argmax(dim=1) == test_tensors[1]).float().mean())
        entry = EpochLog(epoch, lr, total_loss / n, total_correct / n, test_acc)
        history.append(entry)
        if log_every and (epoch % log_every == 0 or epoch == 1 or epoch == cfg.epochs):
            log.info(
                "epoch %d/%d lr %.2e loss %.4f acc %.4f test %.4f",
                epoch, cfg.epochs, lr, entry.train_loss, entry.train_acc, test_acc,
            )
    recalibrate_bn(latent, data.images)
    return export_model(latent), history


def _eval_scores(latent: LatentModel, images: torch.Tensor, batch: int = 1024) -> torch.Tensor:
    chunks = [predict_eval(latent, images[i : i + batch]) for i in range(0, len(images), batch)]
    latent.train_mode(True)
    return torch.cat(chunks)


def expected_random_loss(n_classes: int) -> float:
    """Cross-entropy of a maximally uncertain classifier."""
    return math.log(n_classes)
