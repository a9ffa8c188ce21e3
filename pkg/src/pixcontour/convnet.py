"""A small padding-aware convolutional network in numpy.

Layers are described by a list of :class:`LayerSpec`; parameters live in a
separate list of :class:`ConvParams`, one entry per convolution layer in
chain order.  Activations are batched ``(N, C, H, W)`` float64 arrays; the
public ``forward``/``backward`` also accept single ``(C, H, W)`` tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

CONV, RELU, MAXPOOL, SOFTMAX2 = "conv", "relu", "maxpool", "softmax2"
PROB_FLOOR = 1e-12


class GeometryError(ValueError):
    """An input is too small for the layer chain, or a patch has the wrong size."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    channels_out: int = 0

    def __post_init__(self):
        if self.kind not in (CONV, RELU, MAXPOOL, SOFTMAX2):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ValueError(f"bad geometry in {self}")
        if self.kind == CONV and self.channels_out < 1:
            raise ValueError("a convolution needs channels_out >= 1")

    @property
    def spatial(self) -> bool:
        return self.kind in (CONV, MAXPOOL)

    def describe(self) -> str:
        if self.kind == CONV:
            return f"conv k={self.kernel} s={self.stride} p={self.pad} -> {self.channels_out}"
        if self.kind == MAXPOOL:
            return f"maxpool k={self.kernel} s={self.stride} p={self.pad}"
        return self.kind


def conv(kernel: int, channels_out: int, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec(CONV, kernel, stride, pad, channels_out)


def relu() -> LayerSpec:
    return LayerSpec(RELU)


def maxpool(kernel: int, stride: int, pad: int = 0) -> LayerSpec:
    return LayerSpec(MAXPOOL, kernel, stride, pad)


def softmax2() -> LayerSpec:
    return LayerSpec(SOFTMAX2)


def alexnet_specs(padded: bool = False, head: bool = True) -> list[LayerSpec]:
    """The five AlexNet convolution layers, with or without their standard padding."""
    p = (lambda n: n) if padded else (lambda n: 0)
    specs = [
        conv(11, 96, stride=4), relu(), maxpool(3, 2),
        conv(5, 256, pad=p(2)), relu(), maxpool(3, 2),
        conv(3, 384, pad=p(1)), relu(),
        conv(3, 384, pad=p(1)), relu(),
        conv(3, 256, pad=p(1)), relu(),
    ]
    if head:
        specs += [conv(1, 2), softmax2()]
    return specs


def toy_specs(c1: int = 16, c2: int = 32, c3: int = 32) -> list[LayerSpec]:
    """Three 3x3 convolutions with overlapping pools; minimum patch size 21."""
    return [
        conv(3, c1), relu(), maxpool(3, 2),
        conv(3, c2), relu(), maxpool(3, 2),
        conv(3, c3), relu(),
        conv(1, 2), softmax2(),
    ]


_SPEC_CODES = {"r": relu, "s": softmax2}


def parse_specs(text: str) -> list[LayerSpec]:
    """Parse a compact chain such as ``c3:16,r,p3s2,c1:2,s``.

    ``cK:C`` is a KxK convolution to C channels (optional ``sN``/``pN``
    suffixes for stride and padding, e.g. ``c11:96s4``), ``pKsN`` a max pool,
    ``r`` a ReLU and ``s`` the two-way softmax.
    """
    import re

    specs = []
    for token in (t.strip() for t in text.split(",")):
        if token in _SPEC_CODES:
            specs.append(_SPEC_CODES[token]())
            continue
        m = re.fullmatch(r"c(\d+):(\d+)(?:s(\d+))?(?:p(\d+))?", token)
        if m:
            k, c, s, pad = m.groups()
            specs.append(conv(int(k), int(c), int(s or 1), int(pad or 0)))
            continue
        m = re.fullmatch(r"p(\d+)s(\d+)", token)
        if m:
            specs.append(maxpool(int(m.group(1)), int(m.group(2))))
            continue
        raise ValueError(f"cannot parse layer token {token!r}")
    return specs


def format_specs(specs: Sequence[LayerSpec]) -> str:
    out = []
    for s in specs:
        if s.kind == CONV:
            tok = f"c{s.kernel}:{s.channels_out}"
            tok += f"s{s.stride}" if s.stride != 1 else ""
            tok += f"p{s.pad}" if s.pad else ""
        elif s.kind == MAXPOOL:
            tok = f"p{s.kernel}s{s.stride}"
        else:
            tok = "r" if s.kind == RELU else "s"
        out.append(tok)
    return ",".join(out)


@dataclass
class ConvParams:
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)

    def copy(self) -> "ConvParams":
        return ConvParams(self.weight.copy(), self.bias.copy())


NetParams = list  # list[ConvParams], one per convolution layer in chain order


@dataclass
class TrainHyper:
    base_lr: float = 0.001
    softmax_lr_multiplier: float = 10.0
    momentum: float = 0.9
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")


def conv_layer_indices(specs: Sequence[LayerSpec]) -> list[int]:
    return [i for i, s in enumerate(specs) if s.kind == CONV]


def head_layer_index(specs: Sequence[LayerSpec]) -> int | None:
    """Chain index of the convolution feeding the softmax, if there is one."""
    for i, s in enumerate(specs):
        if s.kind == SOFTMAX2:
            convs = [j for j in conv_layer_indices(specs) if j < i]
            return convs[-1] if convs else None
    return None


def init_params(specs: Sequence[LayerSpec], in_channels: int = 3, seed: int = 0) -> NetParams:
    """Gaussian weights with std sqrt(2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    c = in_channels
    for s in specs:
        if s.kind != CONV:
            continue
        fan_in = c * s.kernel * s.kernel
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(s.channels_out, c, s.kernel, s.kernel))
        params.append(ConvParams(w, np.zeros(s.channels_out)))
        c = s.channels_out
    return params


def check_params(specs: Sequence[LayerSpec], params: NetParams, in_channels: int = 3) -> None:
    convs = [s for s in specs if s.kind == CONV]
    if len(convs) != len(params):
        raise ValueError(f"{len(convs)} convolution layers but {len(params)} parameter blocks")
    c = in_channels
    for i, (s, p) in enumerate(zip(convs, params)):
        want = (s.channels_out, c, s.kernel, s.kernel)
        if p.weight.shape != want or p.bias.shape != (s.channels_out,):
            raise ValueError(f"conv {i + 1}: weight {p.weight.shape} / bias {p.bias.shape}, expected {want}")
        if not (np.all(np.isfinite(p.weight)) and np.all(np.isfinite(p.bias))):
            raise ValueError(f"conv {i + 1}: non-finite parameters")
        c = s.channels_out


# -- geometry -----------------------------------------------------------------


def output_size(specs: Sequence[LayerSpec], in_height: int, in_width: int) -> list[tuple[int, int]]:
    """Spatial size after every layer, floor((n - k + 2p) / s) + 1 for spatial layers."""
    h, w = in_height, in_width
    sizes = []
    for i, s in enumerate(specs):
        if s.spatial:
            h = (h - s.kernel + 2 * s.pad) // s.stride + 1
            w = (w - s.kernel + 2 * s.pad) // s.stride + 1
            if h < 1 or w < 1:
                raise GeometryError(
                    f"layer {i} ({s.describe()}) has no output for a {in_height}x{in_width} input"
                )
        sizes.append((h, w))
    return sizes


def min_patch_size(specs: Sequence[LayerSpec]) -> int:
    """Smallest square input for which the last convolution produces a 1x1 map."""
    size = 1
    for s in reversed(specs):
        if s.spatial:
            if s.pad:
                raise GeometryError("min_patch_size needs an unpadded (per-pixel) chain")
            size = (size - 1) * s.stride + s.kernel
    return size


@dataclass(frozen=True)
class LayerGeometry:
    stride: int  # cumulative stride of the layer output w.r.t. the input
    field: int  # receptive-field extent in input pixels

    @property
    def radius(self) -> int:
        return (self.field - 1) // 2


def layer_geometry(specs: Sequence[LayerSpec]) -> list[LayerGeometry]:
    """Cumulative stride and receptive field of every layer's output."""
    stride, rf = 1, 1
    out = []
    for s in specs:
        if s.spatial:
            rf += (s.kernel - 1) * stride
            stride *= s.stride
        out.append(LayerGeometry(stride, rf))
    return out


# -- layer kernels ------------------------------------------------------------


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, Ho, Wo, k, k) strided view."""
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _conv_forward(x, p: ConvParams, s: LayerSpec):
    if s.pad:
        x = np.pad(x, ((0, 0), (0, 0), (s.pad, s.pad), (s.pad, s.pad)))
    win = _windows(x, s.kernel, s.stride)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    out = cols @ p.weight.reshape(p.weight.shape[0], -1).T + p.bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2))


def _conv_backward(x, p: ConvParams, s: LayerSpec, dout, need_dx: bool):
    if s.pad:
        x = np.pad(x, ((0, 0), (0, 0), (s.pad, s.pad), (s.pad, s.pad)))
    k, st = s.kernel, s.stride
    win = _windows(x, k, st)
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
    dflat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
    wflat = p.weight.reshape(p.weight.shape[0], -1)
    grad = ConvParams((dflat.T @ cols).reshape(p.weight.shape), dflat.sum(axis=0))
    if not need_dx:
        return grad, None
    dcols = (dflat @ wflat).reshape(n, ho, wo, c, k, k)
    dx = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + st * (ho - 1) + 1:st, j:j + st * (wo - 1) + 1:st] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if s.pad:
        dx = dx[:, :, s.pad:-s.pad, s.pad:-s.pad]
    return grad, dx


def _pool_input(x, s: LayerSpec):
    if s.pad:
        return np.pad(x, ((0, 0), (0, 0), (s.pad, s.pad), (s.pad, s.pad)), constant_values=-np.inf)
    return x


def _pool_forward(x, s: LayerSpec):
    win = _windows(_pool_input(x, s), s.kernel, s.stride)
    return win.max(axis=(4, 5))


def _pool_backward(x, s: LayerSpec, dout):
    xp = _pool_input(x, s)
    k, st = s.kernel, s.stride
    win = _windows(xp, k, st)
    n, c, ho, wo = win.shape[:4]
    # argmax returns the first maximum in row-major window order
    arg = win.reshape(n, c, ho, wo, k * k).argmax(axis=-1)
    dx = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            if hit.any():
                dx[:, :, i:i + st * (ho - 1) + 1:st, j:j + st * (wo - 1) + 1:st] += dout * hit
    if s.pad:
        dx = dx[:, :, s.pad:-s.pad, s.pad:-s.pad]
    return dx


def _softmax2(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# -- forward / backward -------------------------------------------------------


def forward(specs: Sequence[LayerSpec], params: NetParams, x):
    """Run the chain.

    Returns ``(activations, probs)`` where ``activations[0]`` is the input and
    ``activations[i + 1]`` the output of layer ``i``; ``probs`` is the last
    activation.  A rank-3 input yields rank-3 activations.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")
    output_size(specs, x.shape[2], x.shape[3])

    acts = [x]
    pi = 0
    for s in specs:
        if s.kind == CONV:
            x = _conv_forward(x, params[pi], s)
            pi += 1
        elif s.kind == RELU:
            x = np.maximum(x, 0.0)
        elif s.kind == MAXPOOL:
            x = _pool_forward(x, s)
        else:
            if x.shape[1] != 2:
                raise ValueError("the two-way softmax needs exactly 2 input channels")
            x = _softmax2(x)
        acts.append(x)
    if single:
        acts = [a[0] for a in acts]
    return acts, acts[-1]


def _probs_labels(probs, label):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 3:
        probs = probs[None]
    label = np.broadcast_to(np.asarray(label), (probs.shape[0],))
    if not np.all((label == 0) | (label == 1)):
        raise ValueError("labels must be 0 or 1")
    return probs, label.astype(np.intp)


def nll_loss(probs, label) -> float:
    """Summed negative log-likelihood of the true labels (over batch and positions)."""
    probs, label = _probs_labels(probs, label)
    p_true = np.where(label[:, None, None] == 1, probs[:, 1], probs[:, 0])
    return float(np.sum(-np.log(np.maximum(p_true, PROB_FLOOR))))


def biased_nll_loss(probs, label, alpha: float, beta: float) -> float:
    """Class-weighted log-likelihood: alpha scales edge terms, beta non-edge terms."""
    if alpha <= 0 or beta <= 0:
        raise ValueError(f"alpha and beta must be positive, got {alpha}, {beta}")
    probs, label = _probs_labels(probs, label)
    pos = -np.log(np.maximum(probs[:, 1], PROB_FLOOR))
    neg = -np.log(np.maximum(probs[:, 0], PROB_FLOOR))
    y = label[:, None, None]
    return float(np.sum(np.where(y == 1, alpha * pos, beta * neg)))


def backward(specs, params, activations, label, alpha: float = 1.0, beta: float = 1.0) -> NetParams:
    """Gradient of ``biased_nll_loss`` with respect to every convolution's parameters."""
    acts = [np.asarray(a) for a in activations]
    if acts[0].ndim == 3:
        acts = [a[None] for a in acts]
    if len(acts) != len(specs) + 1:
        raise ValueError(f"{len(acts)} activations for {len(specs)} layers")
    if specs[-1].kind != SOFTMAX2:
        raise ValueError("backward needs a chain ending in the two-way softmax")
    sizes = output_size(specs, acts[0].shape[2], acts[0].shape[3])
    for i, (hw, a) in enumerate(zip(sizes, acts[1:])):
        if a.shape[2:] != hw or a.shape[0] != acts[0].shape[0]:
            raise ValueError(f"activation {i + 1} has shape {a.shape}, inconsistent with the chain")

    probs = acts[-1]
    _, label = _probs_labels(probs, label)
    y = label[:, None, None]
    onehot = np.stack([y == 0, y == 1], axis=1).astype(np.float64)
    onehot = np.broadcast_to(onehot, probs.shape)
    weight = np.where(y == 1, alpha, beta)[:, None]
    p_true = np.where(y == 1, probs[:, 1], probs[:, 0])[:, None]
    # the probability floor is a constant, so clamped samples carry no gradient
    live = p_true >= PROB_FLOOR
    dx = weight * (probs - onehot) * live  # gradient w.r.t. the softmax logits

    conv_idx = conv_layer_indices(specs)
    grads: list = [None] * len(conv_idx)
    pi = len(conv_idx) - 1
    for li in range(len(specs) - 2, -1, -1):
        s, x_in = specs[li], acts[li]
        if s.kind == CONV:
            g, dx = _conv_backward(x_in, params[pi], s, dx, need_dx=li > 0)
            grads[pi] = g
            pi -= 1
        elif s.kind == RELU:
            dx = dx * (x_in > 0)
        elif s.kind == MAXPOOL:
            dx = _pool_backward(x_in, s, dx)
        else:
            raise ValueError("softmax may only appear as the last layer")
        if dx is None:
            break
    return grads


# -- optimisation -------------------------------------------------------------


def layer_lr(specs: Sequence[LayerSpec], hyper: TrainHyper, conv_number: int) -> float:
    """Learning rate of the ``conv_number``-th convolution (0-based)."""
    head = head_layer_index(specs)
    is_head = head is not None and conv_layer_indices(specs)[conv_number] == head
    return hyper.base_lr * (hyper.softmax_lr_multiplier if is_head else 1.0)


def sgd_step(specs, params: NetParams, grads: NetParams, hyper: TrainHyper, velocity=None):
    """One momentum SGD update; returns ``(new_params, new_velocity)``.

    ``v <- momentum * v + lr_layer * g``; ``w <- w - v``.
    """
    if velocity is None:
        velocity = [ConvParams(np.zeros_like(p.weight), np.zeros_like(p.bias)) for p in params]
    new_params, new_vel = [], []
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if g.weight.shape != p.weight.shape or g.bias.shape != p.bias.shape:
            raise ValueError(f"gradient shape mismatch in conv {i + 1}")
        lr = layer_lr(specs, hyper, i)
        vw = hyper.momentum * v.weight + lr * g.weight
        vb = hyper.momentum * v.bias + lr * g.bias
        new_vel.append(ConvParams(vw, vb))
        new_params.append(ConvParams(p.weight - vw, p.bias - vb))
    return new_params, new_vel


@dataclass
class TrainLog:
    epoch_losses: list = field(default_factory=list)


def train(specs, params: NetParams, batches, hyper: TrainHyper, alpha=None, beta=None,
          train_log: TrainLog | None = None) -> NetParams:
    """Minibatch SGD over ``hyper.epochs`` epochs.

    ``batches(epoch)`` yields ``(inputs, labels)`` minibatches; the update
    uses the batch-mean gradient of the (optionally biased) loss.  The mean
    per-sample loss of every epoch is appended to ``train_log``.
    """
    alpha = hyper.alpha if alpha is None else alpha
    beta = hyper.beta if beta is None else beta
    params = [p.copy() for p in params]
    velocity = None
    train_log = train_log if train_log is not None else TrainLog()
    for epoch in range(hyper.epochs):
        total, count = 0.0, 0
        for x, y in batches(epoch):
            acts, probs = forward(specs, params, x)
            total += biased_nll_loss(probs, y, alpha, beta)
            count += len(y)
            grads = backward(specs, params, acts, y, alpha, beta)
            scale = 1.0 / len(y)
            grads = [ConvParams(g.weight * scale, g.bias * scale) for g in grads]
            params, velocity = sgd_step(specs, params, grads, hyper, velocity)
        mean = total / max(count, 1)
        train_log.epoch_losses.append(mean)
        log.info("epoch %d: mean loss %.6f over %d samples", epoch + 1, mean, count)
    return params

