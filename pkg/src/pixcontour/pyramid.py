"""Dense multiscale per-pixel features from a stitched image plane.

All scaled copies of an image are packed into one plane separated by
mean-colour gutters, the network runs once over the plane, and each
selected convolution layer's descriptors are cut back out per scale,
resized to the scaled image size and concatenated per pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .convnet import CONV, RELU, LayerSpec, NetParams, forward, head_layer_index, layer_geometry
from .tensor import ImagePlane, bilinear_resize

# (row, col) offsets in units of k: upper-left neighbour first, then clockwise
NEIGHBOR_ORDER = ((-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1))


@dataclass(frozen=True)
class PyramidConfig:
    scales: tuple = (1.0, 2.0)
    gutter: int | None = None  # None: derived from the deepest selected layer
    selected_layers: tuple = (1, 2, 3)  # 1-based indices among the body convolutions
    neighbor_k: int = 1
    align: int = 1  # placements snap to multiples of this (deepest cumulative stride)

    def __post_init__(self):
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ValueError(f"scales must be positive, got {self.scales}")
        if self.neighbor_k not in (0, 1, 2, 3):
            raise ValueError(f"neighbor_k must be 0..3, got {self.neighbor_k}")
        if not self.selected_layers:
            raise ValueError("select at least one layer")


@dataclass(frozen=True)
class Placement:
    scale: float
    top: int
    left: int
    scaled_height: int
    scaled_width: int


@dataclass
class PixelFeatureMap:
    features: np.ndarray  # (dim, height, width)

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def height(self) -> int:
        return self.features.shape[1]

    @property
    def width(self) -> int:
        return self.features.shape[2]

    def at(self, row: int, col: int) -> np.ndarray:
        return self.features[:, row, col]


@dataclass(frozen=True)
class FeatureLayer:
    """Where a body convolution's features live in the activation list."""

    number: int  # 1-based among body convolutions
    activation: int  # index into forward()'s activation list
    channels: int
    stride: int
    radius: int


def body_conv_layers(specs: Sequence[LayerSpec]) -> list[FeatureLayer]:
    """Convolutions that feed feature extraction (the softmax head excluded).

    A convolution followed by a ReLU contributes the rectified output.
    """
    geom = layer_geometry(specs)
    head = head_layer_index(specs)
    out = []
    for i, s in enumerate(specs):
        if s.kind != CONV or i == head:
            continue
        act = i + 2 if i + 1 < len(specs) and specs[i + 1].kind == RELU else i + 1
        out.append(FeatureLayer(len(out) + 1, act, s.channels_out, geom[i].stride, geom[i].radius))
    return out


def _selected(specs, config: PyramidConfig) -> list[FeatureLayer]:
    layers = body_conv_layers(specs)
    picked = []
    for n in sorted(set(config.selected_layers)):
        if not 1 <= n <= len(layers):
            raise ValueError(f"layer {n} requested but the network has {len(layers)} body convolutions")
        picked.append(layers[n - 1])
    return picked


def resolve_config(config: PyramidConfig, specs: Sequence[LayerSpec]) -> PyramidConfig:
    """Fill in the stride alignment and, if unset, the gutter width."""
    layers = _selected(specs, config)
    align = max(l.stride for l in layers)
    radius = max(l.radius for l in layers)
    gutter = config.gutter
    if gutter is None:
        gutter = align * math.ceil(radius / align)
    elif gutter < radius:
        raise ValueError(f"gutter {gutter} is narrower than the receptive-field radius {radius}")
    return replace(config, gutter=gutter, align=align)


def feature_dim(specs: Sequence[LayerSpec], config: PyramidConfig) -> int:
    base = sum(l.channels for l in _selected(specs, config))
    return base * (9 if config.neighbor_k > 0 else 1)


def _snap(v: int, align: int) -> int:
    return align * math.ceil(v / align)


def stitch(image: ImagePlane, config: PyramidConfig):
    """Lay every scaled copy of ``image`` side by side on one mean-coloured plane.

    Returns ``(plane, placements)``.  Tiles are top-aligned at the gutter,
    at least two gutters apart, with top-left corners on the alignment grid.
    """
    g = config.gutter if config.gutter is not None else 0
    a = config.align
    copies = [image if s == 1.0 else image.scaled(s) for s in config.scales]
    top = _snap(g, a)
    placements = []
    left = _snap(g, a)
    for s, c in zip(config.scales, copies):
        placements.append(Placement(s, top, left, c.height, c.width))
        left = _snap(left + c.width + 2 * g, a)
    last = placements[-1]
    height = top + max(p.scaled_height for p in placements) + g
    width = last.left + last.scaled_width + g
    plane = np.empty((3, height, width))
    plane[:] = image.mean_color()[:, None, None]
    for p, c in zip(placements, copies):
        plane[:, p.top:p.top + p.scaled_height, p.left:p.left + p.scaled_width] = c.rgb
    return ImagePlane(plane), placements


def _unit_range(start_px: int, length: int, stride: int, offset: int, available: int):
    first = math.floor((start_px - offset) / stride)
    last = math.floor((start_px + length - 1 - offset) / stride + 0.5)
    first = min(max(first, 0), available - 1)
    last = min(max(last, first), available - 1)
    return first, last + 1


def unstitch(plane_activations, placements: Sequence[Placement], layer_stride: int, offset: int = 0):
    """Cut each tile's descriptors out of a layer computed on the whole plane.

    Unit ``u`` of the layer is taken to sit at plane pixel ``u * layer_stride
    + offset`` (``offset`` is the receptive-field radius for an unpadded
    chain).  Each tile gets the units from the last one at or before its first
    pixel to the one nearest its last pixel.
    """
    act = np.asarray(plane_activations)
    _, h, w = act.shape
    out = []
    for p in placements:
        r0, r1 = _unit_range(p.top, p.scaled_height, layer_stride, offset, h)
        c0, c1 = _unit_range(p.left, p.scaled_width, layer_stride, offset, w)
        out.append(act[:, r0:r1, c0:c1])
    return out


def stack_neighbors(fmap: PixelFeatureMap, k: int) -> PixelFeatureMap:
    """Append the 8 neighbours at distance ``k`` (clockwise from upper-left), clamped at the border."""
    if k == 0:
        return fmap
    if k not in (1, 2, 3):
        raise ValueError(f"k must be 0..3, got {k}")
    f = fmap.features
    _, h, w = f.shape
    rows, cols = np.arange(h), np.arange(w)
    blocks = [f]
    for dr, dc in NEIGHBOR_ORDER:
        r = np.clip(rows + dr * k, 0, h - 1)
        c = np.clip(cols + dc * k, 0, w - 1)
        blocks.append(f[:, r[:, None], c[None, :]])
    return PixelFeatureMap(np.concatenate(blocks, axis=0))


def plane_forward(specs, params: NetParams, plane: ImagePlane, config: PyramidConfig):
    """Run the chain over the plane only as deep as the deepest selected layer."""
    layers = _selected(specs, config)
    depth = max(l.activation for l in layers)
    convs = sum(1 for s in specs[:depth] if s.kind == CONV)
    acts, _ = forward(list(specs[:depth]), params[:convs], plane.rgb)
    return acts, layers


def extract_pyramid(image: ImagePlane, specs, params: NetParams, config: PyramidConfig) -> dict:
    """Per-pixel features at every configured scale from a single network pass."""
    cfg = resolve_config(config, specs)
    plane, placements = stitch(image, cfg)
    acts, layers = plane_forward(specs, params, plane, cfg)
    per_scale: dict = {p.scale: [] for p in placements}
    for layer in layers:
        tiles = unstitch(acts[layer.activation], placements, layer.stride, layer.radius)
        for p, t in zip(placements, tiles):
            per_scale[p.scale].append(bilinear_resize(t, p.scaled_height, p.scaled_width))
    return {
        s: stack_neighbors(PixelFeatureMap(np.concatenate(blocks, axis=0)), cfg.neighbor_k)
        for s, blocks in per_scale.items()
    }


def extract_pixel_features(image: ImagePlane, specs, params: NetParams, config: PyramidConfig,
                           scale: float = 1.0) -> PixelFeatureMap:
    """Features for one scale; the plane still carries every configured scale."""
    if scale not in config.scales:
        config = replace(config, scales=tuple(config.scales) + (scale,))
    return extract_pyramid(image, specs, params, config)[scale]
