"""Synthetic contour dataset: anti-aliased polygons and ellipses with jittered annotators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.path import Path as MplPath
from scipy import ndimage

from .finetune import Record
from .formats import ensure_dir, read_boundary, read_ppm, write_boundary, write_ppm
from .tensor import ImagePlane

SUBSAMPLES = 4
MARGIN = 3
GAP = 4
NOISE = 0.02
JITTER = 0.3
MAX_JITTER = 0.6


@dataclass
class Shape:
    """A closed shape in pixel coordinates (pixel (r, c) is centred at y=r, x=c)."""

    kind: str  # "polygon" or "ellipse"
    params: list  # polygon: [[y, x], ...]; ellipse: [cy, cx, ry, rx, angle]
    color: list

    def outline(self, spacing: float = 0.1) -> np.ndarray:
        """Densely sampled closed curve as (M, 2) (y, x) points."""
        if self.kind == "polygon":
            v = np.asarray(self.params, dtype=np.float64)
            pts = []
            for a, b in zip(v, np.roll(v, -1, axis=0)):
                n = max(2, int(math.ceil(np.hypot(*(b - a)) / spacing)))
                t = np.arange(n)[:, None] / n
                pts.append(a + t * (b - a))
            return np.concatenate(pts)
        cy, cx, ry, rx, ang = self.params
        n = max(16, int(math.ceil(2 * math.pi * max(ry, rx) / spacing)))
        t = np.arange(n) * 2 * math.pi / n
        y, x = ry * np.sin(t), rx * np.cos(t)
        ca, sa = math.cos(ang), math.sin(ang)
        return np.stack([cy + ca * y + sa * x, cx - sa * y + ca * x], axis=1)

    def contains(self, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
        if self.kind == "polygon":
            path = MplPath(np.asarray(self.params)[:, ::-1])
            pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
            return path.contains_points(pts).reshape(ys.shape)
        cy, cx, ry, rx, ang = self.params
        dy, dx = ys - cy, xs - cx
        ca, sa = math.cos(ang), math.sin(ang)
        u = ca * dy - sa * dx
        w = sa * dy + ca * dx
        return (u / ry) ** 2 + (w / rx) ** 2 <= 1.0

    def jittered(self, rng) -> "Shape":
        def j(size):
            return np.clip(rng.normal(0.0, JITTER, size), -MAX_JITTER, MAX_JITTER)

        if self.kind == "polygon":
            v = np.asarray(self.params) + j(np.shape(self.params))
            return Shape("polygon", v.tolist(), self.color)
        cy, cx, ry, rx, ang = self.params
        d = j(4)
        return Shape("ellipse", [cy + d[0], cx + d[1], ry + d[2], rx + d[3], ang], self.color)


def _coverage(shape: Shape, h: int, w: int) -> np.ndarray:
    off = (np.arange(SUBSAMPLES) + 0.5) / SUBSAMPLES - 0.5
    ys = (np.arange(h)[:, None] + off[None, :]).ravel()
    xs = (np.arange(w)[:, None] + off[None, :]).ravel()
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    inside = shape.contains(gy, gx).astype(np.float64)
    return inside.reshape(h, SUBSAMPLES, w, SUBSAMPLES).mean(axis=(1, 3))


def rasterize_closed(points: np.ndarray, h: int, w: int) -> np.ndarray:
    """Boundary map of a closed curve as a thin 8-connected pixel loop."""
    px = np.rint(points).astype(np.intp)
    px[:, 0] = np.clip(px[:, 0], 0, h - 1)
    px[:, 1] = np.clip(px[:, 1], 0, w - 1)
    loop = [tuple(p) for p in px]
    loop = [p for i, p in enumerate(loop) if p != loop[i - 1]]
    changed = True
    while changed and len(loop) > 4:
        changed = False
        i = 0
        while i < len(loop) and len(loop) > 4:
            prev, nxt = loop[i - 1], loop[(i + 1) % len(loop)]
            if prev == nxt:
                # spike: drop the tip and the repeated pixel
                del loop[i]
                del loop[i % len(loop)]
                changed = True
                continue
            if max(abs(prev[0] - nxt[0]), abs(prev[1] - nxt[1])) <= 1:
                del loop[i]
                changed = True
                continue
            i += 1
    mask = np.zeros((h, w), dtype=bool)
    for r, c in loop:
        mask[r, c] = True
    return mask


def _random_shape(rng, size: int) -> Shape:
    r = rng.uniform(7.0, 13.0) * min(1.0, size / 64)
    cy = rng.uniform(MARGIN + r, size - 1 - MARGIN - r)
    cx = rng.uniform(MARGIN + r, size - 1 - MARGIN - r)
    if rng.random() < 0.5:
        ry, rx = r, r * rng.uniform(0.55, 1.0)
        return Shape("ellipse", [cy, cx, ry, rx, rng.uniform(0, math.pi)], [])
    k = int(rng.integers(3, 7))
    gaps = rng.uniform(0.6, 1.0, k)
    ang = np.cumsum(gaps / gaps.sum() * 2 * math.pi) + rng.uniform(0, 2 * math.pi)
    rad = r * rng.uniform(0.75, 1.0, k)
    v = np.stack([cy + rad * np.sin(ang), cx + rad * np.cos(ang)], axis=1)
    return Shape("polygon", v.tolist(), [])


def _contrasting_color(rng, background: np.ndarray, min_contrast: float = 0.3) -> list:
    while True:
        c = rng.uniform(0.05, 0.95, 3)
        if np.abs(c - background).max() >= min_contrast:
            return c.tolist()


def generate_image(rng, size: int = 64):
    """One image, its shapes and its annotator boundary maps."""
    bg = rng.uniform(0.15, 0.85, 3)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    tilt = rng.uniform(-0.08, 0.08, (3, 2))
    img = bg[:, None, None] + tilt[:, :1, None] * (yy - 0.5) + tilt[:, 1:, None] * (xx - 0.5)
    occupied = np.zeros((size, size), dtype=bool)
    shapes = []
    n_target = int(rng.integers(2, 4))
    for _ in range(200):
        if len(shapes) == n_target:
            break
        s = _random_shape(rng, size)
        cov = _coverage(s, size, size)
        footprint = ndimage.binary_dilation(cov > 0, iterations=GAP)
        if (footprint & occupied).any():
            continue
        s.color = _contrasting_color(rng, bg)
        img = img * (1 - cov) + np.asarray(s.color)[:, None, None] * cov
        occupied |= cov > 0
        shapes.append(s)
    img = img + rng.normal(0.0, NOISE, img.shape)
    n_ann = int(rng.integers(2, 5))
    annotations = []
    for _ in range(n_ann):
        mask = np.zeros((size, size), dtype=bool)
        for s in shapes:
            mask |= rasterize_closed(s.jittered(rng).outline(), size, size)
        annotations.append(mask)
    return np.clip(img, 0, 1), shapes, annotations


def generate_dataset(n_images: int = 30, size: int = 64, seed: int = 0):
    """List of ``(id, rgb, shapes, annotations)``, deterministic per seed."""
    rng = np.random.default_rng(seed)
    return [(f"img{i:03d}",) + generate_image(rng, size) for i in range(n_images)]


def write_dataset(root, n_images: int = 30, size: int = 64, seed: int = 0, split=(20, 5, 5)) -> Path:
    """Generate and write the dataset layout under ``root``."""
    if sum(split) != n_images:
        raise ValueError(f"split {split} does not add up to {n_images} images")
    root = ensure_dir(root)
    ensure_dir(root / "images")
    ensure_dir(root / "groundtruth")
    data = generate_dataset(n_images, size, seed)
    meta = {}
    for ident, rgb, shapes, annotations in data:
        write_ppm(root / "images" / f"{ident}.ppm", rgb)
        gt = ensure_dir(root / "groundtruth" / ident)
        for n, a in enumerate(annotations, start=1):
            write_boundary(gt / f"annotator_{n}.pgm", a)
        meta[ident] = [{"kind": s.kind, "params": s.params, "color": s.color} for s in shapes]
    ids = [d[0] for d in data]
    bounds = np.cumsum((0,) + tuple(split))
    for name, a, b in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
        (root / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids[a:b]))
    (root / "shapes.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


def read_split(root, split: str) -> list:
    path = Path(root) / f"{split}.txt"
    return [line.strip() for line in path.read_text().splitlines() if line.strip()]


def load_annotations(root, ident: str) -> list:
    gt_dir = Path(root) / "groundtruth" / ident
    files = sorted(gt_dir.glob("annotator_*.pgm"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no ground truth for image {ident} in {gt_dir}")
    return [read_boundary(f) for f in files]


def load_records(root, split: str) -> list:
    records = []
    for ident in read_split(root, split):
        rgb = read_ppm(Path(root) / "images" / f"{ident}.ppm")
        records.append(Record(ident, ImagePlane(rgb), load_annotations(root, ident)))
    return records


def load_shapes(root) -> dict:
    meta = json.loads((Path(root) / "shapes.json").read_text())
    return {k: [Shape(s["kind"], s["params"], s["color"]) for s in v] for k, v in meta.items()}
