"""Patch sampling, per-pixel and cost-sensitive fine-tuning, and model fusion."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import ndimage

from .bench import DEFAULT_THRESHOLDS, evaluate_dataset, nms_thin
from .convnet import (
    GeometryError,
    NetParams,
    TrainHyper,
    TrainLog,
    backward,
    forward,
    min_patch_size,
    train,
)
from .tensor import ImagePlane

log = logging.getLogger(__name__)

MODES = ("plain", "positive", "negative")
# (edge, non-edge) loss weights and per-image patch counts for each regime
LOSS_WEIGHTS = {"plain": (1.0, 1.0), "positive": (2.0, 1.0), "negative": (1.0, 2.0)}
PLAN_COUNTS = {"plain": (500, 500), "positive": (1000, 500), "negative": (500, 1000)}
NEGATIVE_MIN_DIST = 3.0


@dataclass
class Record:
    """One image with its annotator boundary maps."""

    id: str
    image: ImagePlane
    annotations: list  # boolean (H, W) maps, one per annotator


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


# -- labels -------------------------------------------------------------------


def consensus_map(annotations: Sequence) -> np.ndarray:
    """Pixels marked, within one pixel (3x3 window), by at least half the annotators."""
    if not len(annotations):
        raise ValueError("need at least one annotation")
    votes = np.zeros(np.shape(annotations[0]), dtype=np.intp)
    for a in annotations:
        votes += ndimage.binary_dilation(np.asarray(a, dtype=bool), structure=np.ones((3, 3), bool))
    return 2 * votes >= len(annotations)


def consensus_label(annotations: Sequence, row: int, col: int) -> int:
    if not len(annotations):
        raise ValueError("need at least one annotation")
    r0, c0 = max(row - 1, 0), max(col - 1, 0)
    votes = sum(bool(np.asarray(a)[r0:row + 2, c0:col + 2].any()) for a in annotations)
    return int(2 * votes >= len(annotations))


def negative_candidates(annotations: Sequence, min_dist: float = NEGATIVE_MIN_DIST) -> np.ndarray:
    """Pixels at least ``min_dist`` from every annotator's boundary."""
    union = np.zeros(np.shape(annotations[0]), dtype=bool)
    for a in annotations:
        union |= np.asarray(a, dtype=bool)
    if not union.any():
        return np.ones_like(union)
    return ndimage.distance_transform_edt(~union) >= min_dist


# -- sampling -----------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPlan:
    n_pos: int
    n_neg: int
    seed: int = 0

    @classmethod
    def for_mode(cls, mode: str, seed: int = 0) -> "SamplingPlan":
        _check_mode(mode)
        return cls(*PLAN_COUNTS[mode], seed=seed)


@dataclass
class PatchSample:
    patch: np.ndarray  # (3, s, s)
    label: int
    image_id: str
    center: tuple


class PatchSet(Sequence):
    """Sampled patch centres over a dataset; patches are cropped on access."""

    def __init__(self, records: Sequence[Record], image_index, rows, cols, labels, size: int):
        self.records = list(records)
        self.image_index = np.asarray(image_index, dtype=np.intp)
        self.rows = np.asarray(rows, dtype=np.intp)
        self.cols = np.asarray(cols, dtype=np.intp)
        self.labels = np.asarray(labels, dtype=np.intp)
        self.size = size
        r = size // 2
        self._padded = [np.pad(rec.image.rgb, ((0, 0), (r, r), (r, r)), mode="edge") for rec in self.records]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        k = self.image_index[i]
        return PatchSample(self.batch([i])[0][0], int(self.labels[i]), self.records[k].id,
                           (int(self.rows[i]), int(self.cols[i])))

    def batch(self, idx):
        """``(patches, labels)`` arrays for the given sample indices."""
        idx = np.asarray(idx, dtype=np.intp)
        s = self.size
        out = np.empty((len(idx), 3, s, s))
        for n, i in enumerate(idx):
            r, c = self.rows[i], self.cols[i]
            out[n] = self._padded[self.image_index[i]][:, r:r + s, c:c + s]
        return out, self.labels[idx]


def _draw(rng, candidates: np.ndarray, count: int) -> np.ndarray:
    replace = len(candidates) < count
    return rng.choice(candidates, size=count, replace=replace)


def sample_patches(dataset: Sequence[Record], plan: SamplingPlan, patch_size: int) -> PatchSet:
    """Draw ``plan.n_pos`` edge and ``plan.n_neg`` non-edge centres per image.

    Edge centres are consensus boundary pixels; non-edge centres lie at least
    3 pixels from any annotator's boundary.  Draws are without replacement
    when an image has enough candidates.  Images lacking either class are
    skipped with a warning.
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    if patch_size % 2 == 0:
        raise GeometryError(f"patch size must be odd, got {patch_size}")
    rng = np.random.default_rng(plan.seed)
    idx, rows, cols, labels = [], [], [], []
    for k, rec in enumerate(dataset):
        pos = np.flatnonzero(consensus_map(rec.annotations))
        neg = np.flatnonzero(negative_candidates(rec.annotations))
        if len(pos) == 0 or len(neg) == 0:
            log.warning("skipping %s: no %s candidates", rec.id, "edge" if len(pos) == 0 else "non-edge")
            continue
        w = rec.image.width
        for cand, count, label in ((pos, plan.n_pos, 1), (neg, plan.n_neg, 0)):
            flat = _draw(rng, cand, count)
            idx.append(np.full(count, k))
            rows.append(flat // w)
            cols.append(flat % w)
            labels.append(np.full(count, label))
    if not idx:
        return PatchSet(dataset, [], [], [], [], patch_size)
    return PatchSet(dataset, np.concatenate(idx), np.concatenate(rows), np.concatenate(cols),
                    np.concatenate(labels), patch_size)


# -- fine-tuning ----------------------------------------------------------------


def finetune_net(specs, params: NetParams, patches: PatchSet, hyper: TrainHyper, mode: str = "plain",
                 train_log: TrainLog | None = None) -> NetParams:
    """Per-pixel fine-tuning on centre-pixel labels.

    Every patch must be exactly the network's minimum patch size so the head
    output is 1x1.  ``mode`` picks the loss weights: plain (1, 1), positive
    (2, 1), negative (1, 2).  Minibatches follow a seeded permutation per epoch.
    """
    _check_mode(mode)
    need = min_patch_size(specs)
    if patches.size != need:
        raise GeometryError(f"patches are {patches.size}px but the network needs exactly {need}px")
    alpha, beta = LOSS_WEIGHTS[mode]
    rng = np.random.default_rng(hyper.seed)
    n = len(patches)
    if n == 0:
        raise ValueError("no patches to train on")

    def batches(epoch):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            yield patches.batch(order[start:start + hyper.batch_size])

    return train(specs, params, batches, hyper, alpha, beta, train_log=train_log)


def sample_gradient(specs, params: NetParams, patch, label: int, alpha: float = 1.0, beta: float = 1.0) -> NetParams:
    acts, _ = forward(specs, params, patch)
    return backward(specs, params, acts, label, alpha, beta)


def expected_gradient(specs, params: NetParams, pos_patches, neg_patches, n_pos: int, n_neg: int,
                      alpha: float = 1.0, beta: float = 1.0) -> np.ndarray:
    """Exact expected per-sample gradient under a sampling plan.

    A draw is an edge patch with probability n_pos / (n_pos + n_neg), chosen
    uniformly from ``pos_patches``, else a uniform non-edge patch.  Returns
    the flattened parameter gradient.
    """
    total = n_pos + n_neg

    def flat(g):
        return np.concatenate([np.concatenate([p.weight.ravel(), p.bias]) for p in g])

    acc = 0.0
    for patches, count, label in ((pos_patches, n_pos, 1), (neg_patches, n_neg, 0)):
        prob = count / total / len(patches)
        for x in patches:
            acc = acc + prob * flat(sample_gradient(specs, params, x, label, alpha, beta))
    return acc


# -- fusion ---------------------------------------------------------------------


@dataclass
class FusionWeights:
    coefficients: tuple
    validation_ods: float = float("nan")
    candidates: list = field(default_factory=list)  # (coefficients, validation ODS) in search order

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if np.any(c < 0) or abs(c.sum() - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must lie on the simplex, got {self.coefficients}")
        self.coefficients = tuple(float(v) for v in c)


def fuse(maps: Sequence, weights: FusionWeights) -> np.ndarray:
    """Pixelwise convex combination of edge maps."""
    if len(maps) != len(weights.coefficients):
        raise ValueError(f"{len(maps)} maps but {len(weights.coefficients)} weights")
    shape = np.shape(maps[0])
    out = np.zeros(shape)
    for m, w in zip(maps, weights.coefficients):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != shape:
            raise ValueError(f"map shape {m.shape} differs from {shape}")
        if w:
            out += w * m
    return np.clip(out, 0.0, 1.0)


def _simplex_grid(n_models: int, steps: int):
    """All weight vectors with entries in multiples of 1/steps, lexicographic order."""
    for combo in itertools.product(range(steps + 1), repeat=n_models - 1):
        last = steps - sum(combo)
        if last >= 0:
            yield tuple(Fraction(c, steps) for c in combo) + (Fraction(last, steps),)


def _local_grid(center, steps: int):
    """Simplex points on the 1/steps grid within one step of ``center`` in every coordinate."""
    base = [int(c * steps) for c in center]  # exact: center sits on the coarser grid
    for delta in itertools.product((-1, 0, 1), repeat=len(base)):
        cand = [b + d for b, d in zip(base, delta)]
        if sum(cand) == steps and min(cand) >= 0:
            yield tuple(Fraction(c, steps) for c in cand)


def search_fusion_weights(model_edge_maps: Sequence[Sequence], ground_truth: Sequence,
                          num_thresholds: int = DEFAULT_THRESHOLDS, max_dist: float | None = None,
                          resolution: int = 8, refinements: int = 2, thin: bool = True) -> FusionWeights:
    """Coarse-to-fine simplex search for fusion weights maximising validation ODS.

    The first level is the full 1/``resolution`` grid (one-hot corners
    included); each refinement halves the step and scans the neighbourhood of
    the incumbent.  Ties keep the lexicographically smallest weight vector.
    """
    n_models = len(model_edge_maps)
    if n_models == 0:
        raise ValueError("need at least one model")
    n_images = len(model_edge_maps[0])
    for k, maps in enumerate(model_edge_maps):
        if len(maps) != n_images:
            raise ValueError(f"model {k} has {len(maps)} maps, expected {n_images}")
        for i, m in enumerate(maps):
            if np.shape(m) != np.shape(model_edge_maps[0][i]):
                raise ValueError(f"model {k}, image {i}: shape {np.shape(m)} differs from model 0")
    if n_models == 1:
        w = (1.0,)
        ods = _fused_ods(model_edge_maps, w, ground_truth, num_thresholds, max_dist, thin)
        return FusionWeights(w, ods, [(w, ods)])

    seen: dict = {}

    def score(w):
        if w not in seen:
            seen[w] = _fused_ods(model_edge_maps, tuple(float(v) for v in w), ground_truth,
                                 num_thresholds, max_dist, thin)
            log.debug("fusion candidate %s: ODS %.4f", [float(v) for v in w], seen[w])
        return seen[w]

    best_w, best = None, -1.0
    steps = resolution
    candidates = list(_simplex_grid(n_models, steps))
    for level in range(refinements + 1):
        for w in candidates:
            s = score(w)
            if s > best or (s == best and w < best_w):
                best_w, best = w, s
        steps *= 2
        candidates = sorted(_local_grid(best_w, steps))
    return FusionWeights(tuple(float(v) for v in best_w), best,
                         [(tuple(float(v) for v in w), s) for w, s in seen.items()])


def _fused_ods(model_edge_maps, weights, ground_truth, num_thresholds, max_dist, thin) -> float:
    fw = FusionWeights(weights)
    fused = []
    for i in range(len(model_edge_maps[0])):
        m = fuse([maps[i] for maps in model_edge_maps], fw)
        fused.append(nms_thin(m) if thin else m)
    return evaluate_dataset(fused, ground_truth, num_thresholds, max_dist).ods_f
