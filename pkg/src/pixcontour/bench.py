"""Boundary benchmark: NMS thinning, tolerance matching, PR curve, ODS / OIS / AP."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import min_weight_full_bipartite_matching

DEFAULT_THRESHOLDS = 25
TOLERANCE_FRACTION = 0.0075


def default_max_dist(height: int, width: int) -> int:
    """Matching tolerance: 0.75% of the image diagonal, rounded up to whole pixels."""
    return math.ceil(TOLERANCE_FRACTION * math.hypot(height, width))


def thresholds(num: int = DEFAULT_THRESHOLDS) -> np.ndarray:
    """``num`` evenly spaced thresholds strictly inside (0, 1)."""
    if num < 2:
        raise ValueError("need at least two thresholds")
    return np.arange(1, num + 1) / (num + 1)


# -- non-maximum suppression ---------------------------------------------------


def _normal_angle(edge_map: np.ndarray) -> np.ndarray:
    """Orientation of the edge normal, from the gradient of the smoothed map.

    The gradient's outer product is averaged locally so that crest pixels,
    where the gradient itself vanishes, inherit the orientation of their flanks.
    """
    smooth = ndimage.gaussian_filter(edge_map, 1.0, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    jxx = ndimage.gaussian_filter(gx * gx, 1.0, mode="nearest")
    jxy = ndimage.gaussian_filter(gx * gy, 1.0, mode="nearest")
    jyy = ndimage.gaussian_filter(gy * gy, 1.0, mode="nearest")
    return 0.5 * np.arctan2(2.0 * jxy, jxx - jyy)


def _interp(e: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(e, [rows, cols], order=1, mode="nearest")


def _nms_pass(e: np.ndarray) -> np.ndarray:
    theta = _normal_angle(e)
    # snap tiny components so that axis-aligned normals interpolate exactly
    dy = np.round(np.sin(theta), 12)
    dx = np.round(np.cos(theta), 12)
    # orient so (dy, dx) points to the later pixel in row-major scan order
    flip = (dy < 0) | ((dy == 0) & (dx < 0))
    dy = np.where(flip, -dy, dy)
    dx = np.where(flip, -dx, dx)
    r, c = np.indices(e.shape, dtype=np.float64)
    later = _interp(e, r + dy, c + dx)
    earlier = _interp(e, r - dy, c - dx)
    keep = (e >= earlier) & (e > later) & (e > 0)
    return np.where(keep, e, 0.0)


def nms_thin(edge_map) -> np.ndarray:
    """Keep pixels that are maxima across the edge; of two tied pixels the later one stays.

    A pixel survives when its strength is at least the interpolated strength
    one pixel before it along the edge normal and strictly above the one after
    it (scan order).  The pass is repeated until nothing changes, so the
    result is a fixed point.
    """
    e = np.asarray(edge_map, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("edge map must be 2-D")
    while True:
        thinned = _nms_pass(e)
        if np.array_equal(thinned, e):
            return thinned
        e = thinned


# -- matching --------------------------------------------------------------------


def _offsets(max_dist: float):
    r = int(math.floor(max_dist))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    d = np.hypot(dy, dx)
    ok = d <= max_dist
    return dy[ok], dx[ok], d[ok]


def match_boundaries(machine, annotation, max_dist: float):
    """One-to-one matching of boundary pixels within ``max_dist`` (Euclidean).

    The matching has maximum cardinality and, among those, minimum total
    distance.  Returns boolean maps of matched machine and annotation pixels.
    """
    machine = np.asarray(machine, dtype=bool)
    annotation = np.asarray(annotation, dtype=bool)
    m_matched = np.zeros_like(machine)
    g_matched = np.zeros_like(annotation)
    pairs = matched_pairs(machine, annotation, max_dist)
    m_matched[pairs[:, 0], pairs[:, 1]] = True
    g_matched[pairs[:, 2], pairs[:, 3]] = True
    return m_matched, g_matched


def matched_pairs(machine, annotation, max_dist: float) -> np.ndarray:
    """The matching behind ``match_boundaries`` as (K, 4) rows of (machine r, c, annotation r, c)."""
    machine = np.asarray(machine, dtype=bool)
    annotation = np.asarray(annotation, dtype=bool)
    if machine.shape != annotation.shape:
        raise ValueError(f"shape mismatch {machine.shape} vs {annotation.shape}")
    if max_dist < 0:
        raise ValueError("max_dist must be nonnegative")
    none = np.zeros((0, 4), dtype=np.intp)
    mr, mc = np.nonzero(machine)
    gr, gc = np.nonzero(annotation)
    n, m = len(mr), len(gr)
    if n == 0 or m == 0:
        return none

    g_index = np.full(annotation.shape, -1, dtype=np.intp)
    g_index[gr, gc] = np.arange(m)
    rows, cols, dist = [], [], []
    h, w = machine.shape
    for dy, dx, d in zip(*_offsets(max_dist)):
        r, c = mr + dy, mc + dx
        inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
        j = np.full(n, -1, dtype=np.intp)
        j[inside] = g_index[r[inside], c[inside]]
        hit = j >= 0
        rows.append(np.nonzero(hit)[0])
        cols.append(j[hit])
        dist.append(np.full(hit.sum(), d))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    dist = np.concatenate(dist)
    if len(rows) == 0:
        return none

    # Square augmentation: machine i may fall back to dummy column m + i and
    # annotation j to dummy row n + j at cost `big`; dummy row n + j and dummy
    # column m + i are joined wherever (i, j) is an edge so unused real pairs
    # can pair off their dummies.  A full matching always exists and its cost
    # is big * (n + m - 2 * |real pairs|) + distances, so minimising it gives
    # maximum cardinality first, then minimum distance.  A small constant is
    # added to every weight because the sparse solver treats zeros as absent.
    eps = 1.0
    big = 2.0 * (min(n, m) + 1) * (max_dist + 2 * eps) + 1.0
    ai = np.arange(n)
    aj = np.arange(m)
    r_all = np.concatenate([rows, ai, n + aj, n + cols])
    c_all = np.concatenate([cols, m + ai, aj, m + rows])
    w_all = np.concatenate([dist + eps, np.full(n, big), np.full(m, big), np.full(len(rows), eps)])
    graph = coo_matrix((w_all, (r_all, c_all)), shape=(n + m, n + m)).tocsr()
    row_ind, col_ind = min_weight_full_bipartite_matching(graph)
    match = np.empty(n + m, dtype=np.intp)
    match[row_ind] = col_ind
    match = match[:n]
    real = np.flatnonzero(match < m)
    j = match[real]
    return np.stack([mr[real], mc[real], gr[j], gc[j]], axis=1)


# -- precision / recall ------------------------------------------------------------


def f_measure(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class PrPoint:
    threshold: float
    matched_machine: int
    total_machine: int
    matched_gt: int
    total_gt: int

    @property
    def precision(self) -> float:
        return self.matched_machine / self.total_machine if self.total_machine else 0.0

    @property
    def recall(self) -> float:
        return self.matched_gt / self.total_gt if self.total_gt else 0.0

    @property
    def f(self) -> float:
        return f_measure(self.precision, self.recall)

    def __add__(self, other: "PrPoint") -> "PrPoint":
        return PrPoint(
            self.threshold,
            self.matched_machine + other.matched_machine,
            self.total_machine + other.total_machine,
            self.matched_gt + other.matched_gt,
            self.total_gt + other.total_gt,
        )


def image_counts(detection, annotations: Sequence, threshold: float, max_dist: float | None = None) -> PrPoint:
    """Counts for one thinned edge map against all its annotators."""
    det = np.asarray(detection, dtype=np.float64)
    if not len(annotations):
        raise ValueError("ground truth needs at least one annotation")
    if max_dist is None:
        max_dist = default_max_dist(*det.shape)
    machine = det >= threshold
    hit = np.zeros_like(machine)
    matched_gt = total_gt = 0
    for ann in annotations:
        ann = np.asarray(ann, dtype=bool)
        if ann.shape != det.shape:
            raise ValueError(f"annotation shape {ann.shape} does not match detection {det.shape}")
        mm, gm = match_boundaries(machine, ann, max_dist)
        hit |= mm
        matched_gt += int(gm.sum())
        total_gt += int(ann.sum())
    return PrPoint(float(threshold), int(hit.sum()), int(machine.sum()), matched_gt, total_gt)


def pr_at_threshold(detections: Sequence, gts: Sequence, threshold: float, max_dist: float | None = None) -> PrPoint:
    """Dataset precision/recall at one threshold, counts summed before dividing."""
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detections for {len(gts)} ground truths")
    total = PrPoint(float(threshold), 0, 0, 0, 0)
    for det, gt in zip(detections, gts):
        total = total + image_counts(det, gt, threshold, max_dist)
    return total


@dataclass
class EvalSummary:
    curve: list
    ods_f: float
    ods_threshold: float
    ois_f: float
    ap: float
    per_image_best: list = field(default_factory=list)  # (threshold, F) per image

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [asdict(p) for p in self.curve]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSummary":
        d = dict(d)
        d["curve"] = [PrPoint(**p) for p in d["curve"]]
        d["per_image_best"] = [tuple(x) for x in d.get("per_image_best", [])]
        return cls(**d)


def average_precision(curve: Sequence[PrPoint]) -> float:
    """Area under the precision-monotonised PR curve.

    Points are ordered by recall; precision at each recall is replaced by the
    best precision at that or any higher recall; the curve is extended to
    recall 0 at its first precision and integrated with the trapezoid rule.
    """
    r, p = monotone_curve(curve)
    return float(np.trapezoid(p, r)) if len(r) > 1 else 0.0


def monotone_curve(curve: Sequence[PrPoint]):
    pts = sorted((c.recall, c.precision) for c in curve)
    r = np.array([x[0] for x in pts])
    p = np.array([x[1] for x in pts])
    p = np.maximum.accumulate(p[::-1])[::-1]
    r = np.concatenate([[0.0], r])
    p = np.concatenate([[p[0]], p])
    return r, p


def evaluate_dataset(detections: Sequence, gts: Sequence, num_thresholds: int = DEFAULT_THRESHOLDS,
                     max_dist: float | None = None) -> EvalSummary:
    """ODS, OIS and AP of thinned edge maps against multi-annotator ground truth."""
    if not len(detections):
        raise ValueError("empty dataset")
    if len(detections) != len(gts):
        raise ValueError(f"{len(detections)} detections for {len(gts)} ground truths")
    ts = thresholds(num_thresholds)
    # counts[i][t] for image i, threshold t; summed in image order
    counts = [[image_counts(det, gt, t, max_dist) for t in ts] for det, gt in zip(detections, gts)]
    curve = []
    for ti, t in enumerate(ts):
        total = PrPoint(float(t), 0, 0, 0, 0)
        for per_image in counts:
            total = total + per_image[ti]
        curve.append(total)
    best = max(range(len(curve)), key=lambda i: (curve[i].f, -i))
    ois_total = PrPoint(float("nan"), 0, 0, 0, 0)
    per_image_best = []
    for per_image in counts:
        bi = max(range(len(per_image)), key=lambda i: (per_image[i].f, -i))
        per_image_best.append((float(ts[bi]), per_image[bi].f))
        ois_total = ois_total + per_image[bi]
    return EvalSummary(
        curve=curve,
        ods_f=curve[best].f,
        ods_threshold=float(ts[best]),
        ois_f=ois_total.f,
        ap=average_precision(curve),
        per_image_best=per_image_best,
    )


def export_pr_curve(summary: EvalSummary, destination) -> tuple[str, str]:
    """Write ``<destination>.csv`` (threshold, precision, recall, F) and ``<destination>.svg``."""
    if not summary.curve:
        raise ValueError("empty curve")
    dest = os.fspath(destination)
    stem = dest[:-4] if dest.endswith((".csv", ".svg")) else dest
    csv_path, svg_path = stem + ".csv", stem + ".svg"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f"])
        for pt in sorted(summary.curve, key=lambda p: p.threshold):
            writer.writerow([f"{pt.threshold:.6f}", f"{pt.precision:.6f}", f"{pt.recall:.6f}", f"{pt.f:.6f}"])
    _plot_pr(summary, svg_path)
    return csv_path, svg_path


def _plot_pr(summary: EvalSummary, path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = sorted(summary.curve, key=lambda p: p.threshold)
    fig, ax = plt.subplots(figsize=(4, 4))
    # iso-F contours
    rr = np.linspace(0.01, 1, 200)
    for f in np.arange(0.1, 1.0, 0.1):
        pp = f * rr / (2 * rr - f)
        ok = (pp > 0) & (pp <= 1)
        ax.plot(rr[ok], pp[ok], color="0.85", lw=0.5)
    ax.plot([p.recall for p in pts], [p.precision for p in pts], "-o", ms=2, lw=1.2,
            label=f"ODS={summary.ods_f:.3f} OIS={summary.ois_f:.3f} AP={summary.ap:.3f}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_aspect("equal")
    ax.legend(loc="lower left", fontsize=7)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "pixcontour"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
