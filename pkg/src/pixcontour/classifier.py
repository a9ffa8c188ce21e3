"""Linear SVM edge classifier and two-resolution detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .pyramid import PixelFeatureMap, PyramidConfig, extract_pyramid
from .tensor import ImagePlane, bilinear_resize

log = logging.getLogger(__name__)


class DegenerateTrainingError(ValueError):
    """Training data does not contain both classes."""


@dataclass
class LinearSvm:
    weights: np.ndarray
    bias: float
    lam: float = 1e-4
    epochs: int = 10
    seed: int = 0
    history: list = field(default_factory=list)  # objective at each epoch checkpoint

    @property
    def dim(self) -> int:
        return len(self.weights)

    def negated(self) -> "LinearSvm":
        return LinearSvm(-self.weights, -self.bias, self.lam, self.epochs, self.seed, list(self.history))


def _objective(w: np.ndarray, z: np.ndarray, y: np.ndarray, lam: float) -> float:
    hinge = np.maximum(0.0, 1.0 - y * (z @ w))
    return 0.5 * lam * float(w @ w) + float(hinge.mean())


def train_svm(features, labels, lam: float = 1e-4, epochs: int = 10, seed: int = 0) -> LinearSvm:
    """Pegasos: stochastic subgradient descent on the L2-regularised hinge loss.

    Features are standardised per coordinate and a constant coordinate is
    appended for the bias; the learned hyperplane is mapped back to raw
    feature space, so ``predict_margin`` is a plain ``w . x + b``.  The step
    at iteration t is 1 / (lam * t).  After each epoch the objective is
    evaluated on the whole training set and the best iterate so far is kept.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ValueError(f"features {x.shape} and labels {y.shape} do not line up")
    if not np.all(np.abs(y) == 1):
        raise ValueError("labels must be -1 or +1")
    if not ((y > 0).any() and (y < 0).any()):
        raise DegenerateTrainingError("SVM training needs samples of both classes")
    if lam <= 0:
        raise ValueError("lam must be positive")

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = np.hstack([(x - mean) / std, np.ones((len(x), 1))])
    n, d = z.shape
    radius = 1.0 / np.sqrt(lam)

    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    best_w, best_obj = w.copy(), _objective(w, z, y, lam)
    history = []
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * t)
            zi, yi = z[i], y[i]
            violated = yi * (zi @ w) < 1.0
            w *= 1.0 - eta * lam
            if violated:
                w += (eta * yi) * zi
            norm = np.sqrt(w @ w)
            if norm > radius:
                w *= radius / norm
        obj = _objective(w, z, y, lam)
        if obj < best_obj:
            best_w, best_obj = w.copy(), obj
        history.append(best_obj)
        log.debug("svm epoch %d: objective %.6f (best %.6f)", len(history), obj, best_obj)

    weights = best_w[:-1] / std
    bias = float(best_w[-1] - weights @ mean)
    return LinearSvm(weights, bias, lam, epochs, seed, history)


def predict_margin(svm: LinearSvm, feature_vector) -> float | np.ndarray:
    """``w . x + b`` for one vector, or for every row of a 2-D array."""
    x = np.asarray(feature_vector, dtype=np.float64)
    if x.shape[-1] != svm.dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match the SVM's {svm.dim}")
    m = x @ svm.weights + svm.bias
    return float(m) if np.ndim(m) == 0 else m


def margin_map(svm: LinearSvm, fmap: PixelFeatureMap) -> np.ndarray:
    if fmap.dim != svm.dim:
        raise ValueError(f"feature dimension {fmap.dim} does not match the SVM's {svm.dim}")
    return np.tensordot(svm.weights, fmap.features, axes=(0, 0)) + svm.bias


def margin_to_strength(margin):
    """Logistic map of an SVM margin onto (0, 1)."""
    s = expit(margin)
    return float(s) if np.ndim(s) == 0 else s


def detect_multiscale(image: ImagePlane, specs, params, svm: LinearSvm, config: PyramidConfig) -> np.ndarray:
    """Edge strengths averaged over every configured scale, each resized to the image size."""
    pyramid = extract_pyramid(image, specs, params, config)
    maps = []
    for scale in config.scales:
        s = margin_to_strength(margin_map(svm, pyramid[scale]))
        maps.append(bilinear_resize(s[None], image.height, image.width)[0])
    return average_maps(maps)


def average_maps(maps) -> np.ndarray:
    out = np.zeros_like(maps[0])
    for m in maps:
        out += m
    return np.clip(out / len(maps), 0.0, 1.0)
