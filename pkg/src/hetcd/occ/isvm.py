"""Iterative linear SVM baseline for the second step.

Starting from the step-1 reliable negatives, a linear SVM is trained on
positives vs RN, the remaining unlabelled pixels it calls negative join
RN, and the SVM is retrained. Iteration stops when the false negative
rate on the labelled positives exceeds 5% (the last model within the
limit is kept), when no new negatives appear, or after 20 rounds.

The SVM itself is a Pegasos-style stochastic subgradient solver for the
class-balanced hinge objective, on standardized features with a bias
column.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..raster import LabeledSet
from .features import FeatureStack

LAMBDA_GRID = tuple(4.0 ** k for k in range(-5, 6))
FNR_LIMIT = 0.05
MAX_ITER = 20


@dataclass(frozen=True)
class LinearSvm:
    w: np.ndarray
    b: float
    lam: float
    mean: np.ndarray
    scale: np.ndarray

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision(x) > 0).astype(np.uint8)


def train_linear_svm(
    x: np.ndarray, y: np.ndarray, lam: float, seed: int, steps: int = 2000, batch: int = 64
) -> LinearSvm:
    """Minimise lam/2 |w|^2 + mean_i c_i max(0, 1 - y_i (w.x_i + b)), y in {-1, +1}.

    c_i balances the two classes. Iterates are projected onto the ball of
    radius 1/sqrt(lam) and the second half of the trajectory is averaged.
    """
    rng = np.random.default_rng(seed)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = np.hstack([(x - mean) / scale, np.ones((len(x), 1))])
    n_pos = max((y > 0).sum(), 1)
    n_neg = max((y < 0).sum(), 1)
    c = np.where(y > 0, len(y) / (2.0 * n_pos), len(y) / (2.0 * n_neg))
    w = np.zeros(xs.shape[1])
    avg = np.zeros_like(w)
    radius = 1.0 / np.sqrt(lam)
    half = steps // 2
    for t in range(1, steps + 1):
        idx = rng.integers(0, len(xs), size=min(batch, len(xs)))
        margin = y[idx] * (xs[idx] @ w)
        active = margin < 1
        sub = (c[idx][active] * y[idx][active]) @ xs[idx][active] / len(idx)
        eta = 1.0 / (lam * t)
        w = (1 - eta * lam) * w + eta * sub
        norm = np.linalg.norm(w)
        if norm > radius:
            w *= radius / norm
        if t > half:
            avg += w
    avg /= steps - half
    return LinearSvm(avg[:-1], float(avg[-1]), lam, mean, scale)


def false_negative_rate(model, x_pos: np.ndarray) -> float:
    if len(x_pos) == 0:
        return 0.0
    return float(np.mean(model.decision(x_pos) <= 0))


def select_lambda(x: np.ndarray, pos: np.ndarray, rn: np.ndarray, seed: int, grid=LAMBDA_GRID) -> float:
    """Pick the penalty with the lowest FNR on a held-out 20% of the positives.

    Ties go to the lower error rate on the reliable negatives, then to the
    larger penalty.
    """
    rng = np.random.default_rng(seed)
    perm = rng.permutation(pos)
    n_hold = max(1, int(round(0.2 * len(pos)))) if len(pos) > 1 else 0
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        train = perm
    xt = np.vstack([x[train], x[rn]])
    yt = np.concatenate([np.ones(len(train)), -np.ones(len(rn))])
    best = None
    for lam in grid:
        model = train_linear_svm(xt, yt, lam, seed)
        fnr = false_negative_rate(model, x[hold]) if n_hold else false_negative_rate(model, x[train])
        fpr = float(np.mean(model.decision(x[rn]) > 0))
        key = (fnr, fpr, -lam)
        if best is None or key < best[0]:
            best = (key, lam)
    return best[1]


@dataclass
class IsvmResult:
    model: LinearSvm
    iterations: int  # index (1-based) of the returned model
    rn_sizes: list[int] = field(default_factory=list)
    fnrs: list[float] = field(default_factory=list)
    stop_reason: str = ""
    reliable_negatives: np.ndarray | None = None


def iterate_svm(
    train: Callable[[np.ndarray, np.ndarray], object],
    x: np.ndarray,
    pos: np.ndarray,
    rn: np.ndarray,
    unlabeled: np.ndarray,
    max_iter: int = MAX_ITER,
    fnr_limit: float = FNR_LIMIT,
) -> IsvmResult:
    """The iteration and stop rule, independent of the classifier.

    `train(pos_idx, neg_idx)` returns a model with `.decision(x)`.
    """
    rn = np.asarray(rn, dtype=np.int64)
    remaining = np.setdiff1d(unlabeled, rn)
    rn_sizes, fnrs = [], []
    previous = None
    for it in range(1, max_iter + 1):
        model = train(pos, rn)
        fnr = false_negative_rate(model, x[pos])
        rn_sizes.append(len(rn))
        fnrs.append(fnr)
        if fnr > fnr_limit:
            if previous is None:
                return IsvmResult(model, it, rn_sizes, fnrs, "fnr-exceeded-first", rn)
            return IsvmResult(previous[0], it - 1, rn_sizes, fnrs, "fnr-exceeded", previous[1])
        new_neg = remaining[model.decision(x[remaining]) <= 0] if len(remaining) else remaining
        if len(new_neg) == 0:
            return IsvmResult(model, it, rn_sizes, fnrs, "converged", rn)
        previous = (model, rn)
        rn = np.union1d(rn, new_neg)
        remaining = np.setdiff1d(remaining, new_neg)
    return IsvmResult(model, max_iter, rn_sizes, fnrs, "max-iterations", rn)


def fit_isvm(features: FeatureStack | np.ndarray, p: LabeledSet, rn: np.ndarray, seed: int = 0) -> IsvmResult:
    x = features.vectors if isinstance(features, FeatureStack) else np.asarray(features, dtype=np.float64)
    if len(p) == 0:
        raise ValueError("iterative SVM needs labelled positives")
    pos = p.positive_indices
    rn = np.asarray(rn, dtype=np.int64)
    lam = select_lambda(x, pos, rn, seed)

    def train(pos_idx, neg_idx):
        xt = np.vstack([x[pos_idx], x[neg_idx]])
        yt = np.concatenate([np.ones(len(pos_idx)), -np.ones(len(neg_idx))])
        return train_linear_svm(xt, yt, lam, seed)

    return iterate_svm(train, x, pos, rn, p.unlabeled_indices())
