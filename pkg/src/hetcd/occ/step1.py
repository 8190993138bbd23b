"""Step 1: reliable negatives from a two-component Gaussian mixture.

Component 1 starts from the sample mean/covariance of the labelled
positives, component 0 from the unlabelled pixels, with equal priors.
One EM update follows: responsibilities are Gaussian posteriors (with
labelled positives clamped to component 1), means and covariances are
re-estimated as responsibility-weighted MLEs, and the priors become the
soft class proportions. Unlabelled pixels whose negative joint density
exceeds the positive one are the reliable negatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from ..raster import LabeledSet
from .features import FeatureStack

_RIDGE_START = 1e-6
_RIDGE_TRIES = 20


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


def regularized_cholesky(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of cov + ridge*I with ridge = 1e-6 * trace/dim, escalated x10 until PD."""
    d = cov.shape[0]
    scale = np.trace(cov) / d
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    ridge = _RIDGE_START * scale
    for _ in range(_RIDGE_TRIES):
        try:
            return np.linalg.cholesky(cov + ridge * np.eye(d)), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise SingularCovarianceError("covariance is not positive definite even after regularization")


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    sol = solve_triangular(chol, (x - mean).T, lower=True)
    maha = (sol * sol).sum(axis=0)
    logdet = 2.0 * np.log(np.diag(chol)).sum()
    return -0.5 * (d * np.log(2 * np.pi) + logdet + maha)


@dataclass(frozen=True)
class GmmModel:
    priors: np.ndarray  # (2,) P(L=0), P(L=1)
    means: np.ndarray  # (2, d)
    covs: np.ndarray  # (2, d, d), unregularized estimates
    ridge: np.ndarray  # (2,) ridge added before evaluating each density

    @classmethod
    def from_estimates(cls, priors, means, covs) -> "GmmModel":
        ridge = np.array([regularized_cholesky(c)[1] for c in covs])
        return cls(np.asarray(priors, float), np.asarray(means, float), np.asarray(covs, float), ridge)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def regularized_covs(self) -> np.ndarray:
        eye = np.eye(self.dim)
        return np.stack([c + r * eye for c, r in zip(self.covs, self.ridge)])

    def log_joint(self, x: np.ndarray) -> np.ndarray:
        """log P(L=k) + log f(x | L=k) for k = 0, 1; shape (n, 2)."""
        out = np.empty((len(x), 2))
        for k, cov in enumerate(self.regularized_covs()):
            chol = np.linalg.cholesky(cov)
            with np.errstate(divide="ignore"):
                out[:, k] = np.log(self.priors[k]) + gaussian_logpdf(x, self.means[k], chol)
        return out

    def negative(self, x: np.ndarray) -> np.ndarray:
        """Bayes decision P(L=0) f0 > P(L=1) f1, evaluated in log space."""
        lj = self.log_joint(x)
        return lj[:, 0] > lj[:, 1]


@dataclass(frozen=True)
class EmState:
    responsibilities: np.ndarray  # (n, 2)

    @property
    def counts(self) -> np.ndarray:
        return self.responsibilities.sum(axis=0)


@dataclass(frozen=True)
class Step1Result:
    model: GmmModel
    reliable_negatives: np.ndarray  # flat pixel indices, sorted
    initial: GmmModel
    em: EmState


def responsibilities(model: GmmModel, x: np.ndarray, positive: np.ndarray) -> EmState:
    lj = model.log_joint(x)
    gamma = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    gamma[positive] = (0.0, 1.0)
    return EmState(gamma)


def weighted_estimates(x: np.ndarray, weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Responsibility-weighted mean and MLE covariance (normalised by the weight sum)."""
    nk = weights.sum()
    mean = weights @ x / nk
    centred = x - mean
    cov = (centred * weights[:, None]).T @ centred / nk
    return mean, 0.5 * (cov + cov.T)


def fit_step1(features: FeatureStack | np.ndarray, p: LabeledSet) -> Step1Result:
    x = features.vectors if isinstance(features, FeatureStack) else np.asarray(features, dtype=np.float64)
    if len(p) < 2:
        raise ValueError("step 1 needs at least two labelled positives")
    if p.universe_size != len(x):
        raise ValueError(f"labelled set covers {p.universe_size} samples, features have {len(x)}")
    positive = p.positive_mask()
    if positive.all():
        raise ValueError("no unlabelled samples left")
    xp, xu = x[positive], x[~positive]

    initial = GmmModel.from_estimates(
        priors=[0.5, 0.5],
        means=[xu.mean(axis=0), xp.mean(axis=0)],
        covs=[np.atleast_2d(np.cov(xu, rowvar=False)), np.atleast_2d(np.cov(xp, rowvar=False))],
    )
    em = responsibilities(initial, x, positive)
    counts = em.counts
    est = [weighted_estimates(x, em.responsibilities[:, k]) for k in (0, 1)]
    model = GmmModel.from_estimates(
        priors=counts / len(x),
        means=[e[0] for e in est],
        covs=[e[1] for e in est],
    )
    negative = model.negative(x) & ~positive
    return Step1Result(model, np.flatnonzero(negative), initial, em)


def predict_step1(model: GmmModel, features: FeatureStack | np.ndarray) -> np.ndarray:
    """Positive wherever the negative component does not win; flat uint8 map."""
    x = features.vectors if isinstance(features, FeatureStack) else features
    return (~model.negative(x)).astype(np.uint8)
