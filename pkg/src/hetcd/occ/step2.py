"""Step 2: an ensemble of five MLPs trained on labelled positives vs reliable negatives.

Hyperparameters are fixed across all experiments: relu hidden layers,
logistic output, binary cross-entropy with an L2 penalty on the weights,
Adam, shuffled minibatches and stopping once the epoch loss has failed
to improve by `tol` for `n_iter_no_change` consecutive epochs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..nnkit import AdamState, Network, adam_update_, dense
from ..raster import LabeledSet
from .features import FeatureStack

log = logging.getLogger(__name__)

LAYOUTS: tuple[tuple[int, ...], ...] = ((1000,), (100, 100), (200, 200), (100, 100, 100), (200, 200, 200))
_PREDICT_CHUNK = 65536


@dataclass(frozen=True)
class MlpConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l2: float = 1e-4
    batch_size: int = 200
    max_epochs: int = 200
    tol: float = 1e-4
    n_iter_no_change: int = 10


@dataclass
class MlpEnsemble:
    members: list[Network]
    seed: int
    config: MlpConfig = field(default_factory=MlpConfig)
    loss_curves: list[list[float]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.members) != len(LAYOUTS):
            raise ValueError(f"an ensemble has exactly {len(LAYOUTS)} members")

    @property
    def dim(self) -> int:
        return self.members[0].in_width

    def member_votes(self, x: np.ndarray) -> np.ndarray:
        """(n_members, n) boolean votes; a member votes positive when its output exceeds 0.5."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1] != self.dim:
            raise ValueError(f"features have {x.shape[1]} dims, ensemble expects {self.dim}")
        votes = np.empty((len(self.members), len(x)), dtype=bool)
        for i, net in enumerate(self.members):
            for s in range(0, len(x), _PREDICT_CHUNK):
                votes[i, s : s + _PREDICT_CHUNK] = net(x[s : s + _PREDICT_CHUNK])[:, 0] > 0.5
        return votes


def member_specs(dim: int, hidden: tuple[int, ...]):
    widths = (dim,) + tuple(hidden)
    specs = [dense(a, b, "relu") for a, b in zip(widths, widths[1:])]
    specs.append(dense(widths[-1], 1, "logistic"))
    return specs


def _bce(z: np.ndarray, t: np.ndarray) -> float:
    # mean of -t log s(z) - (1-t) log(1 - s(z)), computed from logits
    return float(np.mean(np.logaddexp(0.0, z) - t * z))


def train_member(x: np.ndarray, t: np.ndarray, hidden: tuple[int, ...], seed: int, cfg: MlpConfig = MlpConfig()):
    """Train one classifier; returns (network, per-epoch training loss)."""
    rng = np.random.default_rng(seed)
    net = Network.init(member_specs(x.shape[1], hidden), int(rng.integers(2**31)))
    adam = AdamState.fresh(net.params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    n = len(x)
    bs = min(cfg.batch_size, n)
    weight_idx = list(range(0, len(net.params), 2))
    best, stale, curve = np.inf, 0, []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s : s + bs]
            m = len(idx)
            trace = net.forward(x[idx])
            z = trace.pre[-1][:, 0]
            a = trace.output[:, 0]
            penalty = 0.5 * cfg.l2 * sum(float((net.params[i] ** 2).sum()) for i in weight_idx) / m
            total += (_bce(z, t[idx]) + penalty) * m
            grads = net.backward(trace, ((a - t[idx]) / m)[:, None], from_preactivation=True)[0]
            for i in weight_idx:
                grads[i] = grads[i] + cfg.l2 * net.params[i] / m
            adam_update_(net.params, grads, adam)
        loss = total / n
        curve.append(loss)
        if loss > best - cfg.tol:
            stale += 1
        else:
            stale = 0
        best = min(best, loss)
        if stale >= cfg.n_iter_no_change:
            break
    log.debug("member %s stopped after %d epochs, loss %.5f", hidden, len(curve), curve[-1])
    return net, curve


def fit_step2(features: FeatureStack | np.ndarray, p: LabeledSet, rn: np.ndarray, seed: int, cfg: MlpConfig = MlpConfig()) -> MlpEnsemble:
    x = features.vectors if isinstance(features, FeatureStack) else np.asarray(features, dtype=np.float64)
    rn = np.asarray(rn, dtype=np.int64)
    if len(p) < 1 or len(rn) < 1:
        raise ValueError("step 2 needs at least one labelled positive and one reliable negative")
    idx = np.concatenate([p.positive_indices, rn])
    xt = x[idx]
    t = np.concatenate([np.ones(len(p)), np.zeros(len(rn))])
    seeds = np.random.SeedSequence(seed).generate_state(len(LAYOUTS))
    members, curves = [], []
    for hidden, s in zip(LAYOUTS, seeds):
        net, curve = train_member(xt, t, hidden, int(s), cfg)
        members.append(net)
        curves.append(curve)
    return MlpEnsemble(members, seed, cfg, curves)


@dataclass(frozen=True)
class ChangeMap:
    votes: np.ndarray  # (H, W) fraction of members voting positive
    threshold: float

    @property
    def binary(self) -> np.ndarray:
        return (self.votes > self.threshold).astype(np.uint8)

    def at(self, threshold: float) -> "ChangeMap":
        return ChangeMap(self.votes, threshold)


def predict(ensemble: MlpEnsemble, features: FeatureStack, t: float = 0.5) -> ChangeMap:
    """Vote fractions over the ensemble, thresholded at t (0.5 = 3 of 5, 0.3 = 2 of 5)."""
    if features.dim != ensemble.dim:
        raise ValueError(f"features have {features.dim} dims, ensemble expects {ensemble.dim}")
    counts = ensemble.member_votes(features.vectors).sum(axis=0)
    votes = (counts / len(ensemble.members)).reshape(features.height, features.width)
    return ChangeMap(votes, t)
