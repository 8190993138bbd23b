"""Synthetic heterogeneous image pairs with weak target changes and strong confounders.

The scene is a smoothed map of latent land-cover classes, each with a
state vector. The pre-event image observes the state through a linear
sensor (4 channels), the post-event image through a nonlinear one
(3 channels), so no single affine map aligns the two domains.

Two kinds of change are injected:

* target changes: blobs in which class-0 pixels ("forest") move to a
  slightly shifted state. Only these pixels are marked in the ground truth.
* confounders: blobs with a large signal shift, either a bright occlusion
  in the pre-event image or a land-cover change to a distant state in the
  post-event image.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .raster import DatasetBundle, Raster

TARGET_SHIFT = np.array([-0.14, 0.12, -0.10])
CONFOUNDER_STATE = np.array([0.95, 0.05, 0.95])
_MAX_BLOBS = 100_000


@dataclass(frozen=True)
class SynthConfig:
    height: int = 128
    width: int = 128
    latent_classes: int = 4
    target_change_fraction: float = 0.05
    confounder_change_fraction: float = 0.10
    sensor_noise_sd: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("synthetic scenes must be at least 32 x 32")
        if self.latent_classes < 2:
            raise ValueError("need at least two latent classes")
        for f in (self.target_change_fraction, self.confounder_change_fraction):
            if not 0.0 <= f <= 1.0:
                raise ValueError("change fractions must lie in [0, 1]")
        if self.target_change_fraction + self.confounder_change_fraction > 1.0:
            raise ValueError("change fractions sum to more than 1")
        if self.sensor_noise_sd < 0:
            raise ValueError("sensor_noise_sd must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def class_states(k: int) -> np.ndarray:
    """Latent state vector per class, spread around a circle in [0.15, 0.85]^3."""
    a = 2 * np.pi * np.arange(k) / k + 0.3
    return 0.5 + 0.35 * np.stack([np.cos(a), np.sin(a), np.cos(2 * a + 0.7)], axis=1)


def sensor_a(state: np.ndarray) -> np.ndarray:
    """Linear pre-event sensor, 3 latent dims -> 4 channels."""
    m = np.array(
        [
            [0.6, 0.2, 0.1],
            [0.1, 0.7, 0.2],
            [0.3, 0.1, 0.8],
            [0.5, 0.5, -0.3],
        ]
    )
    return state @ m.T + np.array([0.05, 0.0, 0.1, 0.2])


def sensor_b(state: np.ndarray) -> np.ndarray:
    """Nonlinear post-event sensor, 3 latent dims -> 3 channels."""
    s0, s1, s2 = state[..., 0], state[..., 1], state[..., 2]
    return np.stack(
        [
            s0 ** 2 + 0.3 * s2,
            np.log1p(4.0 * s1) / np.log(5.0),
            0.8 * s2 ** 2 - 0.4 * s0 * s1 + 0.3,
        ],
        axis=-1,
    )


def _class_map(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    fields = rng.standard_normal((cfg.latent_classes, cfg.height, cfg.width))
    fields = np.stack([ndimage.gaussian_filter(f, sigma=6.0, mode="reflect") for f in fields])
    return np.argmax(fields, axis=0)


def _blob(rng, h, w, yy, xx, center=None) -> np.ndarray:
    if center is None:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    else:
        cy, cx = center
    ry, rx = rng.uniform(3.0, 8.0, size=2)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / ry) ** 2 + (v / rx) ** 2 <= 1.0


def _grow(rng, h, w, wanted: int, allowed: np.ndarray, centers=None) -> np.ndarray:
    """Union of random blobs intersected with `allowed` until `wanted` pixels are covered."""
    mask = np.zeros((h, w), dtype=bool)
    if wanted == 0:
        return mask
    if allowed.sum() < wanted:
        raise ValueError("requested change fraction is infeasible for this scene")
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    for _ in range(_MAX_BLOBS):
        if centers is not None:
            cy, cx = centers[rng.integers(len(centers))]
            blob = _blob(rng, h, w, yy, xx, center=(cy + 0.5, cx + 0.5))
        else:
            blob = _blob(rng, h, w, yy, xx)
        mask |= blob & allowed
        if mask.sum() >= wanted:
            return mask
    raise ValueError("could not place enough change blobs; fractions infeasible")


def _split_components(rng, mask: np.ndarray) -> np.ndarray:
    """Assign each connected component of `mask` to one of two kinds at random."""
    labels, count = ndimage.label(mask)
    picks = np.concatenate([[False], rng.random(count) < 0.5])
    return picks[labels]


def generate_synthetic_pair(cfg: SynthConfig = SynthConfig()) -> DatasetBundle:
    rng = np.random.default_rng(cfg.seed)
    h, w, n = cfg.height, cfg.width, cfg.height * cfg.width
    classes = _class_map(cfg, rng)
    states = class_states(cfg.latent_classes)

    # shared within-class texture: a real signal present at both dates
    texture = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal((h, w)), 2.0) for _ in range(3)], axis=-1
    )
    texture *= 0.03 / max(texture.std(), 1e-12)
    pre_state = states[classes] + texture
    post_state = pre_state.copy()

    forest = classes == 0
    n_target = int(round(cfg.target_change_fraction * n))
    if n_target > forest.sum():
        raise ValueError("target change fraction exceeds the class-0 area")
    target = _grow(rng, h, w, n_target, forest, centers=np.argwhere(forest) if n_target else None)
    post_state[target] += TARGET_SHIFT

    n_conf = int(round(cfg.confounder_change_fraction * n))
    confounder = _grow(rng, h, w, n_conf, ~target)
    # split confounders into occlusions in the pre image and land-cover changes in the post image
    occlusion = _split_components(rng, confounder)
    landcover = confounder & ~occlusion
    post_state[landcover] = CONFOUNDER_STATE + texture[landcover]

    t1 = sensor_a(pre_state)
    t1[occlusion] = 0.4 * t1[occlusion] + 0.9
    t2 = sensor_b(post_state)

    t1 = t1 + cfg.sensor_noise_sd * rng.standard_normal(t1.shape)
    t2 = t2 + cfg.sensor_noise_sd * rng.standard_normal(t2.shape)

    regions = {
        "target": target.astype(np.uint8),
        "confounder": confounder.astype(np.uint8),
        "unchanged": (~(target | confounder)).astype(np.uint8),
    }
    return DatasetBundle(
        t1=Raster(t1.astype(np.float32), ("a1", "a2", "a3", "a4")),
        t2=Raster(t2.astype(np.float32), ("b1", "b2", "b3")),
        ground_truth=target.astype(np.uint8),
        region_masks=regions,
        name=f"synthetic-seed{cfg.seed}",
        pixel_spacing=10.0,
    )
