"""Per-pixel feature vectors from originals and translation differences.

The full vector at each pixel is [u, d_x, v, d_y]: pre-event pixel,
pre-domain difference, post-event pixel, post-domain difference, giving
2*c1 + 2*c2 components. The two ablations drop either the differences
([u, v]) or the originals ([d_x, d_y]).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..cae import TranslationResult
from ..raster import Raster


class FeatureVariant(str, Enum):
    FULL = "full"
    NO_DIFFERENCES = "no-diff"
    NO_ORIGINALS = "no-orig"


_PARTS = {
    FeatureVariant.FULL: ("u", "d_x", "v", "d_y"),
    FeatureVariant.NO_DIFFERENCES: ("u", "v"),
    FeatureVariant.NO_ORIGINALS: ("d_x", "d_y"),
}


@dataclass(frozen=True)
class FeatureStack:
    vectors: np.ndarray  # (height * width, dim), row-major pixels
    height: int
    width: int
    c1: int
    c2: int
    variant: FeatureVariant

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def slices(self) -> dict[str, slice]:
        """Column range of each component in this stack."""
        widths = {"u": self.c1, "d_x": self.c1, "v": self.c2, "d_y": self.c2}
        out, start = {}, 0
        for part in _PARTS[self.variant]:
            out[part] = slice(start, start + widths[part])
            start += widths[part]
        return out

    def component(self, name: str) -> np.ndarray:
        """One component as an (H, W, channels) plane."""
        return self.vectors[:, self.slices()[name]].reshape(self.height, self.width, -1)


def feature_dim(c1: int, c2: int, variant: FeatureVariant) -> int:
    variant = FeatureVariant(variant)
    widths = {"u": c1, "d_x": c1, "v": c2, "d_y": c2}
    return sum(widths[p] for p in _PARTS[variant])


def stack_features(x: Raster, y: Raster, result: TranslationResult, variant=FeatureVariant.FULL) -> FeatureStack:
    """Stack originals and differences per pixel in the order u, d_x, v, d_y."""
    variant = FeatureVariant(variant)
    if x.shape != result.d_x.shape:
        raise ValueError(f"x is {x.shape} but d_x is {result.d_x.shape}")
    if y.shape != result.d_y.shape:
        raise ValueError(f"y is {y.shape} but d_y is {result.d_y.shape}")
    planes = {"u": x.data, "d_x": result.d_x.data, "v": y.data, "d_y": result.d_y.data}
    h, w = x.height, x.width
    cols = [np.asarray(planes[p], dtype=np.float64).reshape(h * w, -1) for p in _PARTS[variant]]
    return FeatureStack(np.concatenate(cols, axis=1), h, w, x.channels, y.channels, variant)
