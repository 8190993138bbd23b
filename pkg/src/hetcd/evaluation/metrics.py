"""Binary-map metrics, confusion-map rendering, region rates and NDVI change."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..raster import Raster

WHITE = (255, 255, 255)  # true positive
BLACK = (0, 0, 0)  # true negative
GREEN = (0, 255, 0)  # false positive
RED = (255, 0, 0)  # false negative


@dataclass(frozen=True)
class MetricsRecord:
    tp: int
    fp: int
    fn: int
    tn: int
    f1: float
    undefined: bool = False

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and truth {gt.shape} differ in shape")
    return pred.astype(bool), gt.astype(bool)


def f1_from_counts(tp: int, fp: int, fn: int) -> tuple[float, bool]:
    denom = tp + 0.5 * (fp + fn)
    if denom == 0:
        # no positives anywhere: perfect by convention, flagged
        return 1.0, True
    return tp / denom, False


def f1(pred, gt) -> MetricsRecord:
    p, g = _pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    score, undefined = f1_from_counts(tp, fp, fn)
    return MetricsRecord(tp, fp, fn, tn, score, undefined)


def confusion_map(pred, gt) -> np.ndarray:
    """RGB uint8 image: TP white, TN black, FP green, FN red."""
    p, g = _pair(pred, gt)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & g] = WHITE
    img[p & ~g] = GREEN
    img[~p & g] = RED
    return img


def write_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(Path(path))


@dataclass(frozen=True)
class RegionSpec:
    name: str
    mask: np.ndarray
    polarity: str = "expect_positive"  # or "expect_negative"

    def __post_init__(self):
        if self.polarity not in ("expect_positive", "expect_negative"):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass(frozen=True)
class RegionRate:
    name: str
    polarity: str
    pixels: int
    positive_rate: float
    negative_rate: float

    @property
    def correct_rate(self) -> float:
        return self.positive_rate if self.polarity == "expect_positive" else self.negative_rate


def region_rates(pred, regions: Sequence[RegionSpec]) -> list[RegionRate]:
    """Fraction of each region's pixels predicted positive / negative."""
    p = np.asarray(pred).astype(bool)
    out = []
    for r in regions:
        m = np.asarray(r.mask).astype(bool)
        if m.shape != p.shape:
            raise ValueError(f"region {r.name!r} mask {m.shape} does not match prediction {p.shape}")
        n = int(m.sum())
        if n == 0:
            raise ValueError(f"region {r.name!r} is empty")
        pos = float(p[m].sum()) / n
        out.append(RegionRate(r.name, r.polarity, n, pos, 1.0 - pos))
    return out


@dataclass(frozen=True)
class NdviDelta:
    mean_delta: float
    used: int
    excluded: int


def _named(r: Raster, name: str) -> np.ndarray:
    for i, n in enumerate(r.names):
        if n.lower() == name.lower():
            return np.asarray(r.data[:, :, i], dtype=np.float64)
    raise KeyError(f"raster has no {name!r} channel (channels: {list(r.names)})")


def ndvi(r: Raster, red: str = "red", nir: str = "nir") -> tuple[np.ndarray, np.ndarray]:
    """NDVI plane and a validity mask (False where NIR + Red == 0)."""
    rd, nr = _named(r, red), _named(r, nir)
    denom = nr + rd
    valid = denom != 0
    out = np.zeros_like(denom)
    np.divide(nr - rd, denom, out=out, where=valid)
    return out, valid


def ndvi_delta(pre: Raster, post: Raster, mask, red: str = "red", nir: str = "nir") -> NdviDelta:
    """Mean post-minus-pre NDVI over `mask`; zero-denominator pixels are skipped and counted."""
    a, va = ndvi(pre, red, nir)
    b, vb = ndvi(post, red, nir)
    m = np.asarray(mask).astype(bool)
    if m.shape != a.shape:
        raise ValueError("mask does not match raster shape")
    use = m & va & vb
    used = int(use.sum())
    mean = float((b - a)[use].mean()) if used else float("nan")
    return NdviDelta(mean, used, int(m.sum()) - used)
