"""Raster containers, bundle I/O, normalization and positive-label sampling.

A bundle on disk is a JSON manifest next to raw headerless binaries:
rasters are 32-bit little-endian floats in band-sequential order
(channel, row, column), masks are unsigned bytes holding 0/1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

RASTER_DTYPE = "f32le"
MASK_DTYPE = "u8"
LAYOUT = "band-sequential"


class BundleError(ValueError):
    """Raised when a bundle manifest or its binaries are inconsistent."""


@dataclass(frozen=True)
class Raster:
    """An H x W x C array of finite values with one name per channel."""

    data: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"raster data must be H x W x C, got shape {data.shape}")
        names = tuple(self.names)
        if len(names) != data.shape[2]:
            raise ValueError(f"{len(names)} channel names for {data.shape[2]} channels")
        if not np.all(np.isfinite(data)):
            raise ValueError("raster contains non-finite values")
        data = data.view()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_array(cls, data, names: Optional[Sequence[str]] = None) -> "Raster":
        data = np.asarray(data)
        if data.ndim == 2:
            data = data[:, :, None]
        if names is None:
            names = [f"b{i + 1}" for i in range(data.shape[2])]
        return cls(data, tuple(names))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[:, :, self.names.index(name)]
        except ValueError:
            raise KeyError(f"no channel named {name!r} (have {list(self.names)})") from None

    def pixels(self) -> np.ndarray:
        """Flat (H*W, C) view in row-major pixel order."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class DatasetBundle:
    t1: Raster
    t2: Raster
    ground_truth: Optional[np.ndarray] = None
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "bundle"
    pixel_spacing: Optional[float] = None

    def __post_init__(self):
        if self.t1.shape[:2] != self.t2.shape[:2]:
            raise BundleError(
                f"t1 is {self.t1.shape[:2]} but t2 is {self.t2.shape[:2]}; rasters must be co-registered"
            )
        hw = self.t1.shape[:2]
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", _check_mask(self.ground_truth, hw, "ground_truth"))
        masks = {k: _check_mask(v, hw, k) for k, v in self.region_masks.items()}
        object.__setattr__(self, "region_masks", masks)

    @property
    def height(self) -> int:
        return self.t1.height

    @property
    def width(self) -> int:
        return self.t1.width


def _check_mask(mask, hw, label) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != tuple(hw):
        raise BundleError(f"mask {label!r} has shape {mask.shape}, expected {tuple(hw)}")
    if not np.isin(mask, (0, 1)).all():
        raise BundleError(f"mask {label!r} must only hold 0/1")
    mask = mask.astype(np.uint8)
    mask.flags.writeable = False
    return mask


@dataclass(frozen=True)
class LabeledSet:
    """Labelled positives P as flat pixel indices; U is the complement."""

    positive_indices: np.ndarray
    universe_size: int

    def __post_init__(self):
        idx = np.asarray(self.positive_indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("positive_indices must be one-dimensional")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("positive_indices must be unique")
        if len(idx) and (idx.min() < 0 or idx.max() >= self.universe_size):
            raise ValueError("positive index out of range")
        idx.flags.writeable = False
        object.__setattr__(self, "positive_indices", idx)

    def __len__(self) -> int:
        return len(self.positive_indices)

    def positive_mask(self) -> np.ndarray:
        mask = np.zeros(self.universe_size, dtype=bool)
        mask[self.positive_indices] = True
        return mask

    def unlabeled_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.positive_mask())


# ---------------------------------------------------------------- bundle I/O


def _read_raster(base: Path, spec: dict) -> Raster:
    for key in ("file", "height", "width", "channels"):
        if key not in spec:
            raise BundleError(f"band spec missing {key!r}")
    if spec.get("dtype", RASTER_DTYPE) != RASTER_DTYPE:
        raise BundleError(f"unsupported raster dtype {spec.get('dtype')!r}")
    if spec.get("layout", LAYOUT) != LAYOUT:
        raise BundleError(f"unsupported layout {spec.get('layout')!r}")
    h, w, c = int(spec["height"]), int(spec["width"]), int(spec["channels"])
    path = base / spec["file"]
    if not path.is_file():
        raise BundleError(f"missing raster file {path}")
    raw = path.read_bytes()
    if len(raw) != h * w * c * 4:
        raise BundleError(f"{path} holds {len(raw)} bytes, expected {h}*{w}*{c}*4 = {h * w * c * 4}")
    data = np.frombuffer(raw, dtype="<f4").reshape(c, h, w).transpose(1, 2, 0)
    names = spec.get("names") or [f"b{i + 1}" for i in range(c)]
    if not np.all(np.isfinite(data)):
        raise BundleError(f"{path} contains non-finite values")
    return Raster(np.ascontiguousarray(data, dtype=np.float32), tuple(names))


def _read_mask(base: Path, spec: dict, hw) -> np.ndarray:
    if spec.get("dtype", MASK_DTYPE) != MASK_DTYPE:
        raise BundleError(f"unsupported mask dtype {spec.get('dtype')!r}")
    path = base / spec["file"]
    if not path.is_file():
        raise BundleError(f"missing mask file {path}")
    raw = path.read_bytes()
    if len(raw) != hw[0] * hw[1]:
        raise BundleError(f"{path} holds {len(raw)} bytes, expected {hw[0] * hw[1]}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(hw).copy()


def load_bundle(manifest_path) -> DatasetBundle:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise BundleError(f"manifest not found: {manifest_path}")
    meta = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    for key in ("t1", "t2"):
        if key not in meta:
            raise BundleError(f"manifest missing {key!r}")
    t1 = _read_raster(base, meta["t1"])
    t2 = _read_raster(base, meta["t2"])
    if t1.shape[:2] != t2.shape[:2]:
        raise BundleError(f"t1 is {t1.shape[:2]} but t2 is {t2.shape[:2]}")
    hw = t1.shape[:2]
    gt = _read_mask(base, meta["ground_truth"], hw) if meta.get("ground_truth") else None
    regions = {k: _read_mask(base, v, hw) for k, v in (meta.get("region_masks") or {}).items()}
    return DatasetBundle(
        t1=t1,
        t2=t2,
        ground_truth=gt,
        region_masks=regions,
        name=meta.get("name", manifest_path.stem),
        pixel_spacing=meta.get("pixel_spacing"),
    )


def raster_to_bytes(r: Raster) -> bytes:
    return np.ascontiguousarray(r.data.transpose(2, 0, 1), dtype="<f4").tobytes()


def band_spec(r: Raster, filename: str) -> dict:
    return {
        "file": filename,
        "height": r.height,
        "width": r.width,
        "channels": r.channels,
        "dtype": RASTER_DTYPE,
        "layout": LAYOUT,
        "names": list(r.names),
    }


def write_raster(r: Raster, path) -> dict:
    path = Path(path)
    path.write_bytes(raster_to_bytes(r))
    return band_spec(r, path.name)


def read_raster(base, spec: dict) -> Raster:
    """Read one raster described by a band spec, relative to `base`."""
    return _read_raster(Path(base), spec)


def read_mask(path, hw) -> np.ndarray:
    """Read a raw 0/1 uint8 mask of shape `hw`."""
    path = Path(path)
    mask = _read_mask(path.parent, {"file": path.name}, hw)
    return _check_mask(mask, tuple(hw), path.name)


def write_mask(mask: np.ndarray, path) -> dict:
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())
    return {"file": path.name, "dtype": MASK_DTYPE}


def write_bundle(bundle: DatasetBundle, directory) -> Path:
    """Write `bundle` into `directory` and return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"name": bundle.name}
    if bundle.pixel_spacing is not None:
        meta["pixel_spacing"] = bundle.pixel_spacing
    meta["t1"] = write_raster(bundle.t1, directory / "t1.f32")
    meta["t2"] = write_raster(bundle.t2, directory / "t2.f32")
    if bundle.ground_truth is not None:
        meta["ground_truth"] = write_mask(bundle.ground_truth, directory / "ground_truth.u8")
    if bundle.region_masks:
        meta["region_masks"] = {
            name: write_mask(mask, directory / f"region_{name}.u8")
            for name, mask in sorted(bundle.region_masks.items())
        }
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps(meta, indent=2) + "\n")
    return manifest


# ------------------------------------------------------------ preprocessing


def normalize_raster(r: Raster) -> Raster:
    """Map every channel affinely onto [-1, 1]; constant channels become 0."""
    data = np.asarray(r.data, dtype=np.float64)
    lo = data.min(axis=(0, 1))
    hi = data.max(axis=(0, 1))
    span = hi - lo
    out = np.zeros_like(data)
    live = span > 0
    out[:, :, live] = 2.0 * (data[:, :, live] - lo[live]) / span[live] - 1.0
    # clip the rounding error so repeated normalization is a fixed point
    np.clip(out, -1.0, 1.0, out=out)
    return Raster(out, r.names)


def sample_positive_set(ground_truth: np.ndarray, npos: int, seed: int) -> LabeledSet:
    """First `npos` entries of a seeded permutation of all positive pixels.

    Because the permutation depends only on (mask, seed), a smaller draw is
    always an ordered prefix of a larger one.
    """
    gt = np.asarray(ground_truth).ravel()
    positives = np.flatnonzero(gt)
    if npos < 1:
        raise ValueError("npos must be at least 1")
    if npos > len(positives):
        raise ValueError(f"npos={npos} exceeds the {len(positives)} positive pixels available")
    order = np.random.default_rng(seed).permutation(len(positives))
    return LabeledSet(positives[order[:npos]], gt.size)
