"""Code-aligned autoencoders for change-aware image-to-image translation.

Two convolutional autoencoders, one per image domain, are trained jointly
so that their code spaces line up. Decoding one domain's code with the
other domain's decoder then translates between sensors:

    x_hat = D_X(E_Y(y))        y_hat = D_Y(E_X(x))

and the difference images d_x = x_hat - x and d_y = y - y_hat feed both
the unsupervised change map and the one-class classifier features.

Training minimises a weighted sum of four terms per batch of co-located
patches: reconstruction, code correlation (encoders only, weighted by the
input-space affinity prior), cycle consistency, and a translation loss
weighted by a per-pixel no-change weight that is refreshed every epoch
from the translations of the original images.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .nnkit import AdamState, Network, adam_update_, conv3x3, load_checkpoint, save_checkpoint
from .raster import Raster, read_raster, write_raster

log = logging.getLogger(__name__)

_EPS = 1e-12
_SPAN_FLOOR = 1e-12
NET_NAMES = ("encoder_x", "decoder_x", "encoder_y", "decoder_y")


@dataclass(frozen=True)
class CaeConfig:
    patch_size: int = 20
    patches_per_batch: int = 20
    batches_per_epoch: int = 600
    epochs: int = 10
    code_channels: int = 8
    hidden_channels: int = 32
    w_rec: float = 1.0
    w_code: float = 1.0
    w_cyc: float = 1.0
    w_tr: float = 1.0
    learning_rate: float = 1e-3
    tile_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 4:
            raise ValueError("patch_size must be at least 4")
        for name in ("w_rec", "w_code", "w_cyc", "w_tr"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        for name in ("patches_per_batch", "batches_per_epoch", "epochs", "code_channels", "hidden_channels", "tile_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class AffinityPrior:
    alpha: np.ndarray
    pi: np.ndarray


@dataclass(frozen=True)
class LossTerms:
    rec: float
    code: float
    cyc: float
    tr: float
    total: float


@dataclass
class EpochRecord:
    epoch: int
    rec: float
    code: float
    cyc: float
    tr: float
    total: float
    updates: int


@dataclass
class CaeModel:
    encoder_x: Network
    decoder_x: Network
    encoder_y: Network
    decoder_y: Network
    config: CaeConfig = field(default_factory=CaeConfig)
    history: list[EpochRecord] = field(default_factory=list)

    @property
    def c1(self) -> int:
        return self.encoder_x.in_width

    @property
    def c2(self) -> int:
        return self.encoder_y.in_width

    @property
    def nets(self) -> tuple[Network, Network, Network, Network]:
        return (self.encoder_x, self.decoder_x, self.encoder_y, self.decoder_y)

    @property
    def n_updates(self) -> int:
        return sum(r.updates for r in self.history)

    def flat_params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]

    def set_flat_params(self, params) -> None:
        i = 0
        for net in self.nets:
            k = len(net.params)
            net.params = list(params[i : i + k])
            i += k


def encoder_specs(c_in: int, hidden: int, code: int):
    return [
        conv3x3(c_in, hidden, "leaky_relu"),
        conv3x3(hidden, hidden, "leaky_relu"),
        conv3x3(hidden, code, "identity"),
    ]


def decoder_specs(code: int, hidden: int, c_out: int):
    return [
        conv3x3(code, hidden, "leaky_relu"),
        conv3x3(hidden, hidden, "leaky_relu"),
        conv3x3(hidden, c_out, "tanh"),
    ]


def build_cae(c1: int, c2: int, cfg: CaeConfig = CaeConfig()) -> CaeModel:
    seeds = np.random.SeedSequence(cfg.seed).generate_state(4)
    k, h = cfg.code_channels, cfg.hidden_channels
    return CaeModel(
        Network.init(encoder_specs(c1, h, k), int(seeds[0])),
        Network.init(decoder_specs(k, h, c1), int(seeds[1])),
        Network.init(encoder_specs(c2, h, k), int(seeds[2])),
        Network.init(decoder_specs(k, h, c2), int(seeds[3])),
        cfg,
    )


# ------------------------------------------------------------ affinity prior


def _affinity(p: np.ndarray) -> np.ndarray:
    """Gaussian affinities for a stack of patches p of shape (B, n, c)."""
    sq = (p * p).sum(-1)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * p @ p.transpose(0, 2, 1)
    np.maximum(d2, 0.0, out=d2)
    n = p.shape[1]
    idx = np.arange(n)
    d2[:, idx, idx] = 0.0
    d = np.sqrt(d2)
    mean = d.sum(axis=(1, 2)) / (n * (n - 1)) if n > 1 else np.zeros(len(p))
    width = np.maximum(mean, 1e-9)
    return np.exp(-d2 / (width * width)[:, None, None])


def affinity_priors(patch_x: np.ndarray, patch_y: np.ndarray) -> AffinityPrior:
    """Per-pixel change prior for a batch of co-located patches.

    Inputs are (B, h, w, c1) and (B, h, w, c2); outputs are (B, h, w). For each
    patch the within-modality affinity matrices are compared pixel by pixel
    and the mean absolute disagreement is min-max scaled to [0, 1].
    """
    px = np.asarray(patch_x, dtype=np.float64)
    py = np.asarray(patch_y, dtype=np.float64)
    shape = px.shape[:-1]
    if py.shape[:-1] != shape:
        raise ValueError(f"patch shapes {px.shape} and {py.shape} do not match")
    b = shape[0]
    px = px.reshape(b, -1, px.shape[-1])
    py = py.reshape(b, -1, py.shape[-1])
    alpha = np.abs(_affinity(px) - _affinity(py)).mean(axis=2)
    lo = alpha.min(axis=1, keepdims=True)
    span = alpha.max(axis=1, keepdims=True) - lo
    # spans at rounding level carry no structure; scaling them up would invent a prior
    alpha = np.divide(alpha - lo, span, out=np.zeros_like(alpha), where=span > _SPAN_FLOOR)
    alpha = alpha.reshape(shape)
    return AffinityPrior(alpha, 1.0 - alpha)


def affinity_prior(patch_x: np.ndarray, patch_y: np.ndarray) -> AffinityPrior:
    """Change prior over the n pixels of one patch pair.

    Patches are (n, channels) or (h, w, channels) arrays of co-located pixels.
    """
    px = np.asarray(patch_x, dtype=np.float64)
    py = np.asarray(patch_y, dtype=np.float64)
    if px.shape[:-1] != py.shape[:-1]:
        raise ValueError(f"patches hold {px.shape[:-1]} and {py.shape[:-1]} pixels")
    out = affinity_priors(px[None], py[None])
    return AffinityPrior(out.alpha[0], out.pi[0])


# -------------------------------------------------------------------- losses


def _mse(a, b):
    d = a - b
    return float(np.mean(d * d)), 2.0 * d / d.size


class _Grads:
    def __init__(self, model: CaeModel):
        self.model = model
        self.acc = {id(n): [np.zeros_like(p) for p in n.params] for n in model.nets}

    def back(self, net: Network, trace, g):
        pg, gin = net.backward(trace, g)
        for a, b in zip(self.acc[id(net)], pg):
            a += b
        return gin

    def flat(self):
        return [g for n in self.model.nets for g in self.acc[id(n)]]


def cae_losses(model: CaeModel, x: np.ndarray, y: np.ndarray, prior_pi: np.ndarray, pi: np.ndarray, with_grads: bool = True):
    """Loss terms for a batch of NHWC patches.

    `prior_pi` is the fixed input-space no-change weight (1 - alpha) used by the
    code loss; `pi` is the current translation weight. Both are (B, h, w).
    Returns (LossTerms, flat gradient list or None).
    """
    cfg = model.config
    ex, dx, ey, dy = model.nets
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[:3] != y.shape[:3] or prior_pi.shape != x.shape[:3] or pi.shape != x.shape[:3]:
        raise ValueError("patch batches and weights must share (B, h, w)")
    if x.shape[-1] != model.c1 or y.shape[-1] != model.c2:
        raise ValueError("patch channels do not match the model")
    c1, c2 = model.c1, model.c2

    t_ex = ex.forward(x)
    t_ey = ey.forward(y)
    zx, zy = t_ex.output, t_ey.output
    t_xrec = dx.forward(zx)
    t_yrec = dy.forward(zy)
    t_xhat = dx.forward(zy)
    t_yhat = dy.forward(zx)
    x_hat, y_hat = t_xhat.output, t_yhat.output
    # full cycles x -> y_hat -> x_cyc and y -> x_hat -> y_cyc
    t_ey_c = ey.forward(y_hat)
    t_xcyc = dx.forward(t_ey_c.output)
    t_ex_c = ex.forward(x_hat)
    t_ycyc = dy.forward(t_ex_c.output)

    rx, g_xrec = _mse(t_xrec.output, x)
    ry, g_yrec = _mse(t_yrec.output, y)
    l_rec = rx + ry

    k = zx.shape[-1]
    dz = zx - zy
    norm_code = k * prior_pi.sum() + _EPS
    l_code = float((prior_pi * (dz * dz).sum(-1)).sum() / norm_code)
    g_code = 2.0 * prior_pi[..., None] * dz / norm_code

    cx, g_xcyc = _mse(t_xcyc.output, x)
    cy, g_ycyc = _mse(t_ycyc.output, y)
    l_cyc = cx + cy

    ex_d = x_hat - x
    ey_d = y_hat - y
    norm_tr = pi.sum() + _EPS
    l_tr = float((pi * ((ex_d * ex_d).sum(-1) / c1 + (ey_d * ey_d).sum(-1) / c2)).sum() / norm_tr)
    g_xhat_tr = 2.0 * pi[..., None] * ex_d / (c1 * norm_tr)
    g_yhat_tr = 2.0 * pi[..., None] * ey_d / (c2 * norm_tr)

    total = cfg.w_rec * l_rec + cfg.w_code * l_code + cfg.w_cyc * l_cyc + cfg.w_tr * l_tr
    terms = LossTerms(l_rec, l_code, l_cyc, l_tr, total)
    if not np.isfinite(total):
        raise FloatingPointError("non-finite CAE loss")
    if not with_grads:
        return terms, None

    g = _Grads(model)
    # cycle paths first: they feed gradients into the translations
    g_yhat = cfg.w_tr * g_yhat_tr + g.back(ey, t_ey_c, g.back(dx, t_xcyc, cfg.w_cyc * g_xcyc))
    g_xhat = cfg.w_tr * g_xhat_tr + g.back(ex, t_ex_c, g.back(dy, t_ycyc, cfg.w_cyc * g_ycyc))
    g_zx = g.back(dx, t_xrec, cfg.w_rec * g_xrec) + g.back(dy, t_yhat, g_yhat) + cfg.w_code * g_code
    g_zy = g.back(dy, t_yrec, cfg.w_rec * g_yrec) + g.back(dx, t_xhat, g_xhat) - cfg.w_code * g_code
    g.back(ex, t_ex, g_zx)
    g.back(ey, t_ey, g_zy)
    return terms, g.flat()


# ----------------------------------------------------------------- training


def _as_array(r) -> np.ndarray:
    return np.asarray(r.data if isinstance(r, Raster) else r, dtype=np.float64)


def translation_weight(x, y, x_hat, y_hat) -> np.ndarray:
    """No-change weight from translation residuals of the original images."""
    c1, c2 = x.shape[-1], y.shape[-1]
    err = ((x - x_hat) ** 2).sum(-1) / c1 + ((y - y_hat) ** 2).sum(-1) / c2
    lo, hi = err.min(), err.max()
    scaled = (err - lo) / (hi - lo) if hi > lo else np.zeros_like(err)
    return 1.0 - scaled


def train_cae(x, y, cfg: CaeConfig = CaeConfig(), progress: Optional[callable] = None) -> CaeModel:
    """Train a CAE on normalized rasters `x` (pre-event) and `y` (post-event)."""
    xa, ya = _as_array(x), _as_array(y)
    if xa.shape[:2] != ya.shape[:2]:
        raise ValueError("rasters must share height and width")
    h, w = xa.shape[:2]
    ps = cfg.patch_size
    if h < ps or w < ps:
        raise ValueError(f"raster {h}x{w} is smaller than patch_size {ps}")
    model = build_cae(xa.shape[2], ya.shape[2], cfg)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    adam = AdamState.fresh(model.flat_params(), lr=cfg.learning_rate)
    prior_cache: dict[tuple[int, int], np.ndarray] = {}
    pi_map: Optional[np.ndarray] = None

    for epoch in range(1, cfg.epochs + 1):
        sums = np.zeros(5)
        for _ in range(cfg.batches_per_epoch):
            rows = rng.integers(0, h - ps + 1, size=cfg.patches_per_batch)
            cols = rng.integers(0, w - ps + 1, size=cfg.patches_per_batch)
            xb = np.stack([xa[r : r + ps, c : c + ps] for r, c in zip(rows, cols)])
            yb = np.stack([ya[r : r + ps, c : c + ps] for r, c in zip(rows, cols)])
            keys = [(int(r), int(c)) for r, c in zip(rows, cols)]
            fresh = [i for i, k in enumerate(keys) if k not in prior_cache]
            if fresh:
                new = affinity_priors(xb[fresh], yb[fresh]).pi
                for i, p in zip(fresh, new):
                    prior_cache[keys[i]] = p
            prior_pi = np.stack([prior_cache[k] for k in keys])
            if pi_map is None:
                pi = prior_pi
            else:
                pi = np.stack([pi_map[r : r + ps, c : c + ps] for r, c in zip(rows, cols)])
            terms, grads = cae_losses(model, xb, yb, prior_pi, pi)
            adam_update_(model.flat_params(), grads, adam)
            sums += (terms.rec, terms.code, terms.cyc, terms.tr, terms.total)
        means = sums / cfg.batches_per_epoch
        model.history.append(EpochRecord(epoch, *map(float, means), cfg.batches_per_epoch))
        log.info("cae epoch %d: total %.5f (rec %.5f code %.5f cyc %.5f tr %.5f)", epoch, means[4], *means[:4])
        if progress is not None:
            progress(model.history[-1])
        x_hat = _tiled(model, (model.encoder_y, model.decoder_x), ya)
        y_hat = _tiled(model, (model.encoder_x, model.decoder_y), xa)
        pi_map = translation_weight(xa, ya, x_hat, y_hat)
    return model


# --------------------------------------------------------------- inference


@dataclass(frozen=True)
class TranslationResult:
    x_hat: Raster
    y_hat: Raster
    d_x: Raster
    d_y: Raster


def _tiled(model: CaeModel, chain, img: np.ndarray) -> np.ndarray:
    """Apply a chain of conv nets tile by tile.

    Each tile is padded with a halo as wide as the total number of conv
    layers, so the cropped result equals a whole-image pass.
    """
    halo = sum(len(n.specs) for n in chain)
    h, w = img.shape[:2]
    t = model.config.tile_size
    out = np.empty((h, w, chain[-1].out_width))
    for r0 in range(0, h, t):
        for c0 in range(0, w, t):
            r1, c1 = min(r0 + t, h), min(c0 + t, w)
            a0, b0 = max(r0 - halo, 0), max(c0 - halo, 0)
            a1, b1 = min(r1 + halo, h), min(c1 + halo, w)
            a = img[None, a0:a1, b0:b1, :]
            for net in chain:
                a = net(a)
            out[r0:r1, c0:c1] = a[0, r0 - a0 : r1 - a0, c0 - b0 : c1 - b0]
    return out


def translate(model: CaeModel, x: Raster, y: Raster) -> TranslationResult:
    xa, ya = _as_array(x), _as_array(y)
    if xa.shape[-1] != model.c1 or ya.shape[-1] != model.c2:
        raise ValueError(
            f"model expects {model.c1}/{model.c2} channels, got {xa.shape[-1]}/{ya.shape[-1]}"
        )
    x_hat = _tiled(model, (model.encoder_y, model.decoder_x), ya)
    y_hat = _tiled(model, (model.encoder_x, model.decoder_y), xa)
    xn = x.names if isinstance(x, Raster) else None
    yn = y.names if isinstance(y, Raster) else None
    return TranslationResult(
        x_hat=Raster.from_array(x_hat, xn),
        y_hat=Raster.from_array(y_hat, yn),
        d_x=Raster.from_array(x_hat - xa, xn),
        d_y=Raster.from_array(ya - y_hat, yn),
    )


# ----------------------------------------------------------- change map


def otsu_threshold(values: np.ndarray, bins: int = 256) -> Optional[float]:
    """Bin edge maximising between-class variance, or None for constant input."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return None
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)[:-1].astype(float)
    s0 = np.cumsum(hist * centers)[:-1]
    total, stotal = hist.sum(), (hist * centers).sum()
    w1 = total - w0
    with np.errstate(invalid="ignore", divide="ignore"):
        between = w0 * w1 * (s0 / w0 - (stotal - s0) / w1) ** 2
    between = np.nan_to_num(between, nan=-1.0)
    # empty bins form plateaus of equal variance; take the leftmost edge of the best one
    best = between.max()
    k = int(np.flatnonzero(between >= best - 1e-12 * abs(best))[0])
    return float(edges[1 + k])


def _standardize(d: np.ndarray) -> np.ndarray:
    flat = d.reshape(-1, d.shape[-1])
    mu = flat.mean(axis=0)
    sd = flat.std(axis=0)
    out = np.zeros_like(d)
    live = sd > 0
    out[..., live] = (d[..., live] - mu[live]) / sd[live]
    return out


def change_score(result: TranslationResult) -> np.ndarray:
    z = np.concatenate([_standardize(_as_array(result.d_x)), _standardize(_as_array(result.d_y))], axis=-1)
    return (z * z).mean(axis=-1)


def cae_change_map(result: TranslationResult) -> tuple[np.ndarray, np.ndarray]:
    """Unsupervised change map: Otsu threshold on standardized difference magnitude.

    Returns (binary uint8 map, float score map).
    """
    score = change_score(result)
    thr = otsu_threshold(score)
    if thr is None:
        return np.zeros(score.shape, dtype=np.uint8), score
    return (score >= thr).astype(np.uint8), score


# -------------------------------------------------------------------- I/O


def save_cae(model: CaeModel, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, net in zip(NET_NAMES, model.nets):
        save_checkpoint(directory / f"{name}.nnk", net, role=name, updates=model.n_updates)
    meta = {
        "config": asdict(model.config),
        "c1": model.c1,
        "c2": model.c2,
        "history": [asdict(r) for r in model.history],
    }
    (directory / "cae.json").write_text(json.dumps(meta, indent=2) + "\n")
    write_history_csv(model, directory / "history.csv")
    return directory


def load_cae(directory) -> CaeModel:
    directory = Path(directory)
    meta = json.loads((directory / "cae.json").read_text())
    nets = [load_checkpoint(directory / f"{name}.nnk")[0] for name in NET_NAMES]
    return CaeModel(*nets, config=CaeConfig(**meta["config"]), history=[EpochRecord(**r) for r in meta["history"]])


def write_history_csv(model: CaeModel, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "L_rec", "L_code", "L_cyc", "L_tr", "total"])
        for r in model.history:
            wr.writerow([r.epoch, f"{r.rec:.10g}", f"{r.code:.10g}", f"{r.cyc:.10g}", f"{r.tr:.10g}", f"{r.total:.10g}"])


_TRANSLATION_PARTS = ("x_hat", "y_hat", "d_x", "d_y")


def save_translation(result: TranslationResult, directory) -> Path:
    """Write the four planes as f32le band-sequential rasters with a JSON index.

    The index uses the same band spec as bundle manifests, so reloaded planes
    are float32.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {part: write_raster(getattr(result, part), directory / f"{part}.f32") for part in _TRANSLATION_PARTS}
    (directory / "translation.json").write_text(json.dumps(index, indent=2) + "\n")
    return directory


def load_translation(directory) -> TranslationResult:
    directory = Path(directory)
    meta_path = directory / "translation.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no translation.json in {directory}")
    index = json.loads(meta_path.read_text())
    missing = [p for p in _TRANSLATION_PARTS if p not in index]
    if missing:
        raise ValueError(f"translation.json lacks {missing}")
    planes = {part: read_raster(directory, index[part]) for part in _TRANSLATION_PARTS}
    return TranslationResult(**planes)
