"""Command-line front end: one subcommand per pipeline stage.

Every subcommand accepts `--config FILE` (TOML, or a previous run.json)
and explicit flags; flags win over the file, and the file wins over the
built-in defaults. Top-level TOML keys apply to every subcommand and a
table named after the subcommand overrides them. All outputs go under
`--out`, which always receives a `run.json` with the resolved settings.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .cae import CaeConfig, cae_change_map, load_cae, load_translation, save_cae, save_translation, train_cae, translate
from .evaluation import (
    DEFAULT_GRID,
    RegionSpec,
    confusion_map,
    f1,
    plot_curves,
    region_rates,
    run_ablation,
    write_metrics_csv,
    write_png,
    write_report_csv,
)
from .evaluation.ablation import METRICS_HEADER
from .occ import METHODS, FeatureVariant, MlpConfig, fit_occ, load_occ, save_occ, stack_features
from .raster import (
    LabeledSet,
    Raster,
    load_bundle,
    normalize_raster,
    read_mask,
    sample_positive_set,
    write_bundle,
    write_mask,
    write_raster,
)
from .synth import SynthConfig, generate_synthetic_pair

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("hetcd")

VARIANTS = tuple(v.value for v in FeatureVariant)


class UsageError(Exception):
    """Bad flags or config values; maps to exit code 2."""


# -------------------------------------------------------------- settings

# name -> (type, default). None as default means "required".
_CAE_KEYS = {f.name: (type(f.default), f.default) for f in fields(CaeConfig) if f.name != "seed"}
_SYNTH_KEYS = {f.name: (type(f.default), f.default) for f in fields(SynthConfig) if f.name != "seed"}
_MLP_KEYS = {"max_epochs": (int, MlpConfig.max_epochs)}

SETTINGS: dict[str, dict[str, tuple[type, Any]]] = {
    "synth": {"seed": (int, 0), **_SYNTH_KEYS},
    "train-cae": {"bundle": (str, None), "seed": (int, 0), **_CAE_KEYS},
    "translate": {"bundle": (str, None), "cae": (str, None)},
    "cae-map": {"bundle": (str, None), "translation": (str, None)},
    "features": {"bundle": (str, None), "translation": (str, None), "variant": (str, "full")},
    "train-occ": {
        "bundle": (str, None),
        "translation": (str, None),
        "labels": (str, ""),
        "npos": (int, 500),
        "variant": (str, "full"),
        "method": (str, "two-step"),
        "seed": (int, 0),
        "threshold": (float, 0.5),
        **_MLP_KEYS,
    },
    "predict": {"bundle": (str, None), "translation": (str, None), "model": (str, None), "threshold": (float, -1.0)},
    "eval": {"bundle": (str, None), "prediction": (str, None)},
    "ablate": {
        "bundle": (str, None),
        "translation": (str, None),
        "grid": (str, ",".join(map(str, DEFAULT_GRID))),
        "reps": (int, 10),
        "seed": (int, 0),
        "jobs": (int, 1),
        **_MLP_KEYS,
    },
}

PATH_KEYS = ("bundle", "translation", "cae", "model", "prediction", "labels")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text to stderr, then exit 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetcd", description="Targeted change detection for heterogeneous raster pairs.")
    parser.add_argument("--version", action="version", version=f"hetcd {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    helps = {
        "synth": "write a synthetic bundle with weak target changes and strong confounders",
        "train-cae": "train code-aligned autoencoders on a bundle",
        "translate": "translate both images and write difference images",
        "cae-map": "unsupervised Otsu change map from a translation",
        "features": "write the stacked per-pixel feature matrix",
        "train-occ": "train a one-class model from labelled positives",
        "predict": "apply a one-class model",
        "eval": "score a prediction against the bundle ground truth",
        "ablate": "F1 over label budgets, repetitions and ablation variants",
    }
    for name, keys in SETTINGS.items():
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", help="TOML file or a previous run.json")
        p.add_argument("--out", help="output directory (required)")
        for key, (typ, _) in keys.items():
            kw: dict[str, Any] = {"dest": key, "default": None, "type": typ}
            if key == "variant":
                kw["choices"] = VARIANTS
            elif key == "method":
                kw["choices"] = METHODS
            elif key == "grid":
                kw["help"] = "comma-separated npos values"
            p.add_argument(_flag(key), **kw)
    return parser


def _read_config(path: str, command: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        if p.suffix == ".json":
            raw = json.loads(p.read_text())
            if raw.get("command") not in (None, command):
                raise UsageError(f"{path} records a {raw['command']!r} run, not {command!r}")
            return dict(raw.get("config", raw))
        raw = tomllib.loads(p.read_text())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    tables = {k for k, v in raw.items() if isinstance(v, dict)}
    merged = {k: v for k, v in raw.items() if k not in tables}
    merged.update(raw.get(command, {}))
    return merged


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one validated settings dict."""
    keys = SETTINGS[command]
    file_cfg = _read_config(args.config, command) if args.config else {}
    file_cfg.pop("out", None)
    unknown = sorted(set(file_cfg) - set(keys))
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
    out: dict[str, Any] = {}
    for key, (typ, default) in keys.items():
        flag = getattr(args, key)
        value = flag if flag is not None else file_cfg.get(key, default)
        if value is None:
            raise UsageError(f"{command} needs {_flag(key)}")
        try:
            out[key] = typ(value)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {value!r}") from exc
    if not args.out:
        raise UsageError(f"{command} needs --out")
    _validate(command, out)
    for key in PATH_KEYS:
        if out.get(key):
            out[key] = str(Path(out[key]).resolve())
    return out


def _validate(command: str, cfg: dict) -> None:
    if "variant" in cfg and cfg["variant"] not in VARIANTS:
        raise UsageError(f"variant must be one of {VARIANTS}")
    if "method" in cfg and cfg["method"] not in METHODS:
        raise UsageError(f"method must be one of {METHODS}")
    t = cfg.get("threshold")
    if t is not None and not (command == "predict" and t == -1.0) and not 0.0 <= t < 1.0:
        raise UsageError("threshold must lie in [0, 1)")
    if "npos" in cfg and cfg["npos"] < 1:
        raise UsageError("npos must be at least 1")
    if command == "ablate":
        cfg["grid"] = ",".join(str(n) for n in parse_grid(cfg["grid"]))
        if cfg["reps"] < 1 or cfg["jobs"] < 1:
            raise UsageError("reps and jobs must be positive")
    for key in PATH_KEYS:
        if cfg.get(key) and not Path(cfg[key]).exists():
            raise UsageError(f"{key} path does not exist: {cfg[key]}")


def parse_grid(text: str) -> list[int]:
    try:
        grid = [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --grid {text!r}") from exc
    if not grid or min(grid) < 1:
        raise UsageError("grid needs positive integers")
    return sorted(set(grid))


# ------------------------------------------------------------- helpers


def _manifest(path: str) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def _inputs(cfg: dict):
    bundle = load_bundle(_manifest(cfg["bundle"]))
    return bundle, normalize_raster(bundle.t1), normalize_raster(bundle.t2)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _need_gt(bundle):
    if bundle.ground_truth is None:
        raise ValueError(f"bundle {bundle.name!r} has no ground truth")
    return bundle.ground_truth


# ------------------------------------------------------------ commands


def cmd_synth(cfg: dict, out: Path) -> dict:
    sc = SynthConfig(seed=cfg["seed"], **{k: cfg[k] for k in _SYNTH_KEYS})
    write_bundle(generate_synthetic_pair(sc), out)
    return {"seeds": {"synth": sc.seed}}


def cmd_train_cae(cfg: dict, out: Path) -> dict:
    _, x, y = _inputs(cfg)
    cc = CaeConfig(seed=cfg["seed"], **{k: cfg[k] for k in _CAE_KEYS})
    model = train_cae(x, y, cc, progress=lambda r: log.info("epoch %d total %.5f", r.epoch, r.total))
    save_cae(model, out)
    return {"seeds": {"cae": cc.seed}, "final_total_loss": model.history[-1].total}


def cmd_translate(cfg: dict, out: Path) -> dict:
    _, x, y = _inputs(cfg)
    save_translation(translate(load_cae(cfg["cae"]), x, y), out)
    return {}


def cmd_cae_map(cfg: dict, out: Path) -> dict:
    bundle = load_bundle(_manifest(cfg["bundle"]))
    binary, score = cae_change_map(load_translation(cfg["translation"]))
    write_mask(binary, out / "cae_map.u8")
    write_raster(Raster.from_array(score[..., None], ["score"]), out / "cae_score.f32")
    write_png(binary * 255, out / "cae_map.png")
    extra = {"changed_fraction": float(binary.mean())}
    if bundle.ground_truth is not None:
        rec = f1(binary, bundle.ground_truth)
        _write_metrics(out / "metrics.csv", "cae-otsu", "", 0, rec)
        write_png(confusion_map(binary, bundle.ground_truth), out / "confusion.png")
        extra["f1"] = rec.f1
    return extra


def cmd_features(cfg: dict, out: Path) -> dict:
    _, x, y = _inputs(cfg)
    fs = stack_features(x, y, load_translation(cfg["translation"]), FeatureVariant(cfg["variant"]))
    np.save(out / "features.npy", fs.vectors, allow_pickle=False)
    layout = {k: [s.start, s.stop] for k, s in fs.slices().items()}
    _write_json(out / "features.json", {"height": fs.height, "width": fs.width, "dim": fs.dim, "columns": layout})
    return {"dim": fs.dim}


def _positives(cfg: dict, bundle) -> LabeledSet:
    if cfg["labels"]:
        pool = read_mask(cfg["labels"], (bundle.height, bundle.width))
    else:
        pool = _need_gt(bundle)
    return sample_positive_set(pool, cfg["npos"], cfg["seed"])


def cmd_train_occ(cfg: dict, out: Path) -> dict:
    bundle, x, y = _inputs(cfg)
    fs = stack_features(x, y, load_translation(cfg["translation"]), FeatureVariant(cfg["variant"]))
    p = _positives(cfg, bundle)
    model = fit_occ(
        fs, p, cfg["method"], cfg["seed"], cfg["threshold"], MlpConfig(max_epochs=cfg["max_epochs"])
    )
    save_occ(model, out)
    return {
        "seeds": {"positives": cfg["seed"], "training": cfg["seed"]},
        "n_reliable_negatives": model.n_reliable_negatives,
    }


def cmd_predict(cfg: dict, out: Path) -> dict:
    _, x, y = _inputs(cfg)
    model = load_occ(cfg["model"])
    fs = stack_features(x, y, load_translation(cfg["translation"]), model.variant)
    t = model.threshold if cfg["threshold"] == -1.0 else cfg["threshold"]
    cmap = model.predict(fs, t)
    binary = cmap.binary
    write_mask(binary, out / "change_map.u8")
    np.save(out / "votes.npy", cmap.votes, allow_pickle=False)
    write_png(binary * 255, out / "change_map.png")
    meta = {
        "method": model.method,
        "variant": model.variant.value,
        "npos": len(model.positives),
        "threshold": t,
        "height": int(binary.shape[0]),
        "width": int(binary.shape[1]),
    }
    _write_json(out / "prediction.json", meta)
    return {"threshold_used": t, "changed_fraction": float(binary.mean())}


def _write_metrics(path: Path, method: str, variant: str, npos: int, rec) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_HEADER)
        wr.writerow([method, variant, npos, 0, f"{rec.f1:.6f}", rec.tp, rec.fp, rec.fn, rec.tn])


def cmd_eval(cfg: dict, out: Path) -> dict:
    bundle = load_bundle(_manifest(cfg["bundle"]))
    gt = _need_gt(bundle)
    pred_path = Path(cfg["prediction"])
    meta = {"method": "", "variant": "", "npos": 0}
    if pred_path.is_dir():
        if (pred_path / "prediction.json").is_file():
            meta.update(json.loads((pred_path / "prediction.json").read_text()))
        pred_path = pred_path / "change_map.u8"
    pred = read_mask(pred_path, gt.shape)
    rec = f1(pred, gt)
    _write_metrics(out / "metrics.csv", meta["method"], meta["variant"], meta["npos"], rec)
    write_png(confusion_map(pred, gt), out / "confusion.png")
    if bundle.region_masks:
        specs = [
            RegionSpec(name, mask, "expect_positive" if name == "target" else "expect_negative")
            for name, mask in sorted(bundle.region_masks.items())
            if mask.any()
        ]
        with open(out / "region_rates.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["region", "polarity", "pixels", "positive_rate", "negative_rate"])
            for r in region_rates(pred, specs):
                wr.writerow([r.name, r.polarity, r.pixels, f"{r.positive_rate:.6f}", f"{r.negative_rate:.6f}"])
    return {"f1": rec.f1, "undefined": rec.undefined}


def cmd_ablate(cfg: dict, out: Path) -> dict:
    bundle = load_bundle(_manifest(cfg["bundle"]))
    report = run_ablation(
        bundle,
        load_translation(cfg["translation"]),
        npos_grid=parse_grid(cfg["grid"]),
        reps=cfg["reps"],
        master_seed=cfg["seed"],
        jobs=cfg["jobs"],
        mlp=MlpConfig(max_epochs=cfg["max_epochs"]),
    )
    write_metrics_csv(report.records, out / "metrics.csv")
    write_report_csv(report, out / "report.csv")
    write_report_csv(report, out / "curves.csv")
    plot_curves(report, out / "curves.png", title=bundle.name)
    return {"seeds": {"master": cfg["seed"], "repetitions": report.seeds}}


COMMANDS: dict[str, Callable[[dict, Path], dict]] = {
    "synth": cmd_synth,
    "train-cae": cmd_train_cae,
    "translate": cmd_translate,
    "cae-map": cmd_cae_map,
    "features": cmd_features,
    "train-occ": cmd_train_occ,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args.command, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](cfg, out)
    except (ValueError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"hetcd {args.command}: {exc}", file=sys.stderr)
        return 1
    _write_json(out / "run.json", {"command": args.command, "version": __version__, "config": cfg, **extra})
    return 0


if __name__ == "__main__":
    sys.exit(main())
