"""Trained one-class models as a unit: fitting by method name, prediction and on-disk bundles.

A model bundle directory holds
    manifest.json       method, variant, dims, seeds, threshold, file list
    gmm.json, gmm.bin   step-1 priors/ridges and float64 means + covariances
    member_{i}.nnk      the five ensemble checkpoints (two-step only)
    isvm.json           weights of the linear SVM (isvm only)
    positives.i64       labelled positive pixel indices
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..nnkit import load_checkpoint, save_checkpoint
from ..raster import LabeledSet
from .features import FeatureStack, FeatureVariant
from .isvm import IsvmResult, LinearSvm, fit_isvm
from .step1 import GmmModel, fit_step1, predict_step1
from .step2 import ChangeMap, MlpConfig, MlpEnsemble, fit_step2, predict

METHODS = ("two-step", "step1", "isvm")


@dataclass
class OccModel:
    method: str
    variant: FeatureVariant
    c1: int
    c2: int
    dim: int
    seed: int
    threshold: float
    positives: LabeledSet
    gmm: GmmModel
    n_reliable_negatives: int
    ensemble: Optional[MlpEnsemble] = None
    svm: Optional[LinearSvm] = None
    isvm_iterations: Optional[int] = None

    def predict(self, features: FeatureStack, t: Optional[float] = None) -> ChangeMap:
        t = self.threshold if t is None else t
        if features.dim != self.dim:
            raise ValueError(f"features have {features.dim} dims, model expects {self.dim}")
        if self.method == "two-step":
            return predict(self.ensemble, features, t)
        if self.method == "step1":
            binary = predict_step1(self.gmm, features)
        else:
            binary = self.svm.predict(features.vectors)
        return ChangeMap(binary.reshape(features.height, features.width).astype(float), t)


def fit_occ(
    features: FeatureStack,
    positives: LabeledSet,
    method: str = "two-step",
    seed: int = 0,
    threshold: float = 0.5,
    mlp: MlpConfig = MlpConfig(),
    step1=None,
) -> OccModel:
    """Fit step 1 (or reuse `step1`) and then the requested second step."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    s1 = step1 if step1 is not None else fit_step1(features, positives)
    model = OccModel(
        method,
        features.variant,
        features.c1,
        features.c2,
        features.dim,
        seed,
        threshold,
        positives,
        s1.model,
        len(s1.reliable_negatives),
    )
    if method == "two-step":
        model.ensemble = fit_step2(features, positives, s1.reliable_negatives, seed, mlp)
    elif method == "isvm":
        res: IsvmResult = fit_isvm(features, positives, s1.reliable_negatives, seed)
        model.svm = res.model
        model.isvm_iterations = res.iterations
    return model


def save_occ(model: OccModel, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    g = model.gmm
    (d / "gmm.bin").write_bytes(
        np.ascontiguousarray(g.means, "<f8").tobytes() + np.ascontiguousarray(g.covs, "<f8").tobytes()
    )
    (d / "gmm.json").write_text(
        json.dumps({"dim": g.dim, "priors": g.priors.tolist(), "ridge": g.ridge.tolist(), "payload": "gmm.bin"}, indent=2)
    )
    (d / "positives.i64").write_bytes(np.asarray(model.positives.positive_indices, "<i8").tobytes())
    files = ["gmm.json", "gmm.bin", "positives.i64"]
    if model.ensemble is not None:
        for i, net in enumerate(model.ensemble.members):
            name = f"member_{i}.nnk"
            save_checkpoint(d / name, net, member=i, epochs=len(model.ensemble.loss_curves[i]) if model.ensemble.loss_curves else None)
            files.append(name)
    if model.svm is not None:
        s = model.svm
        (d / "isvm.json").write_text(
            json.dumps(
                {"w": s.w.tolist(), "b": s.b, "lam": s.lam, "mean": s.mean.tolist(), "scale": s.scale.tolist(), "iterations": model.isvm_iterations},
                indent=2,
            )
        )
        files.append("isvm.json")
    manifest = {
        "method": model.method,
        "variant": model.variant.value,
        "c1": model.c1,
        "c2": model.c2,
        "dim": model.dim,
        "seed": model.seed,
        "threshold": model.threshold,
        "npos": len(model.positives),
        "universe_size": model.positives.universe_size,
        "n_reliable_negatives": model.n_reliable_negatives,
        "mlp": model.ensemble.config.__dict__ if model.ensemble is not None else None,
        "files": files,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return d


def load_occ(directory) -> OccModel:
    d = Path(directory)
    man = json.loads((d / "manifest.json").read_text())
    gj = json.loads((d / "gmm.json").read_text())
    k = gj["dim"]
    raw = np.frombuffer((d / "gmm.bin").read_bytes(), "<f8")
    means = raw[: 2 * k].reshape(2, k).copy()
    covs = raw[2 * k :].reshape(2, k, k).copy()
    gmm = GmmModel(np.array(gj["priors"]), means, covs, np.array(gj["ridge"]))
    pos = np.frombuffer((d / "positives.i64").read_bytes(), "<i8").copy()
    model = OccModel(
        man["method"],
        FeatureVariant(man["variant"]),
        man["c1"],
        man["c2"],
        man["dim"],
        man["seed"],
        man["threshold"],
        LabeledSet(pos, man["universe_size"]),
        gmm,
        man["n_reliable_negatives"],
    )
    if man["method"] == "two-step":
        members = [load_checkpoint(d / f"member_{i}.nnk")[0] for i in range(5)]
        model.ensemble = MlpEnsemble(members, man["seed"], MlpConfig(**(man.get("mlp") or {})))
    if man["method"] == "isvm":
        s = json.loads((d / "isvm.json").read_text())
        model.svm = LinearSvm(np.array(s["w"]), s["b"], s["lam"], np.array(s["mean"]), np.array(s["scale"]))
        model.isvm_iterations = s["iterations"]
    return model
