"""Two-step one-class classification on stacked translation features."""

from .features import FeatureStack, FeatureVariant, feature_dim, stack_features
from .isvm import IsvmResult, LinearSvm, fit_isvm, iterate_svm, train_linear_svm
from .model import METHODS, OccModel, fit_occ, load_occ, save_occ
from .step1 import EmState, GmmModel, Step1Result, fit_step1, predict_step1
from .step2 import LAYOUTS, ChangeMap, MlpConfig, MlpEnsemble, fit_step2, predict

__all__ = [
    "ChangeMap",
    "EmState",
    "FeatureStack",
    "FeatureVariant",
    "GmmModel",
    "IsvmResult",
    "LAYOUTS",
    "LinearSvm",
    "METHODS",
    "MlpConfig",
    "MlpEnsemble",
    "OccModel",
    "Step1Result",
    "feature_dim",
    "fit_isvm",
    "fit_occ",
    "fit_step1",
    "fit_step2",
    "iterate_svm",
    "load_occ",
    "predict",
    "predict_step1",
    "save_occ",
    "stack_features",
    "train_linear_svm",
]
