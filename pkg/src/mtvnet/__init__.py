"""Multi-context volumetric super-resolution with carrier-token hierarchical
attention: model, training/evaluation pipeline, attribution and scaling
analysis, plus scikit-learn style estimators."""

from .config import (ConfigError, LevelSpec, ModelConfig, TrainConfig,
                     derive_token_counts, load_config, preset, save_config)
from .estimator import TrilinearUpscaler, VolumeSuperResolver
from .evaluator import (MetricsReport, TrilinearPredictor, ModelPredictor,
                        evaluate, nrmse, psnr, reconstruct, ssim)
from .network import MtvnetModel, load_params, save_params
from .trainer import TrainState, init_train_state, train
from .volumes import (NestedPatch, Volume, degrade, foreground_mask,
                      make_synthetic_corpus, read_volume, sample_nested,
                      write_volume)

__all__ = [
    "ConfigError", "LevelSpec", "ModelConfig", "TrainConfig",
    "derive_token_counts", "load_config", "preset", "save_config",
    "TrilinearUpscaler", "VolumeSuperResolver",
    "MetricsReport", "TrilinearPredictor", "ModelPredictor", "evaluate",
    "nrmse", "psnr", "reconstruct", "ssim",
    "MtvnetModel", "load_params", "save_params",
    "TrainState", "init_train_state", "train",
    "NestedPatch", "Volume", "degrade", "foreground_mask",
    "make_synthetic_corpus", "read_volume", "sample_nested", "write_volume",
]

__version__ = "0.1.0"
