"""Scikit-learn style estimators wrapping training and tiled inference.

`VolumeSuperResolver.fit` takes HR volumes (their LR counterparts are
generated by the degradation pipeline) and `predict` super-resolves LR
volumes; `TrilinearUpscaler` is the training-free baseline.  Both follow the
BaseEstimator contract (`get_params`/`set_params`, clonable, fitted
attributes carry a trailing underscore).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from dataclasses import replace as replace_dataclass

from . import config as config_mod
from .config import scaled_milestones
from .evaluator import ModelPredictor, TrilinearPredictor, evaluate, reconstruct
from .trainer import init_train_state, train
from .volumes import Volume, degrade


def check_volume_array(x, name: str = "X") -> np.ndarray:
    """Coerce to a float32 (C, H, W, D) array of [0, 1] intensities."""
    arr = np.asarray(x, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name}: expected a 3-D or (C, H, W, D) array, "
                         f"got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1 + 1e-6:
        raise ValueError(f"{name}: intensities must lie in [0, 1]; "
                         "normalize first (see volumes.normalize_intensities)")
    return arr


def _as_volume_list(x, name: str) -> list[Volume]:
    if isinstance(x, Volume):
        return [x]
    if isinstance(x, np.ndarray) and x.ndim in (3, 4):
        return [Volume(check_volume_array(x, name))]
    out = []
    for i, item in enumerate(x):
        if isinstance(item, Volume):
            out.append(item)
        else:
            out.append(Volume(check_volume_array(item, f"{name}[{i}]"),
                              name=f"{name.lower()}_{i}"))
    return out


class TrilinearUpscaler(BaseEstimator):
    """Training-free baseline: tiled cell-centered trilinear upsampling."""

    def __init__(self, scale: int = 2, tile_edge: int = 16):
        self.scale = scale
        self.tile_edge = tile_edge

    def fit(self, X=None, y=None):
        self.predictor_ = TrilinearPredictor(self.scale, self.tile_edge)
        return self

    def predict(self, X):
        if not hasattr(self, "predictor_"):
            self.fit()
        single = isinstance(X, (Volume, np.ndarray))
        volumes = _as_volume_list(X, "X")
        out = [reconstruct(v, self.predictor_).data for v in volumes]
        return out[0] if single else out


class VolumeSuperResolver(BaseEstimator):
    """Multi-context volumetric SR model with an estimator interface.

    Parameters mirror the preset config; any left as None keep the preset
    value.  `fit(X)` trains on HR volumes, degrading them internally at the
    configured scale; `predict(X)` super-resolves LR volumes by tiled
    reconstruction; `score(X, y)` is the mean slice-filtered PSNR in dB.
    """

    def __init__(self, preset: str = "desk", scale: int | None = None,
                 steps: int | None = None, batch_size: int | None = None,
                 lr: float | None = None, seed: int = 0, blur: bool = True,
                 pad: bool = True):
        self.preset = preset
        self.scale = scale
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.blur = blur
        self.pad = pad

    def _resolve_configs(self):
        model_cfg, train_cfg = config_mod.preset(self.preset)
        model_updates = {}
        if self.scale is not None:
            model_updates["scale"] = self.scale
        if model_updates:
            model_cfg = replace_dataclass(model_cfg, **model_updates)
        train_updates = {"seed": self.seed}
        if self.steps is not None:
            train_updates["total_iters"] = self.steps
            train_updates["milestones"] = scaled_milestones(self.steps)
        if self.batch_size is not None:
            train_updates["batch_size"] = self.batch_size
        if self.lr is not None:
            train_updates["lr"] = self.lr
        train_cfg = replace_dataclass(train_cfg, **train_updates)
        return model_cfg, train_cfg

    def fit(self, X, y=None):
        model_cfg, train_cfg = self._resolve_configs()
        hr_volumes = _as_volume_list(X, "X")
        pairs = [(degrade(v, model_cfg.scale, blur=self.blur), v) for v in hr_volumes]
        state = init_train_state(model_cfg, train_cfg)
        train(state, pairs, steps=train_cfg.total_iters, pad=self.pad)
        self.config_ = model_cfg
        self.train_config_ = train_cfg
        self.model_ = state.model
        self.loss_trace_ = list(state.trace)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this VolumeSuperResolver is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        predictor = ModelPredictor(self.model_)
        single = isinstance(X, (Volume, np.ndarray))
        volumes = _as_volume_list(X, "X")
        out = [reconstruct(v, predictor, pad=self.pad).data for v in volumes]
        return out[0] if single else out

    def score(self, X, y):
        """Mean slice-filtered PSNR (dB) of predictions against HR truth."""
        self._check_fitted()
        lr_volumes = _as_volume_list(X, "X")
        hr_volumes = _as_volume_list(y, "y")
        if len(lr_volumes) != len(hr_volumes):
            raise ValueError(f"X and y lengths differ: {len(lr_volumes)} vs "
                             f"{len(hr_volumes)}")
        report = evaluate(list(zip(lr_volumes, hr_volumes)),
                          ModelPredictor(self.model_), pad=self.pad)
        return report.psnr
