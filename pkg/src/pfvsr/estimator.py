"""A fit/predict facade over the training loop.

Follows the scikit-learn estimator conventions (constructor stores
hyperparameters verbatim, ``get_params``/``set_params``, ``fit`` returns
``self``, learned state lives in trailing-underscore attributes) without
depending on scikit-learn itself. Defaults are sized for a desk CPU run,
not for the reference protocol.

Clips cross this boundary channels-last: ``(frames, H, W, 3)`` in [0, 1].
Internally everything is channels-first.
"""
from __future__ import annotations

import inspect

import numpy as np

from . import checkpoint
from .generator import Model, ModelConfig
from .scheduler import VideoSequence, run_model
from .tensor import Tensor
from .training import (ArraySource, DegradeConfig, LossConfig, SyntheticSource,
                       TrainConfig, bicubic_psnr, evaluate_psnr, train)


def check_clip(clip, name="clip"):
    """Validate one channels-last HR/LR clip; returns it channels-first."""
    arr = np.asarray(clip, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"{name} must be (frames, H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} values must lie in [0, 1], got "
                         f"[{arr.min():.4g}, {arr.max():.4g}]")
    return np.clip(arr, 0.0, 1.0).transpose(0, 3, 1, 2)


def check_clip_list(X, name="X"):
    if isinstance(X, np.ndarray):
        if X.ndim == 4:
            return [check_clip(X, name)]
        if X.ndim == 5:
            return [check_clip(c, f"{name}[{i}]") for i, c in enumerate(X)]
        raise ValueError(f"{name} must be a clip or a list of clips, got array {X.shape}")
    clips = list(X)
    if not clips:
        raise ValueError(f"{name} is empty")
    return [check_clip(c, f"{name}[{i}]") for i, c in enumerate(clips)]


class VideoSuperResolver:
    """Trainable multi-frame upscaler with a scikit-learn style interface."""

    def __init__(self, framework="govsr", blocks_precursor=1, blocks_successor=1,
                 filters=16, scale=4, alpha=0.01, iterations=400, batch_size=4,
                 patch_size=32, clip_frames=3, seed=0, dtype="float32",
                 residual_base="auto", eval_clips=2):
        self.framework = framework
        self.blocks_precursor = blocks_precursor
        self.blocks_successor = blocks_successor
        self.filters = filters
        self.scale = scale
        self.alpha = alpha
        self.iterations = iterations
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.clip_frames = clip_frames
        self.seed = seed
        self.dtype = dtype
        self.residual_base = residual_base
        self.eval_clips = eval_clips

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values() if p.name != "self"]

    def get_params(self, deep=True):
        return {n: getattr(self, n) for n in self._param_names()}

    def set_params(self, **params):
        valid = self._param_names()
        for key, val in params.items():
            if key not in valid:
                raise ValueError(f"unknown parameter {key!r}; valid: {sorted(valid)}")
            setattr(self, key, val)
        return self

    # -- learning ----------------------------------------------------------

    def _config(self):
        return ModelConfig(framework=self.framework,
                           blocks_precursor=self.blocks_precursor,
                           blocks_successor=self.blocks_successor,
                           filters=self.filters, scale=self.scale,
                           residual_base=self.residual_base)

    def _degrade(self):
        return DegradeConfig(scale=self.scale)

    def fit(self, X=None, y=None):
        """Train from scratch; X is a list of HR clips or None for synthetic data."""
        config = self._config()
        if X is None:
            source = SyntheticSource(self.seed)
        else:
            source = ArraySource(check_clip_list(X), self.seed, self.scale)
        tcfg = TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                           patch_size=self.patch_size, clip_frames=self.clip_frames,
                           seed=self.seed, dtype=self.dtype,
                           eval_clips=self.eval_clips, degrade=self._degrade())
        model = Model(config, seed=self.seed, dtype=np.dtype(self.dtype))
        result = train(model, source, tcfg, LossConfig(alpha=self.alpha))
        self.model_ = model
        self.train_log_ = result.rows
        self.n_iter_ = result.iterations
        self.eval_psnr_ = result.final_eval_psnr
        self.bicubic_psnr_ = result.bicubic_psnr
        return self

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this VideoSuperResolver is not fitted yet; "
                               "call fit() or load() first")

    def predict(self, X):
        """Upscale LR clips; returns channels-last clips clipped to [0, 1]."""
        self._require_fitted()
        out = []
        for clip in check_clip_list(X):
            seq = VideoSequence([Tensor(f[None].astype(self.model_.dtype))
                                 for f in clip])
            result = run_model(self.model_, seq)
            sr = np.stack([t.data[0].transpose(1, 2, 0) for t in result.sr])
            out.append(np.clip(sr.astype(np.float64), 0.0, 1.0))
        return out

    def score(self, X, y=None):
        """Mean PSNR gain (dB) over bicubic upscaling on degraded HR clips."""
        self._require_fitted()
        clips = check_clip_list(X)
        own = evaluate_psnr(self.model_, clips, self._degrade())
        return own - bicubic_psnr(clips, self._degrade())

    # -- persistence ---------------------------------------------------------

    def save(self, path):
        self._require_fitted()
        checkpoint.save_model(self.model_, path)
        return path

    @classmethod
    def load(cls, path, dtype="float32"):
        model = checkpoint.load_model(path, dtype=np.dtype(dtype))
        cfg = model.config
        est = cls(framework=cfg.framework, blocks_precursor=cfg.blocks_precursor,
                  blocks_successor=cfg.blocks_successor, filters=cfg.filters,
                  scale=cfg.scale, dtype=dtype, residual_base=cfg.residual_base)
        est.model_ = model
        est.train_log_ = []
        est.n_iter_ = 0
        return est
