"""scikit-learn style front end for the regional attention regressor."""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .model import EncoderConfig, ModelConfig, PsoNet, load_model, save_model
from .pasi import REGIONS
from .training import TrainConfig, fit, predict_arrays
from .validation import VisitArrays, check_targets, check_visits


class PsoNetRegressor(RegressorMixin, BaseEstimator):
    """Regional PASI regressor over per-visit image sets.

    ``X`` is a sequence of :class:`~psonet.data.VisitSample` (or a stacked
    :class:`~psonet.validation.VisitArrays`); ``y`` is an (n, 4) array of
    regional labels in HN, UE, LE, TR order and may be omitted when the
    visits carry labels. :meth:`predict` returns regional scores,
    :meth:`predict_total` the weighted total.

    Defaults are the desk profile (64x64 inputs, random tiny encoder).
    """

    def __init__(
        self,
        base_width=16,
        input_size=(64, 64),
        embed_dim=768,
        attention_dim=128,
        encoder_variant="tiny_conv",
        pretrained_path=None,
        share_encoder=False,
        mode="low_res",
        learning_rate=1e-3,
        weight_decay=1e-4,
        batch_size=4,
        epochs=30,
        target="per_region",
        sampling_threshold=10.0,
        random_state=0,
        out_dir=None,
    ):
        self.base_width = base_width
        self.input_size = input_size
        self.embed_dim = embed_dim
        self.attention_dim = attention_dim
        self.encoder_variant = encoder_variant
        self.pretrained_path = pretrained_path
        self.share_encoder = share_encoder
        self.mode = mode
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.target = target
        self.sampling_threshold = sampling_threshold
        self.random_state = random_state
        self.out_dir = out_dir

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(
                variant=self.encoder_variant,
                base_width=self.base_width,
                input_size=tuple(self.input_size),
                pretrained_path=self.pretrained_path,
            ),
            embed_dim=self.embed_dim,
            attention_dim=self.attention_dim,
            share_encoder=self.share_encoder,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            mode=self.mode,
            seed=self.random_state if self.random_state is not None else 0,
            target=self.target,
            sampling_threshold=self.sampling_threshold,
        )

    def _arrays(self, X, y=None, require_labels=False) -> VisitArrays:
        arrays = check_visits(X, mode=self.mode, input_size=self.input_size, require_labels=require_labels and y is None)
        if y is not None:
            arrays = VisitArrays(arrays.images, arrays.masks, arrays.keys, check_targets(y, len(arrays)))
        return arrays

    def fit(self, X, y=None, eval_set=None, resume=None):
        """Train; ``eval_set`` = (X_val, y_val) or X_val drives best-epoch selection."""
        train = self._arrays(X, y, require_labels=True)
        val = None
        if eval_set is not None:
            Xv, yv = eval_set if isinstance(eval_set, tuple) else (eval_set, None)
            val = self._arrays(Xv, yv, require_labels=True)
        result = fit(train, val, self._train_config(), self._model_config(), out_dir=self.out_dir, resume=resume)
        self.model_ = result.model
        self.history_ = result.log
        self.best_epoch_ = result.state.best_epoch
        self.sampling_weights_ = result.weights
        self.n_features_in_ = len(REGIONS)
        return self

    def predict(self, X) -> np.ndarray:
        """Regional scores, shape (n, 4)."""
        check_is_fitted(self, "model_")
        regional, _ = predict_arrays(self.model_, self._arrays(X))
        return regional

    def predict_total(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        _, total = predict_arrays(self.model_, self._arrays(X))
        return total

    def save(self, path) -> Path:
        check_is_fitted(self, "model_")
        return save_model(path, self.model_, meta={"estimator_params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "PsoNetRegressor":
        model, header, _ = load_model(path)
        params = header.get("meta", {}).get("estimator_params", {})
        est = cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})
        est.input_size = tuple(model.config.encoder.input_size)
        est.model_ = model.eval()
        est.n_features_in_ = len(REGIONS)
        return est

    @classmethod
    def from_model(cls, model: PsoNet, mode: str = "low_res") -> "PsoNetRegressor":
        enc = model.config.encoder
        est = cls(
            base_width=enc.base_width,
            input_size=tuple(enc.input_size),
            embed_dim=model.config.embed_dim,
            attention_dim=model.config.attention_dim,
            share_encoder=model.config.share_encoder,
            mode=mode,
        )
        est.model_ = model.eval()
        est.n_features_in_ = len(REGIONS)
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, Path):
            v = str(v)
        out[k] = v
    return out
