"""scikit-learn style imputers over ``T×N`` arrays with NaN marking missing entries."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.impute import SimpleImputer
from sklearn.utils.validation import check_array, check_is_fitted

from . import data as dt
from . import graphops as go
from .exceptions import ValidationError
from .model import HSPGNNModel, ModelConfig, TrainConfig, split_validation, train


def validate_series(X, n_nodes: int | None = None) -> np.ndarray:
    """2-D float64 copy of ``X``; NaN allowed, infinities rejected."""
    X = check_array(X, dtype=np.float64, ensure_all_finite="allow-nan", copy=True)
    if n_nodes is not None and X.shape[1] != n_nodes:
        raise ValidationError(f"expected {n_nodes} columns, got {X.shape[1]}")
    return X


def split_missing(X) -> tuple:
    """``(values with NaN replaced by 0, mask with 1 at NaN)``."""
    mask = np.isnan(X).astype(np.float64)
    return np.where(mask.astype(bool), 0.0, X), mask


def training_pairs(values, mask, M: int, stride: int | None = None, augment: bool = True, seed: int = 0) -> list:
    """Preprocess (and optionally augment) a standardized series into window pairs.

    Pairs never straddle the seam between augmented copies.
    """
    T = values.shape[0]
    if augment:
        series, masks = dt.augment(values, mask, seed=seed)
    else:
        series, masks = dt.preprocess(values, mask), np.asarray(mask, dtype=np.float64)
    pairs = []
    for start in range(0, series.shape[0], T):
        pairs.extend(dt.make_windows(series[start : start + T], masks[start : start + T], M, stride))
    return pairs


class HSPGNNImputer(TransformerMixin, BaseEstimator):
    """Physics-incorporated graph imputer.

    ``fit`` trains on the observed entries of ``X`` only; ``transform``
    fills NaN entries and returns observed entries unchanged.
    """

    def __init__(
        self,
        adjacency=None,
        M: int = 60,
        K=1,
        k_t: int = 3,
        hidden: int | None = None,
        variant: str = "standard",
        epochs: int = 30,
        batch_size: int = 16,
        learning_rate: float = 0.0005,
        decay: float = 0.92,
        validation_fraction: float = 0.16,
        stride: int | None = None,
        augment: bool = True,
        init: str = "passthrough",
        init_scale: float = 0.01,
        use_mlp: bool = True,
        use_satt: bool = True,
        use_physics: bool = True,
        use_predictor: bool = True,
        pinn_weight: float = 0.0,
        reconstruction_weight: float = 0.0,
        seed: int = 0,
    ):
        self.adjacency = adjacency
        self.M = M
        self.K = K
        self.k_t = k_t
        self.hidden = hidden
        self.variant = variant
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.decay = decay
        self.validation_fraction = validation_fraction
        self.stride = stride
        self.augment = augment
        self.init = init
        self.init_scale = init_scale
        self.use_mlp = use_mlp
        self.use_satt = use_satt
        self.use_physics = use_physics
        self.use_predictor = use_predictor
        self.pinn_weight = pinn_weight
        self.reconstruction_weight = reconstruction_weight
        self.seed = seed

    def _model_config(self, n_nodes: int) -> ModelConfig:
        return ModelConfig(
            n_nodes=n_nodes,
            M=self.M,
            K=self.K,
            k_t=self.k_t,
            hidden=self.hidden,
            variant=self.variant,
            init=self.init,
            init_scale=self.init_scale,
            use_mlp=self.use_mlp,
            use_satt=self.use_satt,
            use_physics=self.use_physics,
            use_predictor=self.use_predictor,
            pinn_weight=self.pinn_weight,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            decay=self.decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            validation_fraction=self.validation_fraction,
            reconstruction_weight=self.reconstruction_weight,
        )

    def fit(self, X, y=None):
        X = validate_series(X)
        values, mask = split_missing(X)
        graph = None if self.adjacency is None else _as_graph(self.adjacency)
        self.scaler_ = dt.Standardizer().fit(values, mask)
        z = self.scaler_.transform(values) * (1.0 - mask)
        pairs = training_pairs(z, mask, self.M, self.stride, self.augment, self.seed)
        cfg = self._train_config()
        train_pairs, val_pairs = split_validation(pairs, cfg.validation_fraction)
        self.model_ = HSPGNNModel(self._model_config(X.shape[1]), graph, seed=self.seed)
        self.report_ = train(train_pairs, self.model_, cfg, val_pairs=val_pairs)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: HSPGNNModel, scaler: dt.Standardizer) -> "HSPGNNImputer":
        """Wrap an already trained model (e.g. loaded from a checkpoint)."""
        c = model.config
        est = cls(
            adjacency=None if model.graph is None else model.graph.adjacency,
            M=c.M,
            K=c.K,
            k_t=c.k_t,
            hidden=c.hidden,
            variant=c.variant,
            use_mlp=c.use_mlp,
            use_satt=c.use_satt,
            use_physics=c.use_physics,
            use_predictor=c.use_predictor,
            pinn_weight=c.pinn_weight,
        )
        est.model_ = model
        est.scaler_ = scaler
        est.n_features_in_ = c.n_nodes
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = validate_series(X, self.n_features_in_)
        values, mask = split_missing(X)
        z = self.scaler_.transform(values) * (1.0 - mask)
        filled = dt.preprocess(z, mask)
        imputed = self.scaler_.inverse_transform(self.model_.impute_series(filled, mask))
        return np.where(mask.astype(bool), imputed, X)


def _as_graph(adjacency) -> go.GraphSpec:
    return adjacency if isinstance(adjacency, go.GraphSpec) else go.GraphSpec(np.asarray(adjacency, dtype=float))


class LinearInterpolationImputer(TransformerMixin, BaseEstimator):
    """Per-node linear interpolation in time with constant edge extension."""

    def fit(self, X, y=None):
        X = validate_series(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = validate_series(X, self.n_features_in_)
        values, mask = split_missing(X)
        return dt.preprocess(values, mask)


def MeanImputer() -> SimpleImputer:
    """Per-node mean of the observed entries."""
    return SimpleImputer(strategy="mean", keep_empty_features=True)
