"""scikit-learn style imputers. Missing cells are NaN on input and filled on output."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import baselines, core
from .dataio import fit_minmax
from .validation import categorical_mask, check_missing_matrix, infer_class_counts

log = logging.getLogger(__name__)


class _ScaledImputer(TransformerMixin, BaseEstimator):
    """Shared plumbing: validation, masked min-max scaling and the inverse map."""

    def _validate_fit(self, X):
        X, observed = check_missing_matrix(X)
        discrete = categorical_mask(self.categorical_features, X.shape[1])
        self.n_classes_ = infer_class_counts(X, observed, discrete, self.n_classes)
        self.scaler_ = fit_minmax(np.nan_to_num(X), observed, discrete)
        self.n_features_in_ = X.shape[1]
        return X, observed

    def _validate_transform(self, X):
        check_is_fitted(self, "scaler_")
        X, observed = check_missing_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        infer_class_counts(X, observed, self.n_classes_ > 0, self.n_classes_)
        return self.scaler_.transform(np.nan_to_num(X)), observed

    def _restore(self, filled, observed, X):
        out = self.scaler_.inverse_transform(filled)
        return np.where(observed, X, out)


class M3Imputer(_ScaledImputer):
    """Graph-based imputer that learns from the table's own missingness pattern.

    Parameters
    ----------
    variant : {"m3", "init_only", "init_fcu", "init_scu", "m3_uniform"}
        Model variant. ``"m3"`` is the full model.
    dim, layers : int
        Embedding width and encoder depth.
    peer_count : int
        Peers per sample in the sample correlation unit.
    epsilon : float
        Weight given to unobserved features when building sample embeddings.
    epochs, lr, edge_keep : training schedule.
    categorical_features : array-like of int or bool, optional
        Columns holding non-negative integer class codes.
    n_classes : array-like of int, optional
        Class counts per column; inferred from the data when omitted.
    random_state : int

    Attributes
    ----------
    params_ : M3Params
    loss_curve_ : list of float
    """

    def __init__(self, variant="m3", dim=128, layers=3, peer_count=5, epsilon=1e-4,
                 epochs=5000, lr=1e-3, edge_keep=0.5, categorical_features=None,
                 n_classes=None, random_state=0):
        self.variant = variant
        self.dim = dim
        self.layers = layers
        self.peer_count = peer_count
        self.epsilon = epsilon
        self.epochs = epochs
        self.lr = lr
        self.edge_keep = edge_keep
        self.categorical_features = categorical_features
        self.n_classes = n_classes
        self.random_state = random_state

    def _configs(self):
        model = core.with_variant(
            core.ModelConfig(dim=self.dim, layers=self.layers, peer_count=self.peer_count,
                             epsilon=self.epsilon),
            self.variant,
        )
        return model, core.TrainConfig(epochs=self.epochs, lr=self.lr, edge_keep=self.edge_keep)

    def fit(self, X, y=None):
        X, observed = self._validate_fit(X)
        model, train = self._configs()
        scaled = self.scaler_.transform(np.nan_to_num(X))
        result = core.fit(scaled, observed, self.n_classes_, model, train,
                          seed=self.random_state)
        self.params_ = result.params
        self.loss_curve_ = result.losses
        self.train_seconds_ = result.train_seconds
        log.info("trained %d epochs in %.1fs", train.epochs, result.train_seconds)
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        scaled, observed = self._validate_transform(X)
        filled = core.predict_matrix(self.params_, scaled, observed, seed=self.random_state)
        return self._restore(filled, observed, np.asarray(X, dtype=np.float64))


class MeanImputer(_ScaledImputer):
    """Column mean for continuous columns, most frequent code for categorical ones.

    Means and modes are learned in :meth:`fit` and reused by :meth:`transform`.
    """

    def __init__(self, categorical_features=None, n_classes=None):
        self.categorical_features = categorical_features
        self.n_classes = n_classes

    def fit(self, X, y=None):
        X, observed = self._validate_fit(X)
        scaled = self.scaler_.transform(np.nan_to_num(X))
        self.fill_values_ = baselines.column_fill(scaled, observed, self.n_classes_)
        return self

    def transform(self, X):
        check_is_fitted(self, "fill_values_")
        scaled, observed = self._validate_transform(X)
        filled = np.where(observed, scaled, self.fill_values_)
        return self._restore(filled, observed, np.asarray(X, dtype=np.float64))


class KNNImputer(_ScaledImputer):
    """Distance-weighted nearest-neighbour imputer.

    Donors are drawn from the matrix being transformed, so ``fit`` only
    learns the scaling and class counts.
    """

    def __init__(self, n_neighbors=5, categorical_features=None, n_classes=None):
        self.n_neighbors = n_neighbors
        self.categorical_features = categorical_features
        self.n_classes = n_classes

    def fit(self, X, y=None):
        self._validate_fit(X)
        return self

    def transform(self, X):
        scaled, observed = self._validate_transform(X)
        filled = baselines.knn_impute(scaled, observed, self.n_neighbors, self.n_classes_).values
        return self._restore(filled, observed, np.asarray(X, dtype=np.float64))
