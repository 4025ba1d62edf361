"""Top-lambda% activation patterns."""

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, ParameterError


def n_active(width, lambda_pct):
    """Number of dims marked active per frame: ``max(1, ceil(lambda * D / 100))``."""
    _check_lambda(lambda_pct)
    # round before ceil so that e.g. 20 * 10 / 100 is not bumped to 3 by float error
    return max(1, math.ceil(round(lambda_pct * width / 100.0, 9)))


def _check_lambda(lambda_pct):
    if not (0 < lambda_pct <= 100) or not math.isfinite(lambda_pct):
        raise ParameterError(f"lambda_pct must be in (0, 100], got {lambda_pct}")


def top_k_bits(acts, k):
    """Mark the ``k`` largest entries of each row; ties go to the lower index.

    Linear in the matrix size: find each row's k-th largest value, keep
    everything strictly above it, then fill the remaining slots with the
    leftmost entries equal to it.
    """
    acts = np.asarray(acts)
    n_rows, width = acts.shape
    if not 1 <= k <= width:
        raise ParameterError(f"k={k} outside [1, {width}]")
    if k == width:
        return np.ones((n_rows, width), dtype=np.uint8)
    kth = np.partition(acts, width - k, axis=1)[:, width - k][:, None]
    above = acts > kth
    at = acts == kth
    need = k - above.sum(axis=1, keepdims=True)
    take = at & (np.cumsum(at, axis=1) <= need)
    return (above | take).astype(np.uint8)


@dataclass(frozen=True)
class ActivationPattern:
    layer_index: int
    bits: np.ndarray
    lambda_pct: float

    @property
    def k_active(self):
        return n_active(self.bits.shape[1], self.lambda_pct)


def binarize_layer(acts, lambda_pct=1.0):
    """Binarize one layer. ``acts`` is a ``LayerActivations`` or a ``(T, D)`` array."""
    layer_index = getattr(acts, "layer_index", 0)
    data = np.asarray(getattr(acts, "data", acts))
    if data.ndim != 2 or data.shape[1] < 1:
        raise DataError(f"layer {layer_index}: expected a (T, D) matrix, got {data.shape}")
    if not np.all(np.isfinite(data)):
        raise DataError(f"layer {layer_index}: non-finite activations")
    k = n_active(data.shape[1], lambda_pct)
    return ActivationPattern(layer_index, top_k_bits(data, k), float(lambda_pct))


class TopPercentBinarizer(TransformerMixin, BaseEstimator):
    """Stateless transformer form of :func:`binarize_layer`.

    ``fit`` only records the width so that ``transform`` can refuse
    matrices of a different width.
    """

    def __init__(self, lambda_pct=1.0):
        self.lambda_pct = lambda_pct

    def fit(self, X, y=None):
        X = np.asarray(X)
        _check_lambda(self.lambda_pct)
        self.n_features_in_ = X.shape[1]
        self.k_active_ = n_active(X.shape[1], self.lambda_pct)
        return self

    def transform(self, X):
        check_is_fitted(self, "k_active_")
        X = np.asarray(X)
        if X.shape[1] != self.n_features_in_:
            raise DataError(f"width {X.shape[1]} != fitted width {self.n_features_in_}")
        return binarize_layer(X, self.lambda_pct).bits
