"""Streaming observation normalization with a scikit-learn transformer API."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted


class RunningNorm(TransformerMixin, BaseEstimator):
    """Per-feature running mean and variance, merged batch by batch.

    ``partial_fit`` folds a new batch into the statistics with the parallel
    (Chan et al.) update, so the result equals a two-pass computation over
    everything seen so far. ``transform`` standardizes and clips.
    """

    def __init__(self, clip=10.0, epsilon=1e-8):
        self.clip = clip
        self.epsilon = epsilon

    def _reset(self, n_features):
        self.count_ = 0
        self.mean_ = np.zeros(n_features)
        self.var_ = np.zeros(n_features)
        self.n_features_in_ = n_features

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self._reset(X.shape[1])
        return self.partial_fit(X)

    def partial_fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if not hasattr(self, "count_"):
            self._reset(X.shape[1])
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        n_b = X.shape[0]
        if n_b == 0:
            return self
        mean_b = X.mean(axis=0)
        m2_b = ((X - mean_b) ** 2).sum(axis=0)
        n_a = self.count_
        total = n_a + n_b
        delta = mean_b - self.mean_
        m2 = self.var_ * n_a + m2_b + delta ** 2 * (n_a * n_b / total)
        self.mean_ = self.mean_ + delta * (n_b / total)
        self.var_ = np.maximum(m2 / total, 0.0)
        self.count_ = total
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=np.float64)
        z = (X - self.mean_) / np.sqrt(self.var_ + self.epsilon)
        return np.clip(z, -self.clip, self.clip)

    def state_arrays(self):
        check_is_fitted(self, "mean_")
        return np.array([float(self.count_)]), self.mean_.copy(), self.var_.copy()

    @classmethod
    def from_state(cls, count, mean, var, clip=10.0, epsilon=1e-8):
        norm = cls(clip=clip, epsilon=epsilon)
        norm._reset(len(mean))
        norm.count_ = count
        norm.mean_ = np.array(mean, dtype=np.float64)
        norm.var_ = np.array(var, dtype=np.float64)
        return norm


class ReturnScaler:
    """Scales rewards by the running std of the discounted return, per environment."""

    def __init__(self, n_envs, gamma, clip=10.0, epsilon=1e-8):
        self.gamma = gamma
        self.clip = clip
        self.epsilon = epsilon
        self.returns = np.zeros(n_envs)
        self.norm = RunningNorm()
        self.norm._reset(1)

    def __call__(self, rewards, dones):
        self.returns = self.returns * self.gamma + rewards
        self.norm.partial_fit(self.returns[:, None])
        scaled = np.clip(rewards / np.sqrt(self.norm.var_[0] + self.epsilon), -self.clip, self.clip)
        self.returns[np.asarray(dones, dtype=bool)] = 0.0
        return scaled

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.norm.var_[0] + self.epsilon))
