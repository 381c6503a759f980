"""Metric-matching refinement of reconstructed samples.

Minimizes, per sample,

    w_mu * sum_c |mean_c(x) - mean_c*| + w_sigma * sum_c |var_c(x) - var_c*|
        + w_tv * sum_c |TV_c(x) - TV_c*|

by projected gradient descent with step halving.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ldprecon import core
from ldprecon._validation import check_images
from ldprecon.exceptions import ShapeError


@dataclass(frozen=True)
class ObjectiveWeights:
    w_mu: float = 1e6
    w_sigma: float = 2e4
    w_tv: float = 1e-6
    lr: float = 1e-6
    rounds: int = 1000

    def __post_init__(self):
        if min(self.w_mu, self.w_sigma, self.w_tv) < 0:
            raise ValueError("objective weights must be non-negative")
        if self.rounds < 0 or self.lr < 0:
            raise ValueError("rounds and lr must be non-negative")


def _check_targets(x, target_metrics):
    t = np.asarray(target_metrics, dtype=np.float64)
    if t.shape != x.shape[:2] + (3,):
        raise ShapeError(f"target metrics {t.shape} do not match images {x.shape}")
    return t


def _per_sample_objective(x, t, weights):
    stats = core.batch_channel_stats(x)
    w = np.array([weights.w_mu, weights.w_sigma, weights.w_tv])
    return (np.abs(stats - t) * w).sum(axis=(1, 2))


def objective(x_hat, target_metrics, weights=ObjectiveWeights()):
    """Objective of one C x H x W image or the per-sample values of a batch."""
    x = np.asarray(x_hat, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
        target_metrics = np.asarray(target_metrics)[None]
    t = _check_targets(x, target_metrics)
    vals = _per_sample_objective(x, t, weights)
    return float(vals[0]) if single else vals


def objective_grad(x_hat, target_metrics, weights=ObjectiveWeights()):
    """Analytic (sub)gradient; the sign subgradient is 0 at ties."""
    x = np.asarray(x_hat, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
        target_metrics = np.asarray(target_metrics)[None]
    t = _check_targets(x, target_metrics)
    n = x.shape[2] * x.shape[3]
    stats = core.batch_channel_stats(x)
    s = np.sign(stats - t)
    mean = stats[..., 0][..., None, None]

    grad = (weights.w_mu * s[..., 0] / n)[..., None, None] * np.ones_like(x)
    grad += (weights.w_sigma * s[..., 1])[..., None, None] * 2.0 * (x - mean) / n

    dh = np.sign(np.diff(x, axis=3))
    dv = np.sign(np.diff(x, axis=2))
    g_tv = np.zeros_like(x)
    g_tv[..., :, 1:] += dh
    g_tv[..., :, :-1] -= dh
    g_tv[..., 1:, :] += dv
    g_tv[..., :-1, :] -= dv
    grad += (weights.w_tv * s[..., 2])[..., None, None] * g_tv
    return grad[0] if single else grad


def descend(x_hat, target_metrics, weights=ObjectiveWeights(), max_halvings=10,
            return_history=False):
    """Projected gradient descent on a B x C x H x W batch (or one image).

    Each round tries ``lr``, halving it for samples whose objective would
    increase; a sample whose step still fails after ``max_halvings`` keeps
    its value and stops.  Pixels are clamped to [0, 1] before the first
    and after each step.
    """
    x = np.array(x_hat, dtype=np.float64, copy=True)
    single = x.ndim == 3
    if single:
        x = x[None]
        target_metrics = np.asarray(target_metrics)[None]
    t = _check_targets(x, target_metrics)
    np.clip(x, 0.0, 1.0, out=x)
    f = _per_sample_objective(x, t, weights)
    history = [f.copy()]
    active = np.ones(x.shape[0], dtype=bool)
    for _ in range(weights.rounds):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        grad = objective_grad(x[idx], t[idx], weights)
        step = np.full(idx.size, weights.lr)
        pending = np.arange(idx.size)
        for _ in range(max_halvings + 1):
            trial = np.clip(x[idx[pending]] - step[pending, None, None, None] * grad[pending], 0.0, 1.0)
            f_trial = _per_sample_objective(trial, t[idx[pending]], weights)
            ok = f_trial <= f[idx[pending]]
            x[idx[pending[ok]]] = trial[ok]
            f[idx[pending[ok]]] = f_trial[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            step[pending] *= 0.5
        active[idx[pending]] = False
        history.append(f.copy())
    out = x[0] if single else x
    if return_history:
        return out, np.array(history)
    return out


class MetricDescent(BaseEstimator, TransformerMixin):
    """Refine reconstructed images toward recovered per-channel metrics.

    ``fit(X, y)`` stores ``y`` (shape B x C x 3) as the target metrics;
    ``transform(X)`` runs :func:`descend` on the images ``X``.
    """

    def __init__(self, w_mu=1e6, w_sigma=2e4, w_tv=1e-6, lr=1e-6, rounds=1000, max_halvings=10):
        self.w_mu = w_mu
        self.w_sigma = w_sigma
        self.w_tv = w_tv
        self.lr = lr
        self.rounds = rounds
        self.max_halvings = max_halvings

    def _weights(self):
        return ObjectiveWeights(self.w_mu, self.w_sigma, self.w_tv, self.lr, self.rounds)

    def fit(self, X, y):
        X = check_images(X, "X")
        self.target_metrics_ = _check_targets(X, y).copy()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "target_metrics_")
        X = check_images(X, "X")
        x, hist = descend(X, self.target_metrics_, self._weights(), self.max_halvings,
                          return_history=True)
        self.objective_history_ = hist
        return x

    def score(self, X, y=None):
        """Negative mean objective of ``X`` against the fitted targets."""
        check_is_fitted(self, "target_metrics_")
        return -float(np.mean(objective(check_images(X, "X"), self.target_metrics_, self._weights())))
