"""L2-regularized logistic regression trained by full-batch gradient descent.

Labels are 1 for an edge error and 0 for a correct edge. Features are
standardized with statistics taken from the training rows only.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import expit, log_expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .preprocess import FeatureConfig, FeatureVector

logger = logging.getLogger(__name__)

STD_EPS = 1e-12
MODEL_FORMAT = "edgejudge-logreg/1"


class DegenerateLabels(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, eps: float = STD_EPS) -> "StandardizationStats":
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # constant columns pass through unscaled
        scale = np.where(std < eps, 1.0, std)
        return cls(mean, scale)

    @classmethod
    def identity(cls, n_features: int) -> "StandardizationStats":
        return cls(np.zeros(n_features), np.ones(n_features))

    def apply(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale


def loss_and_gradient(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float):
    """Mean logistic loss plus ``lam/2 * |w|^2`` and its gradient.

    Returns ``(loss, (grad_w, grad_b))``; the bias is not penalized.
    """
    z = X @ w + b
    # log(1 + e^z) - y z, written stably
    loss = np.mean(-log_expit(z) + (1.0 - y) * z) + 0.5 * lam * np.dot(w, w)
    r = (expit(z) - y) / len(y)
    return loss, (X.T @ r + lam * w, float(r.sum()))


def gradient_descent(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    learning_rate: float = 0.1,
    tol: float = 1e-6,
    max_iter: int = 5000,
):
    """Minimize :func:`loss_and_gradient` from ``w = 0, b = 0``.

    A step is accepted only if it satisfies the Armijo condition; otherwise
    the step size is halved and the step retried. After an accepted step the
    step size may grow back by 25% (never beyond ``learning_rate * 1e3``).
    Stops when the gradient's infinity norm drops below ``tol``.

    Returns ``(w, b, n_iter, loss_curve, converged)``.
    """
    w = np.zeros(X.shape[1])
    b = 0.0
    lr = learning_rate
    loss, (gw, gb) = loss_and_gradient(w, b, X, y, lam)
    losses = [loss]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
        if gnorm < tol:
            converged = True
            n_iter -= 1
            break
        gsq = np.dot(gw, gw) + gb * gb
        while True:
            w_new, b_new = w - lr * gw, b - lr * gb
            new_loss, (ngw, ngb) = loss_and_gradient(w_new, b_new, X, y, lam)
            if new_loss <= loss - 1e-4 * lr * gsq:
                break
            lr *= 0.5
            if lr < 1e-20:
                logger.warning("line search stalled at iteration %d", n_iter)
                return w, b, n_iter, np.array(losses), False
        w, b, loss, gw, gb = w_new, b_new, new_loss, ngw, ngb
        losses.append(loss)
        lr = min(lr * 1.25, learning_rate * 1e3)
    else:
        gnorm = max(np.max(np.abs(gw), initial=0.0), abs(gb))
        converged = gnorm < tol
    return w, b, n_iter, np.array(losses), converged


class EdgeLogisticRegression(ClassifierMixin, BaseEstimator):
    """Binary edge-error classifier with sklearn's estimator interface.

    Parameters
    ----------
    l2 : float
        Ridge strength on the (standardized) weights.
    learning_rate : float
        Initial gradient-descent step size; backtracking shrinks it as needed.
    tol : float
        Stop when the gradient's infinity norm is below this value.
    max_iter : int
    standardize : bool
        Fit per-feature mean/std on the training rows. With ``False`` the raw
        features are used.
    feature_config : FeatureConfig or str, optional
        Feature recipe the model is trained on; checked by
        :func:`predict_sample`.
    random_state : int, optional
        Recorded with the model; training itself is deterministic.
    """

    def __init__(
        self,
        l2=1.0,
        learning_rate=0.1,
        tol=1e-6,
        max_iter=5000,
        standardize=True,
        feature_config=None,
        random_state=None,
    ):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.tol = tol
        self.max_iter = max_iter
        self.standardize = standardize
        self.feature_config = feature_config
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if not np.isin(y, (0, 1)).all():
            raise ValueError("labels must be 0 (correct edge) or 1 (edge error)")
        if len(np.unique(y)) < 2:
            raise DegenerateLabels("degenerate training labels: need both classes")
        y = y.astype(np.float64)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        if self.standardize:
            self.stats_ = StandardizationStats.fit(X)
        else:
            self.stats_ = StandardizationStats.identity(X.shape[1])
        Z = self.stats_.apply(X)
        w, b, n_iter, losses, converged = gradient_descent(
            Z, y, self.l2, self.learning_rate, self.tol, self.max_iter
        )
        if not converged:
            logger.info("gradient descent stopped after %d iterations without reaching tol", n_iter)
        self.coef_ = w
        self.intercept_ = b
        self.n_iter_ = n_iter
        self.loss_curve_ = losses
        self.converged_ = converged
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise LayoutMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.stats_.apply(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        # ties at p = 0.5 go to the edge-error class
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def predict_sample(model: EdgeLogisticRegression, x: FeatureVector) -> tuple[float, int]:
    """Probability of an edge error and the 0/1 judgment for one sample."""
    if model.feature_config is not None:
        expected = FeatureConfig.parse(model.feature_config) if isinstance(model.feature_config, str) else model.feature_config
        if x.config != expected:
            raise LayoutMismatch(f"model trained on {expected.cli_name}, got {x.config.cli_name}")
    p = float(model.predict_proba(x.values[None, :])[0, 1])
    return p, int(p >= 0.5)


def _config_name(cfg) -> Optional[str]:
    if cfg is None:
        return None
    return cfg.cli_name if isinstance(cfg, FeatureConfig) else FeatureConfig.parse(cfg).cli_name


def model_to_dict(model: EdgeLogisticRegression) -> dict:
    check_is_fitted(model, "coef_")
    return {
        "format": MODEL_FORMAT,
        "config": _config_name(model.feature_config),
        "hyperparams": {
            "l2": model.l2,
            "learning_rate": model.learning_rate,
            "tol": model.tol,
            "max_iter": model.max_iter,
            "standardize": model.standardize,
            "seed": model.random_state,
        },
        "n_iter": model.n_iter_,
        "converged": model.converged_,
        "stats": {"mean": model.stats_.mean.tolist(), "scale": model.stats_.scale.tolist()},
        "intercept": model.intercept_,
        "weights": model.coef_.tolist(),
    }


def model_from_dict(d: dict) -> EdgeLogisticRegression:
    if d.get("format") != MODEL_FORMAT:
        raise ValueError(f"unsupported model format {d.get('format')!r}")
    hp = d["hyperparams"]
    model = EdgeLogisticRegression(
        l2=hp["l2"],
        learning_rate=hp["learning_rate"],
        tol=hp["tol"],
        max_iter=hp["max_iter"],
        standardize=hp["standardize"],
        feature_config=d["config"],
        random_state=hp["seed"],
    )
    model.coef_ = np.asarray(d["weights"], dtype=float)
    model.intercept_ = float(d["intercept"])
    model.stats_ = StandardizationStats(np.asarray(d["stats"]["mean"], float), np.asarray(d["stats"]["scale"], float))
    if not (len(model.coef_) == len(model.stats_.mean) == len(model.stats_.scale)):
        raise ValueError("weight and statistics lengths disagree")
    if not np.all(np.isfinite(model.coef_)):
        raise ValueError("non-finite weights")
    model.n_features_in_ = len(model.coef_)
    model.classes_ = np.array([0, 1])
    model.n_iter_ = d.get("n_iter", 0)
    model.converged_ = d.get("converged", True)
    model.loss_curve_ = np.array([])
    return model


def dumps_model(model: EdgeLogisticRegression) -> str:
    return json.dumps(model_to_dict(model), indent=1) + "\n"


def loads_model(text: str) -> EdgeLogisticRegression:
    return model_from_dict(json.loads(text))


def save_model(model: EdgeLogisticRegression, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def load_model(path) -> EdgeLogisticRegression:
    return loads_model(Path(path).read_text(encoding="utf-8"))
