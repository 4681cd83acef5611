"""Binary attack classifiers over gradient tables."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestClassifier

from .gradset import GradDataset, impute_mean

FAMILIES = ("logistic", "forest")


@dataclass
class AttackModel:
    family: str
    seed: int
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def score(self, features) -> np.ndarray:
        """Probability of the positive class, one value in [0, 1] per row."""
        X = np.asarray(features, dtype=np.float64)
        if np.isnan(X).any():
            raise ValueError("impute masked entries before scoring")
        if self.family == "logistic":
            Z = (X - self.params["mean"]) / self.params["scale"]
            return _sigmoid(Z @ self.params["w"] + self.params["b"])
        return self.params["forest"].predict_proba(X)[:, 1]


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def fit_logistic(X, y, epochs: int = 300, lr: float = 0.5, l2: float = 1e-3):
    """Full-batch gradient descent on the L2-regularised log loss of z-scored features."""
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Z = (X - mean) / scale
    n, d = Z.shape
    w = np.zeros(d)
    b = 0.0
    t = y.astype(np.float64)
    # a step of lr / (1 + ||z||^2 / 4) keeps the problem well conditioned at high width
    step = lr / (1.0 + np.mean(np.sum(Z * Z, axis=1)) / 4.0)
    for _ in range(epochs):
        p = _sigmoid(Z @ w + b)
        r = p - t
        w -= step * (Z.T @ r / n + l2 * w)
        b -= step * r.mean()
    return {"mean": mean, "scale": scale, "w": w, "b": b}


def train_attack_model(data: GradDataset, family: str = "logistic", seed: int = 0,
                       epochs: int = 300, trees: int = 100) -> AttackModel:
    """Fit an attack classifier; masked entries are mean-imputed first."""
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    y = data.labels
    if len(np.unique(y)) < 2:
        raise ValueError("attack training data holds a single class")
    X = impute_mean(data).features
    if family == "logistic":
        params = fit_logistic(X, y, epochs=epochs)
        return AttackModel(family, seed, params, {"epochs": epochs})
    forest = RandomForestClassifier(n_estimators=trees, random_state=seed, n_jobs=1)
    forest.fit(X, y)
    return AttackModel(family, seed, {"forest": forest}, {"trees": trees})


def trainer(family: str, seed: int = 0, **kw):
    """A one-argument training callable, as ``tune_vmw`` expects."""
    return lambda data: train_attack_model(data, family, seed, **kw)
