"""Evaluation metrics: latent label separation (AUROC), NLL under a prior, DP gap, accuracy.

Also holds the small downstream MLP classifier used by the fairness runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import autodiff as ad
from .networks import Mlp, MlpSpec
from .priors import AnalyticPrior
from .trainer import Adam

C_GRID = (0.1, 1.0, 10.0, 100.0)
GAMMA_GRID = (1.0, 0.1, 0.01, 0.001)


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUROC with average ranks for ties."""
    labels = np.asarray(labels)
    pos = labels == 1
    n1 = int(pos.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes")
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def _binarize(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) != 2:
        raise ValueError(f"labels must be binary, found classes {classes.tolist()}")
    return (labels == classes[1]).astype(np.int64)


def stratified_folds(labels: np.ndarray, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    folds: list[list[int]] = [[] for _ in range(k)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            folds[j % k].append(int(i))
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


@dataclass
class SeparationResult:
    auroc: float
    fold_scores: list[float]
    best_c: float
    best_gamma: float
    grid: dict = field(default_factory=dict)


def auroc_separation(latents: np.ndarray, labels: np.ndarray, cv_folds: int = 5, seed: int = 0,
                     c_grid=C_GRID, gamma_grid=GAMMA_GRID) -> SeparationResult:
    """Best mean held-out AUROC of an RBF kernel-ridge classifier over a (C, gamma) grid.

    Targets are +-1, regularization is ``1 / C``; the decision value is the
    ridge prediction. Latents are standardized with training-fold statistics.
    One eigendecomposition per (fold, gamma) serves every C.
    """
    z = np.asarray(latents, dtype=np.float64)
    y = _binarize(labels)
    if np.min(np.bincount(y)) < 2:
        raise ValueError("need at least two samples per class")
    k = min(cv_folds, int(np.min(np.bincount(y))))
    folds = stratified_folds(y, k, np.random.default_rng(seed))
    scores = {(c, g): [] for c in c_grid for g in gamma_grid}
    for test in folds:
        train = np.setdiff1d(np.arange(len(y)), test)
        mu, sd = z[train].mean(axis=0), z[train].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        ztr, zte = (z[train] - mu) / sd, (z[test] - mu) / sd
        t = 2.0 * y[train] - 1.0
        d_tr = cdist(ztr, ztr, "sqeuclidean")
        d_te = cdist(zte, ztr, "sqeuclidean")
        for g in gamma_grid:
            lam, vec = eigh(np.exp(-g * d_tr))
            proj = vec.T @ t
            k_te = np.exp(-g * d_te)
            for c in c_grid:
                alpha = vec @ (proj / (np.maximum(lam, 0.0) + 1.0 / c))
                scores[(c, g)].append(auroc(k_te @ alpha, y[test]))
    means = {key: float(np.mean(v)) for key, v in scores.items()}
    best = max(means, key=lambda key: (means[key], key[0], key[1]))
    return SeparationResult(means[best], scores[best], best[0], best[1], means)


def knn_auroc(latents: np.ndarray, labels: np.ndarray, k: int = 5, cv_folds: int = 5, seed: int = 0) -> float:
    """Cross-validated k-nearest-neighbour AUROC (fraction of positive neighbours as score)."""
    z = np.asarray(latents, dtype=np.float64)
    y = _binarize(labels)
    folds = stratified_folds(y, cv_folds, np.random.default_rng(seed))
    out = []
    for test in folds:
        train = np.setdiff1d(np.arange(len(y)), test)
        dist = cdist(z[test], z[train])
        nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
        out.append(auroc(y[train][nn].mean(axis=1), y[test]))
    return float(np.mean(out))


def nll_under_prior(latents: np.ndarray, prior: AnalyticPrior) -> float:
    """Mean of ``-log prior(z)`` over the rows of ``latents``."""
    z = np.asarray(latents, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != prior.dim:
        raise ValueError(f"latent dimension {z.shape} does not match prior dimension {prior.dim}")
    return float(-np.mean(prior.log_density(z).data))


def dp_gap(predictions: np.ndarray, protected: np.ndarray) -> float:
    """Demographic-parity gap ``|P(pred=1 | a=0) - P(pred=1 | a=1)|``."""
    p = np.asarray(predictions)
    a = np.asarray(protected)
    if p.shape != a.shape:
        raise ValueError("predictions and protected attribute must have the same length")
    for name, v in (("predictions", p), ("protected", a)):
        if not np.all(np.isin(v, (0, 1))):
            raise ValueError(f"{name} must be binary 0/1")
    if not (np.any(a == 0) and np.any(a == 1)):
        raise ValueError("both protected groups must be non-empty")
    return float(abs(p[a == 0].mean() - p[a == 1].mean()))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("length mismatch")
    return float(np.mean(p == y))


class MlpClassifier:
    """Binary classifier: 3-layer MLP (hidden 64) trained with logistic loss and Adam."""

    def __init__(self, in_dim: int, hidden: int = 64, seed: int = 0, lr: float = 1e-2,
                 epochs: int = 200, batch_size: int = 256):
        rng = np.random.default_rng(seed)
        self.net = Mlp(MlpSpec([in_dim, hidden, hidden, 1], "relu"), rng, name="clf")
        self.rng = rng
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.mu = np.zeros(in_dim)
        self.sd = np.ones(in_dim)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "MlpClassifier":
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        self.mu = x.mean(axis=0)
        sd = x.std(axis=0)
        self.sd = np.where(sd > 0, sd, 1.0)
        xs = (x - self.mu) / self.sd
        opt = Adam(self.net.parameters(), self.lr)
        n = len(xs)
        for _ in range(self.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                logits = ad.reshape(self.net(xs[idx]), (len(idx),))
                # logistic loss: softplus(f) - y f
                loss = ad.reduce_mean(ad.softplus(logits) - logits * y[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return self

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.net((np.asarray(x, dtype=np.float64) - self.mu) / self.sd).data[:, 0]

    def predict(self, x: np.ndarray) -> np.ndarray:
        return (self.decision_function(x) > 0).astype(np.int64)
