"""Prior distributions over the latent space.

Analytic priors expose a closed-form log-density (as a differentiable tensor
expression) and a closed-form score. :class:`BlendedScorePrior` wraps a learned
score network and mixes in a Gaussian score so it stays defined for any latent
and any noise level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = float(np.log(2.0 * np.pi))


class AnalyticPrior:
    """Base class; subclasses implement ``log_density`` and ``score``."""

    dim: int

    def _check(self, z) -> np.ndarray:
        arr = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != self.dim:
            raise ValueError(f"expected latents of shape (batch, {self.dim}), got {arr.shape}")
        return arr

    def log_density(self, z) -> Tensor:
        raise NotImplementedError

    def score(self, z) -> np.ndarray:
        raise NotImplementedError

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    # score-provider protocol: analytic priors ignore sigma unless asked to
    # return the score of the Gaussian-perturbed prior
    def __call__(self, z, sigma=0.0) -> np.ndarray:
        return self.perturbed(sigma).score(z) if np.any(np.asarray(sigma) > 0) else self.score(z)

    def perturbed(self, sigma: float) -> "AnalyticPrior":
        raise NotImplementedError


@dataclass
class Gaussian(AnalyticPrior):
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.var <= 0):
            raise ValueError("variances must be strictly positive")
        self.dim = self.mean.shape[0]

    @classmethod
    def standard(cls, dim: int) -> "Gaussian":
        return cls(np.zeros(dim), np.ones(dim))

    def log_density(self, z) -> Tensor:
        self._check(z)
        z = ad.as_tensor(z)
        quad = ad.reduce_sum(ad.square(z - self.mean) * (1.0 / self.var), axis=1)
        const = -0.5 * (self.dim * LOG_2PI + float(np.sum(np.log(self.var))))
        return ad.scale(quad, -0.5) + const

    def score(self, z) -> np.ndarray:
        arr = self._check(z)
        return -(arr - self.mean) / self.var

    def sample(self, n, rng):
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, self.dim))

    def perturbed(self, sigma):
        return Gaussian(self.mean, self.var + float(sigma) ** 2)


@dataclass
class MixtureOfGaussians(AnalyticPrior):
    weights: np.ndarray
    means: np.ndarray
    vars: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.vars = np.broadcast_to(np.asarray(self.vars, dtype=np.float64), self.means.shape).copy()
        k = self.weights.shape[0]
        if self.means.shape[0] != k:
            raise ValueError("one mean per component is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must lie on the simplex (sum to 1 within 1e-12)")
        if np.any(self.vars <= 0):
            raise ValueError("variances must be strictly positive")
        self.dim = self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def _component_logpdf(self, arr: np.ndarray) -> np.ndarray:
        diff = arr[:, None, :] - self.means[None]
        quad = np.sum(diff * diff / self.vars[None], axis=2)
        lognorm = -0.5 * (self.dim * LOG_2PI + np.sum(np.log(self.vars), axis=1))
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logw[None] + lognorm[None] - 0.5 * quad

    def log_density(self, z) -> Tensor:
        self._check(z)
        z = ad.as_tensor(z)
        cols = []
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        for k in range(self.n_components):
            if not np.isfinite(logw[k]):
                continue
            quad = ad.reduce_sum(ad.square(z - self.means[k]) * (1.0 / self.vars[k]), axis=1)
            const = float(logw[k]) - 0.5 * (self.dim * LOG_2PI + float(np.sum(np.log(self.vars[k]))))
            cols.append(ad.reshape_col(ad.scale(quad, -0.5) + const))
        return ad.logsumexp(ad.concat(cols, axis=1), axis=1)

    def responsibilities(self, z) -> np.ndarray:
        lp = self._component_logpdf(self._check(z))
        lp -= lp.max(axis=1, keepdims=True)
        r = np.exp(lp)
        return r / r.sum(axis=1, keepdims=True)

    def score(self, z) -> np.ndarray:
        arr = self._check(z)
        r = self.responsibilities(arr)
        comp = -(arr[:, None, :] - self.means[None]) / self.vars[None]
        return np.sum(r[:, :, None] * comp, axis=1)

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.vars[comp]) * eps

    def perturbed(self, sigma):
        return MixtureOfGaussians(self.weights, self.means, self.vars + float(sigma) ** 2)


def log_density(prior: AnalyticPrior, z) -> Tensor:
    return prior.log_density(z)


def analytic_score(prior: AnalyticPrior, z) -> np.ndarray:
    return prior.score(z)


class LearnableMixture:
    """Mixture of diagonal Gaussians whose logits, means and log-variances are trainable.

    A single component gives a learnable Gaussian.
    """

    def __init__(self, n_components: int, dim: int, rng: np.random.Generator, spread: float = 1.0):
        self.dim = dim
        self.logits = Tensor(np.zeros(n_components), requires_grad=True, name="prior.logits")
        init = rng.standard_normal((n_components, dim)) * spread if n_components > 1 \
            else np.zeros((1, dim))
        self.means = Tensor(init, requires_grad=True, name="prior.means")
        self.logvars = Tensor(np.zeros((n_components, dim)), requires_grad=True, name="prior.logvars")

    def parameters(self) -> list[Tensor]:
        return [self.logits, self.means, self.logvars]

    def log_density(self, z) -> Tensor:
        z = ad.as_tensor(z)
        k = self.logits.shape[0]
        logw = self.logits - ad.logsumexp(ad.reshape_row(self.logits), axis=1)
        cols = []
        for j in range(k):
            mean_j = self.means[j]
            logvar_j = self.logvars[j]
            diff = z - mean_j
            quad = ad.reduce_sum(ad.square(diff) * ad.exp(-logvar_j), axis=1)
            logdet = ad.reduce_sum(logvar_j)
            term = ad.scale(quad, -0.5) - ad.scale(logdet, 0.5) + (-0.5 * self.dim * LOG_2PI)
            cols.append(ad.reshape_col(term + logw[j]))
        return ad.logsumexp(ad.concat(cols, axis=1), axis=1)

    def snapshot(self) -> AnalyticPrior:
        w = np.exp(self.logits.data - self.logits.data.max())
        w = w / w.sum()
        var = np.exp(self.logvars.data)
        if len(w) == 1:
            return Gaussian(self.means.data[0].copy(), var[0].copy())
        return MixtureOfGaussians(w, self.means.data.copy(), var)


@dataclass
class BlendedScorePrior:
    """``(1 - alpha) * network score + alpha * Gaussian score`` with sigma clamped to the trained range.

    The Gaussian moments are meant to track the encoder's latent distribution;
    :meth:`update_moments` keeps an exponential running estimate.
    """

    network: object
    mean: np.ndarray
    var: np.ndarray
    alpha: float = 0.05
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    momentum: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError("need 0 < sigma_min <= sigma_max")
        self.mean = np.asarray(self.mean, dtype=np.float64).copy()
        self.var = np.asarray(self.var, dtype=np.float64).copy()

    def clamp(self, sigma):
        return np.clip(sigma, self.sigma_min, self.sigma_max)

    def gaussian_score(self, z: np.ndarray, sigma) -> np.ndarray:
        s = np.asarray(sigma, dtype=np.float64)
        s2 = s[:, None] ** 2 if s.ndim == 1 else s ** 2
        return -(z - self.mean) / (self.var + s2)

    def score(self, z, sigma) -> np.ndarray:
        z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
        s = self.clamp(np.asarray(sigma, dtype=np.float64))
        if self.alpha == 1.0:
            return self.gaussian_score(z, s)
        net = self.network.score_numpy(z, s)
        if self.alpha == 0.0:
            return net
        return (1.0 - self.alpha) * net + self.alpha * self.gaussian_score(z, s)

    __call__ = score

    def score_tensor(self, z: Tensor, sigma) -> Tensor:
        """Differentiable in ``z`` (and the network parameters); used by the LSGM baseline."""
        s = self.clamp(np.asarray(sigma, dtype=np.float64))
        net = self.network.score(z, s)
        if self.alpha == 0.0:
            return net
        s_arr = np.broadcast_to(s, (z.shape[0],))
        inv = 1.0 / (self.var[None, :] + s_arr[:, None] ** 2)
        gauss = (z - self.mean) * Tensor(-inv)
        return ad.scale(net, 1.0 - self.alpha) + ad.scale(gauss, self.alpha)

    def update_moments(self, z: np.ndarray) -> None:
        m = self.momentum
        self.mean = (1 - m) * self.mean + m * z.mean(axis=0)
        self.var = (1 - m) * self.var + m * np.maximum(z.var(axis=0), 1e-6)


def blended_score(prior: BlendedScorePrior, z, sigma) -> np.ndarray:
    return prior.score(z, sigma)
