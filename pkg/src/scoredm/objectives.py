"""Loss functions for likelihood-based distribution matching.

All batch quantities are batch means. Every function returns autodiff tensors
so callers decide which parameters receive gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .priors import LOG_2PI, AnalyticPrior, Gaussian, MixtureOfGaussians


@dataclass
class LossConfig:
    beta: float = 1.0
    lambda_gw: float = 0.0
    obs_var: float = 0.1
    entropy: str = "sample"
    lsgm_weighting: str = "likelihood"

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError("beta must lie in (0, 1]")
        if self.lambda_gw < 0:
            raise ValueError("lambda_gw must be non-negative")
        if self.obs_var <= 0:
            raise ValueError("obs_var must be positive")
        if self.entropy not in ("sample", "closed_form"):
            raise ValueError(f"unknown entropy mode {self.entropy!r}")
        if self.lsgm_weighting != "likelihood":
            raise ValueError("only likelihood weighting is supported for LSGM")


@dataclass
class VaubTerms:
    """Batch-mean loss terms; ``total = recon / beta - entropy + cross_entropy``."""

    reconstruction: Tensor
    entropy: Tensor
    cross_entropy: Tensor
    total: Tensor
    z: Tensor

    def values(self) -> dict[str, float]:
        return {"recon": self.reconstruction.item(), "entropy": self.entropy.item(),
                "xent": self.cross_entropy.item(), "total": self.total.item()}


@dataclass
class NoiseDraws:
    """Per-sample noise levels and standard-normal perturbations."""

    sigmas: np.ndarray
    eps: np.ndarray

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        self.eps = np.asarray(self.eps, dtype=np.float64)
        if self.eps.ndim != 2 or self.eps.shape[0] != self.sigmas.shape[0]:
            raise ValueError("eps must be (batch, dim) with one sigma per row")
        if np.any(self.sigmas <= 0):
            raise ValueError("noise levels must be positive")


def gaussian_nll(x, mean: Tensor, var: float) -> Tensor:
    """Per-sample ``-log N(x; mean, var I)``."""
    x = ad.as_tensor(x)
    d = x.shape[1]
    sq = ad.reduce_sum(ad.square(x - mean), axis=1)
    return ad.scale(sq, 0.5 / var) + 0.5 * d * (LOG_2PI + np.log(var))


def posterior_neg_log_density(z: Tensor, mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-sample ``-log q(z | x)`` for a diagonal Gaussian posterior."""
    k = z.shape[1]
    quad = ad.reduce_sum(ad.square(z - mu) * ad.exp(-logvar), axis=1)
    return ad.scale(quad + ad.reduce_sum(logvar, axis=1), 0.5) + 0.5 * k * LOG_2PI


def _rows(a) -> int:
    return (a.data if isinstance(a, Tensor) else np.asarray(a)).shape[0]


def _encode_sample(x, d, encoder, decoder, eps, cfg: LossConfig, mode="train"):
    x = ad.as_tensor(x)
    mu, logvar = encoder.encode(x, d, mode=mode)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != mu.shape:
        raise ValueError(f"eps shape {eps.shape} does not match latent batch {mu.shape}")
    z = ad.reparameterized_sample(mu, logvar, eps)
    recon = ad.reduce_mean(gaussian_nll(x, decoder.decode(z, d), cfg.obs_var))
    if cfg.entropy == "sample":
        ent = ad.reduce_mean(posterior_neg_log_density(z, mu, logvar))
    else:
        k = mu.shape[1]
        ent = ad.reduce_mean(ad.scale(ad.reduce_sum(logvar, axis=1), 0.5)) + 0.5 * k * (LOG_2PI + 1.0)
    return z, mu, logvar, recon, ent


def vaub_loss(x, d: int, encoder, decoder, prior, eps, cfg: LossConfig | None = None,
              mode: str = "train") -> VaubTerms:
    """Variational alignment bound for one domain batch with a prior of known density.

    ``prior`` is anything with a differentiable ``log_density(z) -> Tensor``
    (an :class:`AnalyticPrior` or a learnable mixture).
    """
    cfg = cfg or LossConfig()
    if _rows(x) != _rows(eps):
        raise ValueError("x and eps batch sizes differ")
    z, _, _, recon, ent = _encode_sample(x, d, encoder, decoder, eps, cfg, mode)
    xent = ad.neg(ad.reduce_mean(prior.log_density(z)))
    total = ad.scale(recon, 1.0 / cfg.beta) - ent + xent
    return VaubTerms(recon, ent, xent, total, z)


def _provider_score(provider, z: np.ndarray, sigma: float) -> np.ndarray:
    if isinstance(provider, AnalyticPrior):
        return provider(z, sigma)
    if hasattr(provider, "score_numpy"):
        return provider.score_numpy(z, sigma)
    out = provider(z, sigma)
    return out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)


def sfs_cross_entropy_surrogate(z: Tensor, provider, sigma0: float = 0.0,
                                eps0: np.ndarray | None = None, detach_score: bool = True) -> Tensor:
    """Score-function substitute for the prior cross-entropy.

    Evaluates the prior score at ``detach(z) + sigma0 * eps0`` and returns
    ``mean_b(-<score, z>)``. The score is a constant of the graph, so the
    gradient reaches ``z`` only through the inner product.

    ``detach_score=False`` is a negative-control hook: the score is recomputed
    as a differentiable function of ``z`` (analytic priors only), which breaks
    the gradient equality.
    """
    z_star = z.data.copy()
    if sigma0 > 0:
        if eps0 is None:
            raise ValueError("eps0 is required when sigma0 > 0")
        z_star = z_star + sigma0 * np.asarray(eps0, dtype=np.float64)
    if detach_score:
        s = Tensor(_provider_score(provider, z_star, sigma0))
    else:
        if not isinstance(provider, AnalyticPrior):
            raise TypeError("the undetached control needs an analytic prior")
        s = analytic_score_tensor(provider, z)
    return ad.neg(ad.reduce_mean(ad.reduce_sum(s * z, axis=1)))


@dataclass
class SaubTerms:
    reconstruction: Tensor
    entropy: Tensor
    surrogate: Tensor
    total: Tensor
    z: Tensor

    def values(self) -> dict[str, float]:
        return {"recon": self.reconstruction.item(), "entropy": self.entropy.item(),
                "xent": self.surrogate.item(), "total": self.total.item()}


def saub_loss(x, d: int, encoder, decoder, provider, eps, cfg: LossConfig | None = None,
              sigma0: float = 0.0, eps0: np.ndarray | None = None, mode: str = "train",
              detach_score: bool = True) -> SaubTerms:
    """Score-based alignment bound: VAUB with the cross-entropy replaced by the SFS surrogate."""
    cfg = cfg or LossConfig()
    z, _, _, recon, ent = _encode_sample(x, d, encoder, decoder, eps, cfg, mode)
    sur = sfs_cross_entropy_surrogate(z, provider, sigma0, eps0, detach_score=detach_score)
    total = ad.scale(recon, 1.0 / cfg.beta) - ent + sur
    return SaubTerms(recon, ent, sur, total, z)


def dsm_loss(score_net, z, draws: NoiseDraws, weighting: str = "none") -> Tensor:
    """Denoising score matching on (detached) latents.

    ``mean_b 1/2 || S(z + sigma eps, sigma) + eps / sigma ||^2``; with
    ``weighting="sigma2"`` each sample is multiplied by ``sigma^2``.
    """
    z = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if z.shape != draws.eps.shape:
        raise ValueError("noise draws do not match the latent batch")
    sig = draws.sigmas[:, None]
    z_tilde = z + sig * draws.eps
    target = -draws.eps / sig
    pred = score_net.score(z_tilde, draws.sigmas)
    per = ad.scale(ad.reduce_sum(ad.square(pred - target), axis=1), 0.5)
    if weighting == "sigma2":
        per = per * Tensor(draws.sigmas ** 2)
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")
    return ad.reduce_mean(per)


def likelihood_weight(sigmas: np.ndarray, sigma_min: float, sigma_max: float) -> np.ndarray:
    """``g(t)^2`` for a variance-exploding process with geometric ``sigma_t``.

    With ``sigma_t = sigma_min (sigma_max / sigma_min)^t`` the diffusion
    coefficient satisfies ``g^2 = d sigma_t^2 / dt = 2 sigma_t^2 log(sigma_max / sigma_min)``.
    """
    if sigma_max <= sigma_min:
        raise ValueError("likelihood weighting needs sigma_max > sigma_min")
    return 2.0 * np.asarray(sigmas) ** 2 * np.log(sigma_max / sigma_min)


def _score_tensor(provider, z: Tensor, sigma) -> Tensor:
    if isinstance(provider, AnalyticPrior):
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim == 0:
            return analytic_score_tensor(provider.perturbed(float(s)), z)
        if isinstance(provider, Gaussian):
            return (z - provider.mean) * Tensor(-1.0 / (provider.var[None] + s[:, None] ** 2))
        # per-sample noise levels: evaluate row by row
        out = []
        for i in range(z.shape[0]):
            out.append(analytic_score_tensor(provider.perturbed(float(s[i])), z[i:i + 1]))
        return ad.concat(out, axis=0)
    if hasattr(provider, "score_tensor"):
        return provider.score_tensor(z, sigma)
    return provider.score(z, sigma)


def _terminal_gaussian(provider, sigma_max: float) -> Gaussian | None:
    if isinstance(provider, Gaussian):
        return provider.perturbed(sigma_max)
    if isinstance(provider, AnalyticPrior):
        # moment-matched Gaussian of the mixture, perturbed at sigma_max
        m = provider.weights @ provider.means
        second = provider.weights @ (provider.vars + provider.means ** 2)
        return Gaussian(m, second - m ** 2 + sigma_max ** 2)
    if hasattr(provider, "mean") and hasattr(provider, "var"):
        return Gaussian(provider.mean, provider.var + sigma_max ** 2)
    return None


def lsgm_cross_entropy(provider, z: Tensor, draws: NoiseDraws, sigma_min: float,
                       sigma_max: float, terminal: bool = True) -> Tensor:
    """Cross-entropy estimate used by latent score-based generative models.

    ``mean_b g(t)^2 / 2 * || S(z + sigma_t eps, sigma_t) + eps / sigma_t ||^2``
    plus (when ``terminal``) the cross-entropy of a Gaussian reference at
    ``sigma_max``. The score is evaluated on a differentiable input, so the
    encoder gradient includes the score network's input Jacobian.

    With continuous log-uniform ``sigma_t`` and the exact score of
    ``N(m, v)``, the expected gradient w.r.t. ``z`` is ``(z - m) / (v + sigma_min^2)``:
    the diffusion part integrates ``g^2 (z - m) / (v + sigma^2)^2`` from
    ``sigma_min`` to ``sigma_max`` and the terminal part adds the remainder.
    """
    if z.shape != draws.eps.shape:
        raise ValueError("noise draws do not match the latent batch")
    sig = draws.sigmas
    z_tilde = z + Tensor(sig[:, None] * draws.eps)
    pred = _score_tensor(provider, z_tilde, sig)
    resid = pred + Tensor(draws.eps / sig[:, None])
    w = likelihood_weight(sig, sigma_min, sigma_max)
    per = ad.reduce_sum(ad.square(resid), axis=1) * Tensor(0.5 * w)
    out = ad.reduce_mean(per)
    ref = _terminal_gaussian(provider, sigma_max) if terminal else None
    if ref is not None:
        out = out - ad.reduce_mean(ref.log_density(z))
    return out


def analytic_score_tensor(prior: AnalyticPrior, z: Tensor) -> Tensor:
    """Analytic score as a differentiable function of ``z``."""
    z = ad.as_tensor(z)
    if isinstance(prior, Gaussian):
        return (z - prior.mean) * Tensor(-1.0 / prior.var)
    if isinstance(prior, MixtureOfGaussians):
        cols, comps = [], []
        logw = np.log(prior.weights)
        for k in range(prior.n_components):
            diff = z - prior.means[k]
            quad = ad.reduce_sum(ad.square(diff) * (1.0 / prior.vars[k]), axis=1)
            const = float(logw[k]) - 0.5 * float(np.sum(np.log(prior.vars[k])))
            cols.append(ad.reshape_col(ad.scale(quad, -0.5) + const))
            comps.append(diff * Tensor(-1.0 / prior.vars[k]))
        lp = ad.concat(cols, axis=1)
        norm = ad.reshape_col(ad.logsumexp(lp, axis=1)) @ Tensor(np.ones((1, prior.n_components)))
        resp = ad.exp(lp - norm)
        out = None
        for k, comp in enumerate(comps):
            term = comp * (resp[:, k:k + 1] @ Tensor(np.ones((1, prior.dim))))
            out = term if out is None else out + term
        return out
    raise TypeError(f"no tensor score for {type(prior).__name__}")


# Gromov-Wasserstein structural cost -----------------------------------------

class Embedding:
    """Precomputed per-sample embedding used as the data-space metric.

    File layout: a header line ``# dim=<K>``, then one row per sample:
    ``<sample-id> v1 ... vK`` (whitespace separated).
    """

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim

    @classmethod
    def load(cls, path) -> "Embedding":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# dim="):
            raise ValueError("embedding file must start with a '# dim=<K>' header")
        dim = int(lines[0].split("=", 1)[1])
        table = {}
        for ln in lines[1:]:
            parts = ln.split()
            if len(parts) != dim + 1:
                raise ValueError(f"row for {parts[0]!r} has {len(parts) - 1} values, expected {dim}")
            table[parts[0]] = np.array([float(v) for v in parts[1:]])
        return cls(table, dim)

    def lookup(self, ids) -> np.ndarray:
        missing = [str(i) for i in ids if str(i) not in self.table]
        if missing:
            raise KeyError(f"embedding file is missing ids: {missing[:5]}")
        return np.stack([self.table[str(i)] for i in ids])


def all_pairs(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


def random_pairs(n: int, n_pairs: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n
    return i, j


def gw_cost(x, z, metric_x: str = "euclidean", metric_z: str = "euclidean",
            pairs: tuple[np.ndarray, np.ndarray] | None = None,
            embedding: Embedding | None = None, ids=None) -> Tensor:
    """Mean over pairs ``i != j`` of ``(d_X(x_i, x_j) - d_Z(z_i, z_j))^2``; differentiable in ``z``."""
    z = ad.as_tensor(z)
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    n = z.shape[0]
    if n < 2:
        raise ValueError("GW cost needs a batch of at least 2")
    if xd.shape[0] != n:
        raise ValueError("x and z batches differ in size")
    if metric_z != "euclidean":
        raise ValueError(f"unsupported latent metric {metric_z!r}")
    if metric_x == "embedding":
        if embedding is None or ids is None:
            raise ValueError("embedding metric needs an Embedding and sample ids")
        xd = embedding.lookup(ids)
    elif metric_x != "euclidean":
        raise ValueError(f"unsupported data metric {metric_x!r}")
    i, j = pairs if pairs is not None else all_pairs(n)
    dx = np.sqrt(np.sum((xd[i] - xd[j]) ** 2, axis=1))
    dz = ad.row_norm(ad.take_rows(z, i) - ad.take_rows(z, j))
    return ad.reduce_mean(ad.square(Tensor(dx) - dz))


def total_loss(dm, gw, cfg: LossConfig) -> Tensor:
    return ad.as_tensor(dm) + ad.scale(ad.as_tensor(gw), cfg.lambda_gw)
