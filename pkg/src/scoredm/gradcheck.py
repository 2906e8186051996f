"""Gradient oracles.

* finite-difference checks of every autodiff primitive,
* the score-function-substitution identity: the encoder gradient of the
  surrogate ``-<detach(score(z)), z>`` equals that of ``-log Q(z)``,
* the same identity for the full SAUB vs. VAUB objectives,
* the LSGM encoder gradient, checked by finite differences and, in
  expectation, against the closed form for a Gaussian prior.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import GaussianDecoder, GaussianEncoder
from .objectives import (LossConfig, NoiseDraws, lsgm_cross_entropy, saub_loss,
                         sfs_cross_entropy_surrogate, vaub_loss)
from .priors import AnalyticPrior, Gaussian, MixtureOfGaussians


@dataclass
class CheckResult:
    check: str
    case: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tolerance)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||b||, floor)`` over the flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))


# primitive finite-difference checks ----------------------------------------------

def _away_from(x: np.ndarray, points, margin: float) -> np.ndarray:
    """Nudge entries that sit within ``margin`` of a kink."""
    x = x.copy()
    for p in points:
        close = np.abs(x - p) < margin
        x[close] = p + np.where(x[close] >= p, margin, -margin)
    return x


def _normal(*shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.2, 2.0, size=shape)


# name -> (function of tensors, list of input generators)
PRIMITIVES: dict[str, tuple[Callable, list]] = {
    "add": (ad.add, [_normal(3, 4), _normal(3, 4)]),
    "add_row_broadcast": (ad.add, [_normal(3, 4), _normal(4)]),
    "sub": (ad.sub, [_normal(3, 4), _normal(3, 4)]),
    "mul": (ad.mul, [_normal(3, 4), _normal(3, 4)]),
    "mul_scalar_broadcast": (ad.mul, [_normal(3, 4), _normal()]),
    "div": (ad.div, [_normal(3, 4), _positive(3, 4)]),
    "matmul": (ad.matmul, [_normal(3, 4), _normal(4, 2)]),
    "neg": (ad.neg, [_normal(3, 4)]),
    "scale": (lambda a: ad.scale(a, -1.7), [_normal(3, 4)]),
    "exp": (ad.exp, [_normal(3, 4)]),
    "log": (ad.log, [_positive(3, 4)]),
    "tanh": (ad.tanh, [_normal(3, 4)]),
    "relu": (ad.relu, [lambda rng: _away_from(rng.standard_normal((3, 4)), [0.0], 0.05)]),
    "sigmoid": (ad.sigmoid, [_normal(3, 4)]),
    "softplus": (ad.softplus, [_normal(3, 4)]),
    "square": (ad.square, [_normal(3, 4)]),
    "sqrt": (ad.sqrt, [_positive(3, 4)]),
    "power": (lambda a: ad.power(a, 1.5), [_positive(3, 4)]),
    "clip": (lambda a: ad.clip(a, -0.5, 0.5),
             [lambda rng: _away_from(rng.standard_normal((3, 4)), [-0.5, 0.5], 0.05)]),
    "reduce_sum": (ad.reduce_sum, [_normal(3, 4)]),
    "reduce_sum_axis0": (lambda a: ad.reduce_sum(a, axis=0), [_normal(3, 4)]),
    "reduce_sum_axis1": (lambda a: ad.reduce_sum(a, axis=1), [_normal(3, 4)]),
    "reduce_mean": (ad.reduce_mean, [_normal(3, 4)]),
    "reduce_mean_axis0": (lambda a: ad.reduce_mean(a, axis=0), [_normal(3, 4)]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=1), [_normal(3, 4)]),
    "row_norm": (ad.row_norm, [_normal(3, 4)]),
    "transpose": (ad.transpose, [_normal(3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (4, 3)), [_normal(3, 4)]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([0, 2, 2, 1])), [_normal(3, 4)]),
    "slice": (lambda a: a[:, 1:3], [_normal(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), [_normal(3, 2), _normal(3, 4)]),
    "reparameterized_sample": (lambda m, lv, e: ad.reparameterized_sample(m, lv, e.data),
                               [_normal(3, 2), _normal(3, 2), _normal(3, 2)]),
}


def check_primitive(name: str, seed: int, h: float = 1e-5) -> float:
    """Max relative error (over inputs) between autodiff and central differences.

    The output is contracted with a fixed random weight tensor so the check
    covers the whole Jacobian, not only its column sums.
    """
    fn, gens = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(g(rng), dtype=np.float64) for g in gens]
    with ad.no_grad():
        out_shape = fn(*[Tensor(v) for v in inputs]).shape
    w = rng.standard_normal(out_shape)

    def value(arrs) -> float:
        with ad.no_grad():
            return float(np.sum(fn(*[Tensor(v) for v in arrs]).data * w))

    tensors = [Tensor(v, requires_grad=True) for v in inputs]
    out = fn(*tensors)
    weighted = out * Tensor(w)
    (ad.reduce_sum(weighted) if out.shape else weighted).backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        if name == "reparameterized_sample" and k == 2:
            continue  # eps is data, not a differentiable input
        def f(xk, k=k):
            arrs = list(inputs)
            arrs[k] = xk
            return value(arrs)
        fd = ad.finite_difference_gradient(f, inputs[k], h)
        g = t.grad if t.grad is not None else np.zeros_like(inputs[k])
        err = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-6))
        worst = max(worst, err)
    return worst


def primitive_checks(cases: int = 50, tolerance: float = 1e-4, seed0: int = 0) -> list[CheckResult]:
    out = []
    for name in PRIMITIVES:
        errs = [check_primitive(name, seed0 + s) for s in range(cases)]
        worst = int(np.argmax(errs))
        out.append(CheckResult("autodiff_fd", name, seed0 + worst, float(errs[worst]), tolerance))
    return out


# score-function substitution ---------------------------------------------------

def random_prior(kind: str, dim: int, rng: np.random.Generator) -> AnalyticPrior:
    """``gaussian``, ``mog2`` or ``mog5`` with random parameters."""
    if kind == "gaussian":
        return Gaussian(rng.normal(0.0, 1.0, dim), rng.uniform(0.5, 2.0, dim))
    k = {"mog2": 2, "mog5": 5}[kind]
    w = rng.dirichlet(np.full(k, 2.0))
    w = w / w.sum()
    return MixtureOfGaussians(w, rng.normal(0.0, 1.5, (k, dim)), rng.uniform(0.3, 1.5, (k, dim)))


def _small_model(seed: int, data_dim: int = 3, latent_dim: int = 2):
    rng = np.random.default_rng(seed)
    enc = GaussianEncoder(data_dim, latent_dim, [16], 2, rng, activation="tanh")
    dec = GaussianDecoder(latent_dim, data_dim, [16], 2, rng, activation="tanh")
    x = rng.standard_normal((8, data_dim))
    eps = rng.standard_normal((8, latent_dim))
    return enc, dec, x, eps, rng


def _grads(params) -> np.ndarray:
    return np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
                           for p in params])


def _zero(params) -> None:
    for p in params:
        p.grad = None


def sfs_vs_direct(prior_kind: str, seed: int, detach_score: bool = True) -> float:
    """Relative L2 error between encoder gradients of the surrogate and of ``-log Q(z)``."""
    enc, dec, x, eps, rng = _small_model(seed)
    prior = random_prior(prior_kind, enc.latent_dim, rng)
    theta = enc.parameters()
    d = int(rng.integers(0, 2))

    def z_of():
        mu, logvar = enc.encode(x, d)
        return ad.reparameterized_sample(mu, logvar, eps)

    _zero(theta)
    ad.neg(ad.reduce_mean(prior.log_density(z_of()))).backward()
    direct = _grads(theta)
    _zero(theta)
    sfs_cross_entropy_surrogate(z_of(), prior, 0.0, detach_score=detach_score).backward()
    sub = _grads(theta)
    _zero(theta)
    return relative_error(sub, direct)


def saub_vs_vaub(prior_kind: str, seed: int, beta: float = 1.0, detach_score: bool = True) -> float:
    """Relative L2 error between ``grad_{theta,phi}`` of SAUB and of VAUB at shared ``eps``."""
    enc, dec, x, eps, rng = _small_model(seed)
    prior = random_prior(prior_kind, enc.latent_dim, rng)
    params = enc.parameters() + dec.parameters()
    cfg = LossConfig(beta=beta)
    d = int(rng.integers(0, 2))
    _zero(params)
    vaub_loss(x, d, enc, dec, prior, eps, cfg).total.backward()
    g_v = _grads(params)
    _zero(params)
    saub_loss(x, d, enc, dec, prior, eps, cfg, detach_score=detach_score).total.backward()
    g_s = _grads(params)
    _zero(params)
    return relative_error(g_s, g_v)


# LSGM encoder gradient ----------------------------------------------------------

def lsgm_fd_check(seed: int, sigma_min: float = 0.05, sigma_max: float = 1.0) -> float:
    """Finite-difference check of the LSGM objective's gradient w.r.t. the latents."""
    rng = np.random.default_rng(seed)
    prior = random_prior("gaussian", 2, rng)
    z0 = rng.standard_normal((6, 2))
    sig = sigma_min * (sigma_max / sigma_min) ** rng.uniform(0, 1, 6)
    draws = NoiseDraws(sig, rng.standard_normal((6, 2)))
    z = Tensor(z0, requires_grad=True)
    lsgm_cross_entropy(prior, z, draws, sigma_min, sigma_max).backward()

    def f(v):
        with ad.no_grad():
            return lsgm_cross_entropy(prior, Tensor(v), draws, sigma_min, sigma_max).item()

    return relative_error(z.grad, ad.finite_difference_gradient(f, z0))


def lsgm_expectation_check(seed: int, n_samples: int = 20000, sigma_min: float = 0.05,
                           sigma_max: float = 1.0) -> float:
    """Monte Carlo mean of the LSGM latent gradient vs. ``(z - m) / (v + sigma_min^2)``.

    Returns the largest deviation in units of the Monte Carlo standard error.
    """
    rng = np.random.default_rng(seed)
    prior = random_prior("gaussian", 2, rng)
    z0 = rng.standard_normal(2)
    t = rng.uniform(0.0, 1.0, n_samples)
    draws = NoiseDraws(sigma_min * (sigma_max / sigma_min) ** t, rng.standard_normal((n_samples, 2)))
    z = Tensor(np.tile(z0, (n_samples, 1)), requires_grad=True)
    lsgm_cross_entropy(prior, z, draws, sigma_min, sigma_max).backward()
    per_row = z.grad * n_samples
    mean = per_row.mean(axis=0)
    se = per_row.std(axis=0, ddof=1) / np.sqrt(n_samples)
    expected = (z0 - prior.mean) / (prior.var + sigma_min ** 2)
    return float(np.max(np.abs(mean - expected) / se))


PRIOR_KINDS = ("gaussian", "mog2", "mog5")


def run_all(n_seeds: int = 20, tolerance: float = 1e-5, fd_tolerance: float = 1e-4,
            fd_cases: int = 50, lsgm_samples: int = 20000, corrupt_detach: bool = False) -> list[CheckResult]:
    """The full oracle suite; ``corrupt_detach`` routes the score through the graph (negative control)."""
    results: list[CheckResult] = []
    detach = not corrupt_detach
    for kind in PRIOR_KINDS:
        for s in range(n_seeds):
            results.append(CheckResult("sfs_vs_direct", kind, s, sfs_vs_direct(kind, s, detach), tolerance))
        for s in range(n_seeds):
            results.append(CheckResult("saub_vs_vaub", kind, s, saub_vs_vaub(kind, s, detach_score=detach),
                                       tolerance))
    results.extend(primitive_checks(fd_cases, fd_tolerance))
    for s in range(n_seeds):
        results.append(CheckResult("lsgm_fd", "gaussian", s, lsgm_fd_check(s), fd_tolerance))
    # 4 standard errors: a false alarm has probability ~6e-5 per coordinate
    results.append(CheckResult("lsgm_expectation", "gaussian", 0,
                               lsgm_expectation_check(0, lsgm_samples), 4.0))
    return results
