"""Alternating encoder/decoder and score-model optimization.

One outer step updates the encoders and decoders on the alignment bound (plus
the weighted GW penalty), then runs ``score_loops`` denoising-score-matching
steps on the score network with the encoders frozen.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import GaussianDecoder, GaussianEncoder, ScoreNetwork
from .objectives import (LossConfig, NoiseDraws, dsm_loss, gw_cost, lsgm_cross_entropy,
                         saub_loss, vaub_loss)
from .priors import AnalyticPrior, BlendedScorePrior, LearnableMixture

logger = logging.getLogger(__name__)

MODES = ("sfs", "lsgm", "analytic-vaub")
TRACE_COLUMNS = ("step", "recon", "entropy", "xent", "dsm", "gw", "nll", "wall_ms")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite; ``trace`` holds everything recorded so far."""

    def __init__(self, step: int, values: dict, trace: "RunTrace | None" = None):
        super().__init__(f"non-finite value at step {step}: {values}")
        self.step = step
        self.values = values
        self.trace = trace


@dataclass
class NoiseSchedule:
    sigma_min: float = 0.01
    sigma_max: float = 1.0
    n_levels: int = 10

    def __post_init__(self):
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive")
        if self.sigma_max < self.sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        if self.n_levels < 1:
            raise ValueError("need at least one noise level")

    def levels(self) -> np.ndarray:
        if self.n_levels == 1:
            return np.array([self.sigma_min])
        return np.geomspace(self.sigma_min, self.sigma_max, self.n_levels)

    def sample(self, rng: np.random.Generator, n: int, continuous: bool = False) -> np.ndarray:
        """Uniform over the discrete levels, or log-uniform on ``[sigma_min, sigma_max]``."""
        if continuous:
            t = rng.uniform(0.0, 1.0, size=n)
            return self.sigma_min * (self.sigma_max / self.sigma_min) ** t
        return self.levels()[rng.integers(0, self.n_levels, size=n)]

    def draws(self, rng: np.random.Generator, n: int, dim: int, continuous: bool = False) -> NoiseDraws:
        sig = self.sample(rng, n, continuous)
        return NoiseDraws(sig, rng.standard_normal((n, dim)))


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0


def adam_init(params: Sequence[Tensor]) -> AdamState:
    return AdamState([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place Adam update with bias correction. ``None`` gradients count as zero."""
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter is required")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name or 'parameter'}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = adam_init(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr if lr is None else lr, *self.betas, self.eps)


def cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / max(total, 1)))


# configuration + traces -------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 128
    vae_lr: float = 1e-3
    score_lr: float = 1e-3
    score_loops: int = 5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    mode: str = "sfs"
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    sfs_noise: bool = True
    dsm_weighting: str = "sigma2"
    dsm_batch_size: int = 0
    lsgm_continuous: bool = True
    gw_pairs: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.vae_lr <= 0 or self.score_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.score_loops < 1:
            raise ValueError("score_loops must be >= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("invalid step budget or batch size")


@dataclass
class RunTrace:
    records: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.records.append({c: row.get(c, float("nan")) for c in TRACE_COLUMNS})

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def rows(self) -> list[list]:
        return [[r[c] for c in TRACE_COLUMNS] for r in self.records]


@dataclass
class Model:
    """Encoders, decoders and a prior.

    ``prior`` is an :class:`AnalyticPrior` (fixed), a :class:`LearnableMixture`
    (trained jointly with the encoders) or a :class:`BlendedScorePrior` whose
    score network is trained by denoising score matching.
    """

    encoder: GaussianEncoder
    decoder: GaussianDecoder
    prior: object

    @property
    def score_net(self) -> ScoreNetwork | None:
        return self.prior.network if isinstance(self.prior, BlendedScorePrior) else None

    def vae_parameters(self) -> list[Tensor]:
        params = self.encoder.parameters() + self.decoder.parameters()
        if isinstance(self.prior, LearnableMixture):
            params += self.prior.parameters()
        return params

    def score_parameters(self) -> list[Tensor]:
        net = self.score_net
        return net.parameters() if net is not None else []


@dataclass
class DomainData:
    """Per-domain feature arrays (and optional labels) used by the trainer."""

    xs: list[np.ndarray]
    labels: list[np.ndarray] | None = None

    @property
    def n_domains(self) -> int:
        return len(self.xs)


def _batch_indices(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    if n <= size:
        return rng.permutation(n)
    return rng.choice(n, size=size, replace=False)


def _finite(values: dict) -> bool:
    return all(np.isfinite(v) for v in values.values())


def _vae_objective(model: Model, x: np.ndarray, d: int, eps: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator, nll_prior: AnalyticPrior | None):
    """Alignment bound for one domain batch; returns (objective tensor, terms dict, z)."""
    lc = cfg.loss
    sched = cfg.schedule
    if cfg.mode == "analytic-vaub":
        terms = vaub_loss(x, d, model.encoder, model.decoder, model.prior, eps, lc)
        obj, z = terms.total, terms.z
        vals = {"recon": terms.reconstruction.item(), "entropy": terms.entropy.item(),
                "xent": terms.cross_entropy.item()}
    elif cfg.mode == "sfs":
        sigma0 = sched.sigma_min if cfg.sfs_noise else 0.0
        eps0 = rng.standard_normal(eps.shape) if cfg.sfs_noise else None
        terms = saub_loss(x, d, model.encoder, model.decoder, model.prior, eps, lc,
                          sigma0=sigma0, eps0=eps0)
        obj, z = terms.total, terms.z
        vals = {"recon": terms.reconstruction.item(), "entropy": terms.entropy.item(),
                "xent": terms.surrogate.item()}
    else:  # lsgm
        from .objectives import _encode_sample
        z, _, _, recon, ent = _encode_sample(x, d, model.encoder, model.decoder, eps, lc)
        draws = sched.draws(rng, z.shape[0], z.shape[1], continuous=cfg.lsgm_continuous)
        xent = lsgm_cross_entropy(model.prior, z, draws, sched.sigma_min, sched.sigma_max)
        obj = ad.scale(recon, 1.0 / lc.beta) - ent + xent
        vals = {"recon": recon.item(), "entropy": ent.item(), "xent": xent.item()}
    if lc.lambda_gw > 0:
        pairs = None
        if cfg.gw_pairs:
            from .objectives import random_pairs
            pairs = random_pairs(z.shape[0], cfg.gw_pairs, rng)
        gw = gw_cost(x, z, pairs=pairs)
        obj = obj + ad.scale(gw, lc.lambda_gw)
        vals["gw"] = gw.item()
    else:
        vals["gw"] = 0.0
    if nll_prior is not None:
        vals["nll"] = float(-np.mean(nll_prior.log_density(z.data).data))
    return obj, vals, z


def vae_step(model: Model, data: DomainData, cfg: TrainConfig, rng: np.random.Generator,
             opt: Adam, nll_prior: AnalyticPrior | None = None, lr: float | None = None) -> dict:
    """One gradient step on encoder/decoder (and learnable-prior) parameters."""
    opt.zero_grad()
    for p in model.score_parameters():
        p.grad = None
    total = None
    agg: dict[str, float] = {}
    latents = []
    for d, x_all in enumerate(data.xs):
        idx = _batch_indices(rng, len(x_all), cfg.batch_size)
        x = x_all[idx]
        eps = rng.standard_normal((len(idx), model.encoder.latent_dim))
        obj, vals, z = _vae_objective(model, x, d, eps, cfg, rng, nll_prior)
        total = obj if total is None else total + obj
        for k, v in vals.items():
            agg[k] = agg.get(k, 0.0) + v
        latents.append(z.data)
    if "nll" in agg:
        agg["nll"] /= len(data.xs)
    agg["total"] = total.item()
    if not _finite(agg):
        return agg
    total.backward()
    # score parameters may pick up adjoints in LSGM mode; they are never stepped here
    for p in model.score_parameters():
        p.grad = None
    opt.step(lr)
    agg["_latents"] = np.concatenate(latents)
    return agg


def score_step(model: Model, data: DomainData, cfg: TrainConfig, rng: np.random.Generator,
               opt: Adam) -> float:
    """One DSM step on the score network using latents from the frozen encoders."""
    net = model.score_net
    zs = []
    bs = cfg.dsm_batch_size or cfg.batch_size
    with ad.no_grad():
        for d, x_all in enumerate(data.xs):
            idx = _batch_indices(rng, len(x_all), bs)
            mu, logvar = model.encoder.encode(x_all[idx], d, mode="eval")
            eps = rng.standard_normal(mu.shape)
            zs.append(mu.data + np.exp(0.5 * logvar.data) * eps)
    z = np.concatenate(zs)
    if isinstance(model.prior, BlendedScorePrior):
        model.prior.update_moments(z)
    draws = cfg.schedule.draws(rng, z.shape[0], z.shape[1])
    opt.zero_grad()
    for p in model.vae_parameters():
        p.grad = None
    loss = dsm_loss(net, z, draws, weighting=cfg.dsm_weighting)
    val = loss.item()
    if not np.isfinite(val):
        return val
    loss.backward()
    opt.step()
    return val


def alternate_train(data: DomainData, model: Model, cfg: TrainConfig,
                    nll_prior: AnalyticPrior | None = None,
                    callback: Callable[[int, dict], None] | None = None) -> RunTrace:
    """Alternating optimization: one VAE step, then ``score_loops`` DSM steps, repeated.

    Raises :class:`TrainingDiverged` (carrying the partial trace) as soon as a
    loss or gradient turns non-finite.
    """
    if cfg.mode in ("sfs", "lsgm") and model.score_net is None:
        raise ValueError(f"mode {cfg.mode!r} needs a BlendedScorePrior")
    if cfg.mode == "analytic-vaub" and isinstance(model.prior, BlendedScorePrior):
        raise ValueError("analytic-vaub mode needs a prior with a log-density")
    rng = np.random.default_rng(cfg.seed)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    vae_opt = Adam(model.vae_parameters(), cfg.vae_lr, betas, cfg.adam_eps)
    score_opt = Adam(model.score_parameters(), cfg.score_lr, betas, cfg.adam_eps) \
        if model.score_net is not None else None
    trace = RunTrace()
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        try:
            vals = vae_step(model, data, cfg, rng, vae_opt, nll_prior)
        except FloatingPointError as exc:
            raise TrainingDiverged(step, {"error": str(exc)}, trace) from exc
        if not _finite({k: v for k, v in vals.items() if not k.startswith("_")}):
            raise TrainingDiverged(step, vals, trace)
        dsm_val = float("nan")
        if score_opt is not None:
            for _ in range(cfg.score_loops):
                try:
                    dsm_val = score_step(model, data, cfg, rng, score_opt)
                except FloatingPointError as exc:
                    raise TrainingDiverged(step, {"error": str(exc)}, trace) from exc
                if not np.isfinite(dsm_val):
                    raise TrainingDiverged(step, {"dsm": dsm_val}, trace)
        wall = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else float("nan")
        trace.append(step=step, recon=vals["recon"], entropy=vals["entropy"], xent=vals["xent"],
                     dsm=dsm_val, gw=vals["gw"], nll=vals.get("nll", float("nan")), wall_ms=wall)
        if callback is not None:
            callback(step, vals)
    return trace


def stability_run(data: DomainData, encoder: GaussianEncoder, decoder: GaussianDecoder,
                  fixed_prior: AnalyticPrior, score_provider, mode: str, cfg: TrainConfig) -> RunTrace:
    """Train encoder/decoder only against a frozen score model.

    ``score_provider`` is a pretrained :class:`ScoreNetwork` (or a
    :class:`BlendedScorePrior`, or an analytic prior for ablations). The NLL
    column is ``mean -log fixed_prior(z)`` over the step's posterior samples.
    On divergence the trace is returned up to and including a final row whose
    NLL is ``inf``.
    """
    if mode not in ("sfs", "lsgm", "analytic-vaub"):
        raise ValueError(f"unknown stability mode {mode!r}")
    if isinstance(score_provider, ScoreNetwork):
        sched = cfg.schedule
        score_provider = BlendedScorePrior(score_provider, np.zeros(score_provider.latent_dim),
                                           np.ones(score_provider.latent_dim), alpha=0.0,
                                           sigma_min=sched.sigma_min, sigma_max=sched.sigma_max)
    prior = fixed_prior if mode == "analytic-vaub" else score_provider
    model = Model(encoder, decoder, prior)
    run_cfg = _replace(cfg, mode=mode)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(encoder.parameters() + decoder.parameters(), cfg.vae_lr,
               (cfg.adam_beta1, cfg.adam_beta2), cfg.adam_eps)
    trace = RunTrace()
    # the provider's parameters stay frozen: they are excluded from the optimizer
    # and their stray adjoints (LSGM) are cleared after every step
    frozen = score_provider.network.parameters() if isinstance(score_provider, BlendedScorePrior) else []
    for step in range(cfg.steps):
        t0 = time.perf_counter()
        try:
            vals = vae_step(model, data, run_cfg, rng, opt, nll_prior=fixed_prior)
        except FloatingPointError as exc:
            vals = {"recon": float("nan"), "entropy": float("nan"), "xent": float("nan"),
                    "gw": 0.0, "nll": float("inf"), "error": str(exc)}
        for p in frozen:
            p.grad = None
        wall = (time.perf_counter() - t0) * 1e3 if cfg.record_timing else float("nan")
        finite = _finite({k: v for k, v in vals.items() if k in ("recon", "entropy", "xent", "nll")})
        nll = vals.get("nll", float("nan")) if finite else float("inf")
        trace.append(step=step, recon=vals["recon"], entropy=vals["entropy"], xent=vals["xent"],
                     dsm=float("nan"), gw=vals["gw"], nll=nll, wall_ms=wall)
        if not finite:
            logger.info("stability run (%s) diverged at step %d", mode, step)
            break
    return trace


def pretrain_score(sampler, score_net: ScoreNetwork, schedule: NoiseSchedule, steps: int, seed: int,
                   batch_size: int = 2048, lr: float = 3e-3, weighting: str = "sigma2",
                   lr_schedule: str = "cosine") -> tuple[ScoreNetwork, float]:
    """Fit ``score_net`` by DSM to samples from ``sampler``.

    ``sampler`` is either an analytic prior (fresh samples every step) or an
    array of data points (minibatches drawn with replacement). Returns the
    network and the final DSM loss; raises :class:`TrainingDiverged` when the
    loss exceeds 1e6 or turns non-finite.
    """
    rng = np.random.default_rng(seed)
    opt = Adam(score_net.parameters(), lr)
    last = float("nan")
    for step in range(steps):
        if isinstance(sampler, AnalyticPrior):
            z = sampler.sample(batch_size, rng)
        else:
            arr = np.asarray(sampler, dtype=np.float64)
            z = arr[rng.integers(0, len(arr), size=batch_size)]
        draws = schedule.draws(rng, z.shape[0], z.shape[1])
        opt.zero_grad()
        loss = dsm_loss(score_net, z, draws, weighting=weighting)
        last = loss.item()
        if not np.isfinite(last) or last > 1e6:
            raise TrainingDiverged(step, {"dsm": last})
        loss.backward()
        step_lr = cosine_lr(lr, step, steps) if lr_schedule == "cosine" else lr
        opt.step(step_lr)
    return score_net, last


def _replace(cfg: TrainConfig, **changes) -> TrainConfig:
    kw = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    kw.update(changes)
    return TrainConfig(**kw)
