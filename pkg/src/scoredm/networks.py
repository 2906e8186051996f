"""Encoder, decoder and noise-conditioned score network built on :mod:`scoredm.autodiff`."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {"relu": ad.relu, "softplus": ad.softplus, "tanh": ad.tanh}

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

CHECKPOINT_MAGIC = "scoredm-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class MlpSpec:
    widths: list[int]
    activation: str = "relu"
    init_scale: float = 1.0

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least an input and an output width")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"widths must be positive, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.init_scale <= 0:
            raise ValueError("init_scale must be positive")


class Mlp:
    """Fully connected net; activation between layers, linear output."""

    def __init__(self, spec: MlpSpec, rng: np.random.Generator, name: str = "mlp"):
        self.spec = spec
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
            s = spec.init_scale / np.sqrt(fan_in)
            self.weights.append(Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)),
                                       requires_grad=True, name=f"{name}.w{i}"))
            self.biases.append(Tensor(np.zeros(fan_out), requires_grad=True, name=f"{name}.b{i}"))
        self._act = ACTIVATIONS[spec.activation]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = self._act(h)
        return h

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM


def batchnorm_no_affine(mu, mode: str, state: BatchNormState) -> Tensor:
    """Standardize each column without a learnable scale or shift.

    In ``"train"`` mode batch statistics are used and ``state`` is updated in
    place (running variance uses the unbiased estimate); ``"eval"`` uses the
    running statistics.
    """
    mu = ad.as_tensor(mu)
    if mode == "train":
        n = mu.shape[0]
        if n < 2:
            raise ValueError("batch norm in train mode needs a batch of at least 2")
        mean = ad.reduce_mean(mu, axis=0)
        centered = mu - mean
        var = ad.reduce_mean(ad.square(centered), axis=0)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean.data
        state.running_var = (1 - m) * state.running_var + m * var.data * n / (n - 1)
        return centered * ad.power(var + BN_EPS, -0.5)
    if mode == "eval":
        return (mu - state.running_mean) * (1.0 / np.sqrt(state.running_var + BN_EPS))
    raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


class GaussianEncoder:
    """One MLP per domain producing ``(mu, logvar)`` of a diagonal Gaussian posterior."""

    def __init__(self, data_dim: int, latent_dim: int, hidden: list[int], n_domains: int,
                 rng: np.random.Generator, activation: str = "relu", init_scale: float = 1.0,
                 batchnorm: bool = False):
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.n_domains = n_domains
        self.batchnorm = batchnorm
        spec = MlpSpec([data_dim, *hidden, 2 * latent_dim], activation, init_scale)
        self.nets = [Mlp(spec, rng, name=f"encoder.{d}") for d in range(n_domains)]
        self.bn_states = [BatchNormState(np.zeros(latent_dim), np.ones(latent_dim))
                          for _ in range(n_domains)]

    def _check_domain(self, d: int):
        if not 0 <= d < self.n_domains:
            raise IndexError(f"unknown domain index {d} (have {self.n_domains})")

    def encode(self, x, d: int, mode: str = "train") -> tuple[Tensor, Tensor]:
        self._check_domain(d)
        out = self.nets[d](x)
        k = self.latent_dim
        mu = out[:, :k]
        logvar = ad.clip(out[:, k:], LOGVAR_MIN, LOGVAR_MAX)
        if self.batchnorm:
            mu = batchnorm_no_affine(mu, mode, self.bn_states[d])
        return mu, logvar

    __call__ = encode

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets for p in net.parameters()]


class GaussianDecoder:
    """One MLP per domain mapping latents to the mean of ``N(x; mean, obs_var I)``."""

    def __init__(self, latent_dim: int, data_dim: int, hidden: list[int], n_domains: int,
                 rng: np.random.Generator, activation: str = "relu", init_scale: float = 1.0,
                 obs_var: float = 0.1):
        if obs_var <= 0:
            raise ValueError("observation variance must be positive")
        self.latent_dim = latent_dim
        self.data_dim = data_dim
        self.n_domains = n_domains
        self.obs_var = float(obs_var)
        spec = MlpSpec([latent_dim, *hidden, data_dim], activation, init_scale)
        self.nets = [Mlp(spec, rng, name=f"decoder.{d}") for d in range(n_domains)]

    def decode(self, z, d: int) -> Tensor:
        if not 0 <= d < self.n_domains:
            raise IndexError(f"unknown domain index {d} (have {self.n_domains})")
        return self.nets[d](z)

    __call__ = decode

    def parameters(self) -> list[Tensor]:
        return [p for net in self.nets for p in net.parameters()]


_SIGMA_FEATURES = {"log": np.log, "linear": lambda s: s, "square": np.square}


class ScoreNetwork:
    """MLP ``(z, sigma feature) -> score``.

    With ``output_scaling="inv_sigma"`` the raw MLP output is divided by sigma,
    which keeps the network's targets O(1) across noise levels.
    """

    def __init__(self, latent_dim: int, hidden: list[int], rng: np.random.Generator,
                 activation: str = "relu", init_scale: float = 1.0,
                 output_scaling: str = "none", sigma_feature: str = "linear"):
        if output_scaling not in ("none", "inv_sigma"):
            raise ValueError(f"unknown output scaling {output_scaling!r}")
        if sigma_feature not in ("log", "linear", "square"):
            raise ValueError(f"unknown sigma feature {sigma_feature!r}")
        self.latent_dim = latent_dim
        self.output_scaling = output_scaling
        self.sigma_feature = sigma_feature
        self.net = Mlp(MlpSpec([latent_dim + 1, *hidden, latent_dim], activation, init_scale),
                       rng, name="score")

    def score(self, z, sigma) -> Tensor:
        z = ad.as_tensor(z)
        n = z.shape[0]
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (n,))
        if np.any(sig <= 0):
            raise ValueError("sigma must be positive")
        feat = Tensor(_SIGMA_FEATURES[self.sigma_feature](sig)[:, None])
        out = self.net(ad.concat([z, feat], axis=1))
        if self.output_scaling == "inv_sigma":
            out = out * Tensor((1.0 / sig)[:, None] * np.ones((1, self.latent_dim)))
        return out

    __call__ = score

    def score_numpy(self, z: np.ndarray, sigma) -> np.ndarray:
        with ad.no_grad():
            return self.score(z, sigma).data

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    def zero_(self) -> None:
        for p in self.parameters():
            p.data[...] = 0.0


# checkpoints ----------------------------------------------------------------

def named_parameters(**groups) -> dict[str, Tensor]:
    """Flatten ``group=module`` pairs into ``{"group.param_name": tensor}``."""
    out: dict[str, Tensor] = {}
    for group, module in groups.items():
        if module is None:
            continue
        for i, p in enumerate(module.parameters()):
            key = f"{group}.{p.name or i}"
            if key in out:
                raise ValueError(f"duplicate parameter name {key}")
            out[key] = p
    return out


def save_checkpoint(path, params: dict[str, Tensor], extra: dict[str, np.ndarray] | None = None) -> None:
    """Write a versioned text checkpoint.

    Layout: a ``scoredm-checkpoint <version>`` line, then per entry a line
    ``<name> <ndim> <dim...>`` followed by one line of row-major float64 values
    written with ``repr`` (exact round trip). ``extra`` stores non-trainable
    arrays (e.g. batch-norm running statistics) in the same layout.
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    entries = {k: v.data for k, v in params.items()}
    for k, v in (extra or {}).items():
        entries[f"buffer:{k}"] = np.asarray(v, dtype=np.float64)
    for name, arr in entries.items():
        if " " in name:
            raise ValueError(f"parameter names may not contain spaces: {name!r}")
        lines.append(" ".join([name, str(arr.ndim), *map(str, arr.shape)]))
        lines.append(" ".join(repr(float(v)) for v in arr.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text().splitlines()
    if not text:
        raise ValueError("empty checkpoint")
    head = text[0].split()
    if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
        raise ValueError("not a scoredm checkpoint")
    if int(head[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {head[1]}")
    out: dict[str, np.ndarray] = {}
    body = text[1:]
    if len(body) % 2:
        raise ValueError("truncated checkpoint")
    for meta, values in zip(body[::2], body[1::2]):
        parts = meta.split()
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(s) for s in parts[2:2 + ndim])
        flat = np.array([float(v) for v in values.split()], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"size mismatch for {name}")
        out[name] = flat.reshape(shape)
    return out


def restore_parameters(params: dict[str, Tensor], state: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in state:
            raise KeyError(f"checkpoint is missing {name}")
        if state[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
        p.data[...] = state[name]
