"""Strict INI-style experiment configuration.

Every section and key must be known; values are Python literals (numbers,
strings, lists, booleans) parsed with :func:`ast.literal_eval`, falling back
to a bare string. Values are type-checked against the defaults below, so a
typo such as ``sigma_mn`` or ``steps = 1e3`` is rejected before any compute.

The config hash is a SHA-256 over the fully resolved configuration (defaults
included), so two files that resolve to the same settings share a hash.
"""

from __future__ import annotations

import ast
import configparser
import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .objectives import LossConfig
from .trainer import NoiseSchedule, TrainConfig

KINDS = ("gradcheck", "stability", "separation", "fairness", "train", "eval", "plotdata")

DEFAULTS: dict[str, dict] = {
    "experiment": {"kind": "", "seeds": [0], "out": "runs", "record_timing": False},
    "data": {
        "kind": "nested_d",          # nested_d | mog | tabular_synthetic | tabular_csv
        "n_per_class": 100, "r_outer": 2.0, "r_inner": 1.0, "noise": 0.05, "separation": 6.0,
        "n": 1000, "mog_means": [[-1.5, -1.5], [-1.5, 1.5], [1.5, -1.5], [1.5, 1.5]], "mog_var": 0.2,
        "n_features": 6, "bias": 1.5, "proxy_strength": 2.0, "test_fraction": 0.3,
        "csv_path": "", "label": "", "protected": "", "categorical": [], "drop": [],
    },
    "network": {
        "latent_dim": 2, "hidden": [64, 64], "score_hidden": [64, 64], "activation": "relu",
        "init_scale": 1.0, "batchnorm": False, "obs_var": 0.1,
        "prior": "score",            # score | gaussian | mog
        "mog_components": 4, "prior_alpha": 0.05,
    },
    "loss": {"beta": 1.0, "lambda_gw": 0.0, "entropy": "sample"},
    "train": {
        "steps": 1500, "batch_size": 128, "vae_lr": 1e-3, "score_lr": 1e-3, "score_loops": 5,
        "mode": "sfs", "sfs_noise": True, "dsm_weighting": "sigma2", "dsm_batch_size": 0,
        "gw_pairs": 0, "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8,
    },
    "schedule": {"sigma_min": 0.01, "sigma_max": 1.0, "n_levels": 10},
    "gradcheck": {"n_seeds": 20, "tolerance": 1e-5, "fd_tolerance": 1e-4, "fd_cases": 50,
                  "lsgm_samples": 20000, "corrupt_detach": False},
    "stability": {"sigma_mins": [0.001, 0.01, 0.1, 0.2], "modes": ["sfs", "lsgm"],
                  "pretrain_steps": 4000, "pretrain_batch": 2048, "pretrain_lr": 3e-3,
                  "pretrain_seed": 0, "divergence_factor": 10.0},
    "separation": {"priors": ["gaussian", "mog", "score", "lsgm"], "sizes": [20, 100, 500],
                   "dump_latents": True},
    "fairness": {"betas": [0.1, 0.2, 0.5, 1.0], "lambda_gws": [0.0], "latent_samples": 5,
                 "classifier_epochs": 40, "classifier_hidden": 64},
    "eval": {"checkpoint": ""},
    "plotdata": {"inputs": [], "columns": []},
}

# string-valued keys restricted to a fixed vocabulary
CHOICES = {
    ("experiment", "kind"): KINDS,
    ("data", "kind"): ("nested_d", "mog", "tabular_synthetic", "tabular_csv"),
    ("network", "activation"): ("relu", "softplus", "tanh"),
    ("network", "prior"): ("score", "gaussian", "mog"),
    ("loss", "entropy"): ("sample", "closed_form"),
    ("train", "mode"): ("sfs", "lsgm", "analytic-vaub"),
    ("train", "dsm_weighting"): ("none", "sigma2"),
}


class ConfigError(ValueError):
    """Raised for unknown sections/keys, wrong types or invalid values."""


def _parse_value(raw: str):
    text = raw.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(section: str, key: str, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


@dataclass
class ExperimentConfig:
    values: dict
    source: str = "<defaults>"

    @property
    def kind(self) -> str:
        return self.values["experiment"]["kind"]

    @property
    def seeds(self) -> list[int]:
        return list(self.values["experiment"]["seeds"])

    def section(self, name: str) -> dict:
        return self.values[name]

    def __getitem__(self, name: str) -> dict:
        return self.values[name]

    def config_hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with ``section={key: value}`` overrides (validated like file input)."""
        vals = copy.deepcopy(self.values)
        for sec, kv in sections.items():
            if sec not in vals:
                raise ConfigError(f"unknown section [{sec}]")
            for k, v in kv.items():
                if k not in DEFAULTS[sec]:
                    raise ConfigError(f"unknown key {k!r} in section [{sec}]")
                vals[sec][k] = _coerce(sec, k, v, DEFAULTS[sec][k])
        cfg = ExperimentConfig(vals, self.source)
        validate(cfg)
        return cfg

    def loss_config(self) -> LossConfig:
        lo, net = self["loss"], self["network"]
        return LossConfig(beta=lo["beta"], lambda_gw=lo["lambda_gw"], obs_var=net["obs_var"],
                          entropy=lo["entropy"])

    def schedule(self) -> NoiseSchedule:
        s = self["schedule"]
        return NoiseSchedule(s["sigma_min"], s["sigma_max"], s["n_levels"])

    def train_config(self, seed: int, **changes) -> TrainConfig:
        t = self["train"]
        kw = dict(steps=t["steps"], batch_size=t["batch_size"], vae_lr=t["vae_lr"],
                  score_lr=t["score_lr"], score_loops=t["score_loops"], adam_beta1=t["adam_beta1"],
                  adam_beta2=t["adam_beta2"], adam_eps=t["adam_eps"], seed=seed, mode=t["mode"],
                  loss=self.loss_config(), schedule=self.schedule(), sfs_noise=t["sfs_noise"],
                  dsm_weighting=t["dsm_weighting"], dsm_batch_size=t["dsm_batch_size"],
                  gw_pairs=t["gw_pairs"], record_timing=self["experiment"]["record_timing"])
        kw.update(changes)
        return TrainConfig(**kw)


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    for (sec, key), allowed in CHOICES.items():
        if v[sec][key] not in allowed:
            raise ConfigError(f"[{sec}] {key} must be one of {list(allowed)}, got {v[sec][key]!r}")
    seeds = v["experiment"]["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("[experiment] seeds must be a non-empty list of non-negative integers")
    try:
        cfg.loss_config()
        sched = cfg.schedule()
        cfg.train_config(seeds[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if v["network"]["latent_dim"] < 1:
        raise ConfigError("[network] latent_dim must be >= 1")
    for m in v["stability"]["modes"]:
        if m not in ("sfs", "lsgm", "analytic-vaub"):
            raise ConfigError(f"[stability] unknown mode {m!r}")
    for s in v["stability"]["sigma_mins"]:
        if not 0 < s <= sched.sigma_max:
            raise ConfigError(f"[stability] sigma_min {s} must lie in (0, sigma_max]")
    for p in v["separation"]["priors"]:
        if p not in ("gaussian", "mog", "score", "lsgm"):
            raise ConfigError(f"[separation] unknown prior {p!r}")
    for b in v["fairness"]["betas"]:
        if not 0 < b <= 1:
            raise ConfigError(f"[fairness] beta {b} must lie in (0, 1]")
    if v["data"]["kind"] == "tabular_csv" and not (v["data"]["csv_path"] and v["data"]["label"]
                                                    and v["data"]["protected"]):
        raise ConfigError("[data] tabular_csv needs csv_path, label and protected")


def from_dict(sections: dict, source: str = "<dict>") -> ExperimentConfig:
    vals = copy.deepcopy(DEFAULTS)
    for sec, kv in sections.items():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown section [{sec}]")
        for k, raw in kv.items():
            if k not in DEFAULTS[sec]:
                raise ConfigError(f"unknown key {k!r} in section [{sec}]")
            vals[sec][k] = _coerce(sec, k, raw, DEFAULTS[sec][k])
    cfg = ExperimentConfig(vals, source)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises :class:`ConfigError` on any problem."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are not silently folded
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    sections = {sec: {k: _parse_value(v) for k, v in parser.items(sec)} for sec in parser.sections()}
    return from_dict(sections, str(path))
