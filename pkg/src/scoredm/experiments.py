"""Experiment drivers behind the ``dm`` command line.

Each ``run_*`` function takes a validated :class:`~scoredm.config.ExperimentConfig`
and an output directory, writes its CSVs there and returns an in-memory result
so tests and narrative scripts can use the drivers without going through files.
"""

from __future__ import annotations

import glob
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from . import gradcheck
from .config import ConfigError, ExperimentConfig
from .csvio import parse_float, read_csv, write_csv
from .data import (LabeledDomainDataset, NestedDSpec, TabularSchema, TabularTask, gen_biased_tabular,
                   gen_mog_target, gen_nested_d, load_tabular_csv)
from .metrics import MlpClassifier, accuracy, auroc_separation, dp_gap, nll_under_prior
from .networks import (GaussianDecoder, GaussianEncoder, ScoreNetwork, load_checkpoint,
                       named_parameters, restore_parameters, save_checkpoint)
from .priors import AnalyticPrior, BlendedScorePrior, Gaussian, LearnableMixture
from .trainer import (TRACE_COLUMNS, Model, RunTrace, TrainingDiverged, alternate_train,
                      pretrain_score, stability_run)

logger = logging.getLogger(__name__)

TRACE_UNITS = {"step": "count", "recon": "nats/sample", "entropy": "nats/sample",
               "xent": "nats/sample (surrogate in sfs mode)", "dsm": "loss units", "gw": "squared distance",
               "nll": "nats/sample", "wall_ms": "milliseconds"}


# building blocks --------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig, seed: int, n_per_class: int | None = None):
    """Return ``(dataset, extra)`` for the configured data kind.

    ``extra`` is the fixed analytic prior for ``mog`` data and the
    :class:`TabularTask` for tabular data, otherwise ``None``.
    """
    d = cfg["data"]
    kind = d["kind"]
    if kind == "nested_d":
        spec = NestedDSpec(n_per_class=n_per_class or d["n_per_class"], r_outer=d["r_outer"],
                           r_inner=d["r_inner"], noise=d["noise"], separation=d["separation"], seed=seed)
        return gen_nested_d(spec), None
    if kind == "mog":
        x, prior = gen_mog_target(d["mog_means"], d["mog_var"], n=d["n"], seed=seed)
        ds = LabeledDomainDataset(x, np.zeros(len(x), dtype=np.int64), np.zeros(len(x), dtype=np.int64))
        return ds, prior
    task = load_task(cfg, seed)
    x, y, a = task.split("train")
    return LabeledDomainDataset(x, a, y), task


def load_task(cfg: ExperimentConfig, seed: int) -> TabularTask:
    d = cfg["data"]
    if d["kind"] == "tabular_csv":
        schema = TabularSchema(d["label"], d["protected"], tuple(d["categorical"]), tuple(d["drop"]),
                               d["test_fraction"], seed)
        return load_tabular_csv(d["csv_path"], schema)
    if d["kind"] == "tabular_synthetic":
        return gen_biased_tabular(d["n"], d["n_features"], d["bias"], d["proxy_strength"],
                                  d["test_fraction"], seed)
    raise ConfigError(f"[data] kind {d['kind']!r} is not a tabular task")


def build_model(cfg: ExperimentConfig, data_dim: int, n_domains: int, seed: int,
                prior_kind: str | None = None) -> Model:
    """Encoders, decoders and prior initialised from a seed-derived stream."""
    net = cfg["network"]
    rng = np.random.default_rng([seed, 1])
    k = net["latent_dim"]
    enc = GaussianEncoder(data_dim, k, net["hidden"], n_domains, rng, net["activation"],
                          net["init_scale"], net["batchnorm"])
    dec = GaussianDecoder(k, data_dim, net["hidden"], n_domains, rng, net["activation"],
                          net["init_scale"], net["obs_var"])
    prior_kind = prior_kind or net["prior"]
    sched = cfg.schedule()
    if prior_kind == "gaussian":
        prior = Gaussian.standard(k)
    elif prior_kind == "mog":
        prior = LearnableMixture(net["mog_components"], k, rng)
    else:
        score = ScoreNetwork(k, net["score_hidden"], rng, init_scale=net["init_scale"])
        prior = BlendedScorePrior(score, np.zeros(k), np.ones(k), alpha=net["prior_alpha"],
                                  sigma_min=sched.sigma_min, sigma_max=sched.sigma_max)
    return Model(enc, dec, prior)


def mode_for(prior_kind: str, configured: str) -> str:
    if prior_kind in ("gaussian", "mog"):
        return "analytic-vaub"
    if prior_kind == "lsgm":
        return "lsgm"
    return configured if configured != "analytic-vaub" else "sfs"


def encode_dataset(encoder: GaussianEncoder, ds: LabeledDomainDataset, sample: bool = False,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Posterior means (or one posterior sample) for every row, in dataset order."""
    z = np.zeros((len(ds), encoder.latent_dim))
    with ad.no_grad():
        for d in range(ds.n_domains):
            m = ds.domain == d
            mu, logvar = encoder.encode(ds.x[m], d, mode="eval")
            z[m] = mu.data
            if sample:
                z[m] += np.exp(0.5 * logvar.data) * rng.standard_normal(mu.shape)
    return z


def trace_rows(trace: RunTrace) -> list[list]:
    rows = []
    for r in trace.rows():
        r = list(r)
        if np.isnan(r[-1]):
            r[-1] = None  # wall_ms left empty when timing is off
        rows.append(r)
    return rows


def write_trace(path, trace: RunTrace, cfg: ExperimentConfig, command: str) -> Path:
    return write_csv(path, TRACE_COLUMNS, trace_rows(trace), command, cfg.config_hash(), TRACE_UNITS)


def model_parameters(model: Model) -> dict:
    groups = {"encoder": model.encoder, "decoder": model.decoder}
    if isinstance(model.prior, LearnableMixture):
        groups["prior"] = model.prior
    if model.score_net is not None:
        groups["score"] = model.score_net
    return named_parameters(**groups)


def model_buffers(model: Model) -> dict[str, np.ndarray]:
    out = {}
    for d, st in enumerate(model.encoder.bn_states):
        out[f"bn{d}.mean"] = st.running_mean
        out[f"bn{d}.var"] = st.running_var
    if isinstance(model.prior, BlendedScorePrior):
        out["prior.mean"] = model.prior.mean
        out["prior.var"] = model.prior.var
    return out


def restore_model(model: Model, state: dict[str, np.ndarray]) -> None:
    restore_parameters(model_parameters(model), state)
    for d, st in enumerate(model.encoder.bn_states):
        st.running_mean = state[f"buffer:bn{d}.mean"].copy()
        st.running_var = state[f"buffer:bn{d}.var"].copy()
    if isinstance(model.prior, BlendedScorePrior):
        model.prior.mean = state["buffer:prior.mean"].copy()
        model.prior.var = state["buffer:prior.var"].copy()


# gradcheck -----------------------------------------------------------------------

def run_gradcheck(cfg: ExperimentConfig, out: Path) -> list[gradcheck.CheckResult]:
    g = cfg["gradcheck"]
    results = gradcheck.run_all(g["n_seeds"], g["tolerance"], g["fd_tolerance"], g["fd_cases"],
                                g["lsgm_samples"], g["corrupt_detach"])
    write_csv(Path(out) / "gradcheck.csv", ["check", "case", "seed", "error", "tolerance", "passed"],
              [[r.check, r.case, r.seed, r.error, r.tolerance, r.passed] for r in results],
              "gradcheck", cfg.config_hash(),
              {"error": "relative L2 (lsgm_expectation: standard errors)", "tolerance": "same as error"})
    summary = {}
    for r in results:
        s = summary.setdefault((r.check, r.case), {"n": 0, "failed": 0, "max_error": 0.0, "tol": r.tolerance})
        s["n"] += 1
        s["failed"] += not r.passed
        s["max_error"] = max(s["max_error"], r.error) if np.isfinite(r.error) else float("inf")
    write_csv(Path(out) / "gradcheck_summary.csv", ["check", "case", "cases", "failed", "max_error", "tolerance"],
              [[k[0], k[1], v["n"], v["failed"], v["max_error"], v["tol"]] for k, v in summary.items()],
              "gradcheck", cfg.config_hash())
    return results


# stability ---------------------------------------------------------------------------

@dataclass
class StabilityCell:
    mode: str
    sigma_min: float
    seed: int
    trace: RunTrace
    initial_nll: float
    max_nll: float
    final_nll: float
    diverged: bool
    divergence_step: int | None

    @property
    def finite(self) -> bool:
        cols = ("recon", "entropy", "xent", "nll")
        return all(np.all(np.isfinite(self.trace.column(c))) for c in cols)


def summarize_stability(mode, sigma_min, seed, trace: RunTrace, factor: float) -> StabilityCell:
    nll = trace.column("nll")
    initial = float(nll[0]) if len(nll) else float("nan")
    bad = ~np.isfinite(nll) | (nll > factor * abs(initial))
    step = int(np.argmax(bad)) if bad.any() else None
    finite = nll[np.isfinite(nll)]
    max_nll = float(np.max(nll)) if len(nll) and np.all(np.isfinite(nll)) else float("inf")
    return StabilityCell(mode, sigma_min, seed, trace, initial, max_nll,
                         float(finite[-1]) if len(finite) else float("nan"), step is not None, step)


def run_stability(cfg: ExperimentConfig, out: Path, sigma_mins=None, modes=None) -> list[StabilityCell]:
    """Pretrain one score model per ``sigma_min`` on the fixed mixture, then train
    encoder/decoder against it in each mode for every seed."""
    st = cfg["stability"]
    sigma_mins = st["sigma_mins"] if sigma_mins is None else sigma_mins
    modes = st["modes"] if modes is None else modes
    ds, prior = load_dataset(cfg.with_overrides(data={"kind": "mog"}), st["pretrain_seed"])
    data = ds.to_domain_data()
    net = cfg["network"]
    if net["latent_dim"] != prior.dim:
        raise ConfigError(f"[network] latent_dim must equal the mixture dimension {prior.dim}")
    base = cfg.schedule()
    cells: list[StabilityCell] = []
    rows = []
    for smin in sigma_mins:
        sched = type(base)(smin, base.sigma_max, base.n_levels)
        score = ScoreNetwork(prior.dim, net["score_hidden"], np.random.default_rng([st["pretrain_seed"], 2]),
                             init_scale=net["init_scale"])
        score, final_dsm = pretrain_score(prior, score, sched, st["pretrain_steps"], st["pretrain_seed"],
                                          st["pretrain_batch"], st["pretrain_lr"], cfg["train"]["dsm_weighting"])
        logger.info("pretrained score for sigma_min=%g (final DSM %.4f)", smin, final_dsm)
        for seed in cfg.seeds:
            for mode in modes:
                model = build_model(cfg, ds.x.shape[1], 1, seed, prior_kind="gaussian")
                tcfg = cfg.train_config(seed, schedule=sched, mode=mode)
                trace = stability_run(data, model.encoder, model.decoder, prior, score, mode, tcfg)
                write_trace(Path(out) / f"stability_{mode}_sigma{smin:g}_seed{seed}.csv", trace, cfg,
                            "stability")
                cell = summarize_stability(mode, smin, seed, trace, st["divergence_factor"])
                cells.append(cell)
                rows.append([mode, smin, seed, len(trace), cell.initial_nll, cell.max_nll, cell.final_nll,
                             cell.diverged, cell.divergence_step, final_dsm])
    write_csv(Path(out) / "stability_summary.csv",
              ["mode", "sigma_min", "seed", "steps", "initial_nll", "max_nll", "final_nll", "diverged",
               "divergence_step", "pretrain_dsm"], rows, "stability", cfg.config_hash(),
              {"initial_nll": "nats/sample", "max_nll": "nats/sample", "final_nll": "nats/sample"})
    return cells


# separation ------------------------------------------------------------------------

@dataclass
class SeparationRow:
    prior: str
    n: int
    seed: int
    auroc: float
    status: str = "ok"


def train_and_separate(cfg: ExperimentConfig, prior_kind: str, n: int, seed: int,
                       latents_path: Path | None = None) -> SeparationRow:
    ds, _ = load_dataset(cfg.with_overrides(data={"kind": "nested_d"}), seed, n_per_class=n)
    model = build_model(cfg, ds.x.shape[1], ds.n_domains, seed,
                        prior_kind="score" if prior_kind == "lsgm" else prior_kind)
    tcfg = cfg.train_config(seed, mode=mode_for(prior_kind, cfg["train"]["mode"]))
    try:
        alternate_train(ds.to_domain_data(), model, tcfg)
    except TrainingDiverged as exc:
        logger.warning("separation cell %s/n=%d/seed=%d diverged at step %d", prior_kind, n, seed, exc.step)
        return SeparationRow(prior_kind, n, seed, float("nan"), f"diverged@{exc.step}")
    z = encode_dataset(model.encoder, ds)
    if not np.all(np.isfinite(z)):
        return SeparationRow(prior_kind, n, seed, float("nan"), "nonfinite-latents")
    if latents_path is not None:
        write_latents(latents_path, ds, z, cfg, "separation")
    return SeparationRow(prior_kind, n, seed, auroc_separation(z, ds.label, seed=seed).auroc)


def write_latents(path, ds: LabeledDomainDataset, z: np.ndarray, cfg: ExperimentConfig, command: str):
    cols = ["sample_id", "domain", "label"] + [f"z{i}" for i in range(z.shape[1])]
    rows = [[i, int(ds.domain[i]), int(ds.label[i]), *z[i]] for i in range(len(ds))]
    return write_csv(path, cols, rows, command, cfg.config_hash(), {"z0": "latent units"})


def run_separation(cfg: ExperimentConfig, out: Path, priors=None, sizes=None) -> list[SeparationRow]:
    sp = cfg["separation"]
    priors = sp["priors"] if priors is None else priors
    sizes = sp["sizes"] if sizes is None else sizes
    rows = []
    for prior_kind in priors:
        for n in sizes:
            for seed in cfg.seeds:
                lp = Path(out) / f"latents_{prior_kind}_n{n}_seed{seed}.csv" if sp["dump_latents"] else None
                rows.append(train_and_separate(cfg, prior_kind, n, seed, lp))
    write_csv(Path(out) / "separation.csv", ["prior", "n", "seed", "auroc", "status"],
              [[r.prior, r.n, r.seed, r.auroc, r.status] for r in rows], "separation", cfg.config_hash(),
              {"n": "samples per class per domain", "auroc": "probability"})
    summary = []
    for prior_kind in priors:
        for n in sizes:
            vals = np.array([r.auroc for r in rows if r.prior == prior_kind and r.n == n])
            ok = vals[np.isfinite(vals)]
            summary.append([prior_kind, n, len(vals), len(ok),
                            float(ok.mean()) if len(ok) else float("nan"),
                            float(ok.std()) if len(ok) else float("nan")])
    write_csv(Path(out) / "separation_summary.csv", ["prior", "n", "runs", "finite", "auroc_mean", "auroc_std"],
              summary, "separation", cfg.config_hash())
    return rows


# fairness ----------------------------------------------------------------------------

@dataclass
class FairnessResult:
    rows: list[list] = field(default_factory=list)
    spearman: dict = field(default_factory=dict)

    def mean_dp(self, method: str, beta=None, lambda_gw=None) -> float:
        vals = [r[5] for r in self.rows if r[0] == method and (beta is None or r[1] == beta)
                and (lambda_gw is None or r[2] == lambda_gw)]
        return float(np.mean(vals))

    def mean_accuracy(self, method: str, beta=None, lambda_gw=None) -> float:
        vals = [r[4] for r in self.rows if r[0] == method and (beta is None or r[1] == beta)
                and (lambda_gw is None or r[2] == lambda_gw)]
        return float(np.mean(vals))


FAIRNESS_COLUMNS = ["method", "beta", "lambda_gw", "seed", "accuracy", "dp_gap"]


def stochastic_encoding(encoder, x, a, samples: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Stack ``samples`` posterior draws per row; returns latents and the row index of each draw."""
    ds = LabeledDomainDataset(x, a, np.zeros(len(x), dtype=np.int64))
    zs = [encode_dataset(encoder, ds, sample=True, rng=rng) for _ in range(samples)]
    return np.concatenate(zs), np.tile(np.arange(len(x)), samples)


def fairness_cell(cfg: ExperimentConfig, task: TabularTask, beta: float, lambda_gw: float, seed: int):
    fc = cfg["fairness"]
    model = build_model(cfg, task.x.shape[1], 2, seed)
    c2 = cfg.with_overrides(loss={"beta": beta, "lambda_gw": lambda_gw})
    tcfg = c2.train_config(seed, mode=mode_for(cfg["network"]["prior"], cfg["train"]["mode"]))
    alternate_train(task.domain_data("train"), model, tcfg)
    rng = np.random.default_rng([seed, 3])
    xtr, ytr, atr = task.split("train")
    xte, yte, ate = task.split("test")
    ztr, itr = stochastic_encoding(model.encoder, xtr, atr, fc["latent_samples"], rng)
    zte, _ = stochastic_encoding(model.encoder, xte, ate, 1, rng)
    clf = MlpClassifier(ztr.shape[1], fc["classifier_hidden"], seed, epochs=fc["classifier_epochs"])
    pred = clf.fit(ztr, ytr[itr]).predict(zte)
    return accuracy(pred, yte), dp_gap(pred, ate)


def run_fairness(cfg: ExperimentConfig, out: Path) -> FairnessResult:
    """Aligned representations over the (beta, lambda_gw) grid plus the unfair baseline."""
    fc = cfg["fairness"]
    res = FairnessResult()
    for seed in cfg.seeds:
        task = load_task(cfg, seed)
        xtr, ytr, _ = task.split("train")
        xte, yte, ate = task.split("test")
        clf = MlpClassifier(xtr.shape[1], fc["classifier_hidden"], seed,
                            epochs=fc["classifier_epochs"] * fc["latent_samples"])
        pred = clf.fit(xtr, ytr).predict(xte)
        res.rows.append(["unfair", None, None, seed, accuracy(pred, yte), dp_gap(pred, ate)])
        for lam in fc["lambda_gws"]:
            for beta in fc["betas"]:
                try:
                    acc, gap = fairness_cell(cfg, task, beta, lam, seed)
                except TrainingDiverged as exc:
                    logger.warning("fairness cell beta=%g lambda=%g seed=%d diverged at %d", beta, lam, seed,
                                   exc.step)
                    acc, gap = float("nan"), float("nan")
                res.rows.append(["aligned", beta, lam, seed, acc, gap])
    write_csv(Path(out) / "fairness.csv", FAIRNESS_COLUMNS, res.rows, "fairness", cfg.config_hash(),
              {"accuracy": "fraction", "dp_gap": "probability difference"})
    summary = [["unfair", None, None, res.mean_accuracy("unfair"), res.mean_dp("unfair"), None]]
    for lam in fc["lambda_gws"]:
        means = [res.mean_dp("aligned", b, lam) for b in fc["betas"]]
        # undefined (nan) for a single beta or constant gaps
        rho = float(spearmanr(fc["betas"], means)[0]) if len(fc["betas"]) > 1 and np.ptp(means) > 0 \
            else float("nan")
        res.spearman[lam] = rho
        for b, m in zip(fc["betas"], means):
            summary.append(["aligned", b, lam, res.mean_accuracy("aligned", b, lam), m, rho])
    write_csv(Path(out) / "fairness_summary.csv",
              ["method", "beta", "lambda_gw", "accuracy_mean", "dp_gap_mean", "spearman_beta_dp"],
              summary, "fairness", cfg.config_hash())
    return res


# train / eval --------------------------------------------------------------------------

def run_train(cfg: ExperimentConfig, out: Path) -> tuple[Model, RunTrace]:
    seed = cfg.seeds[0]
    ds, _ = load_dataset(cfg, seed)
    model = build_model(cfg, ds.x.shape[1], ds.n_domains, seed)
    tcfg = cfg.train_config(seed, mode=mode_for(cfg["network"]["prior"], cfg["train"]["mode"]))
    out = Path(out)
    try:
        trace = alternate_train(ds.to_domain_data(), model, tcfg)
    except TrainingDiverged as exc:
        if exc.trace is not None:
            write_trace(out / "trace.csv", exc.trace, cfg, "train")
        raise
    write_trace(out / "trace.csv", trace, cfg, "train")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.txt", model_parameters(model), model_buffers(model))
    return model, trace


def run_eval(cfg: ExperimentConfig, out: Path) -> dict[str, float]:
    seed = cfg.seeds[0]
    out = Path(out)
    ckpt = Path(cfg["eval"]["checkpoint"] or out / "checkpoint.txt")
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    ds, fixed_prior = load_dataset(cfg, seed)
    model = build_model(cfg, ds.x.shape[1], ds.n_domains, seed)
    restore_model(model, load_checkpoint(ckpt))
    z = encode_dataset(model.encoder, ds)
    write_latents(out / "latents.csv", ds, z, cfg, "eval")
    metrics: dict[str, float] = {}
    if len(np.unique(ds.label)) == 2:
        metrics["auroc_label"] = auroc_separation(z, ds.label, seed=seed).auroc
    if ds.n_domains == 2:
        metrics["auroc_domain"] = auroc_separation(z, ds.domain, seed=seed).auroc
    prior = fixed_prior if isinstance(fixed_prior, AnalyticPrior) else model.prior
    if isinstance(prior, LearnableMixture):
        prior = prior.snapshot()
    if isinstance(prior, AnalyticPrior):
        metrics["nll"] = nll_under_prior(z, prior)
    write_csv(out / "metrics.csv", ["metric", "value"], sorted(metrics.items()), "eval", cfg.config_hash())
    return metrics


# plot data --------------------------------------------------------------------------------

def aggregate_traces(paths, columns=None) -> tuple[list[str], list[list]]:
    """Per-step mean/std across traces plus ``log10`` of the mean (empty when not positive)."""
    tables = []
    for p in paths:
        cols, rows, _ = read_csv(p)
        if "step" not in cols:
            raise ValueError(f"{p}: trace has no 'step' column")
        try:
            arr = np.array([[parse_float(c) for c in r] for r in rows], dtype=np.float64).reshape(len(rows),
                                                                                                   len(cols))
        except ValueError as exc:
            raise ValueError(f"{p}: malformed trace ({exc})") from None
        tables.append((cols, arr))
    if not tables:
        raise ValueError("no trace files given")
    cols0 = tables[0][0]
    for cols, _ in tables[1:]:
        if cols != cols0:
            raise ValueError("traces have different columns")
    value_cols = [c for c in cols0 if c != "step"] if not columns else list(columns)
    for c in value_cols:
        if c not in cols0:
            raise ValueError(f"unknown trace column {c!r}")
    steps = sorted({int(s) for _, arr in tables for s in arr[:, cols0.index("step")]})
    header = ["step", "n_traces"]
    for c in value_cols:
        header += [f"{c}_mean", f"{c}_std", f"{c}_log10"]
    out = []
    for s in steps:
        present = [arr[arr[:, cols0.index("step")] == s][0] for _, arr in tables
                   if np.any(arr[:, cols0.index("step")] == s)]
        row: list = [s, len(present)]
        for c in value_cols:
            v = np.array([r[cols0.index(c)] for r in present])
            if np.all(np.isnan(v)):
                row += [None, None, None]
                continue
            m = float(np.mean(v))
            sd = float(np.std(v))
            row += [m, sd, float(np.log10(m)) if np.isfinite(m) and m > 0 else None]
        out.append(row)
    return header, out


def run_plotdata(cfg: ExperimentConfig, out: Path, base_dir: Path | None = None) -> Path:
    pats = cfg["plotdata"]["inputs"]
    if base_dir is None:
        base_dir = Path.cwd() if cfg.source.startswith("<") else Path(cfg.source).parent
    base = Path(base_dir)
    paths = []
    for pat in pats:
        full = pat if Path(pat).is_absolute() else str(base / pat)
        hits = sorted(glob.glob(full))
        if not hits:
            raise ValueError(f"no trace files match {pat!r}")
        paths.extend(hits)
    header, rows = aggregate_traces(paths, cfg["plotdata"]["columns"])
    return write_csv(Path(out) / "plotdata.csv", header, rows, "plotdata", cfg.config_hash())
