"""Synthetic generators and tabular ingestion.

* nested "D" shapes in two mirrored domains (label separation experiment),
* Gaussian-mixture targets for the stability comparison,
* a synthetic biased tabular task and a generic CSV loader for fairness runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .priors import Gaussian, MixtureOfGaussians
from .trainer import DomainData


@dataclass
class LabeledDomainDataset:
    """Rows of ``x`` with integer ``domain`` (contiguous from 0) and ``label`` columns."""

    x: np.ndarray
    domain: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        if self.x.ndim != 2 or len(self.x) != len(self.domain) or len(self.x) != len(self.label):
            raise ValueError("x, domain and label must have matching lengths (x is 2-D)")
        present = np.unique(self.domain)
        if len(present) == 0 or not np.array_equal(present, np.arange(len(present))):
            raise ValueError("domain indices must be contiguous from 0 and every domain non-empty")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_domains(self) -> int:
        return int(self.domain.max()) + 1

    def domain_view(self, d: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.domain == d
        return self.x[mask], self.label[mask]

    def to_domain_data(self) -> DomainData:
        views = [self.domain_view(d) for d in range(self.n_domains)]
        return DomainData([v[0] for v in views], [v[1] for v in views])


# nested D ------------------------------------------------------------------

@dataclass
class NestedDSpec:
    """Two nested 'D' curves per domain.

    The outer D (label 1) has radius ``r_outer``; the inner D (label 2) has
    radius ``r_inner`` and is shifted inward by half the radius gap so it sits
    inside the outer one. Domain 0 opens rightward (chord on the left); domain 1
    is its mirror image about the vertical axis, translated by ``separation``
    along x. With ``couple_domains`` both domains reuse the same random draws.
    """

    n_per_class: int = 100
    r_outer: float = 2.0
    r_inner: float = 1.0
    noise: float = 0.05
    flip: bool = True
    separation: float = 6.0
    seed: int = 0
    couple_domains: bool = False

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def d_curve(t: np.ndarray, radius: float, x_offset: float = 0.0) -> np.ndarray:
    """Map arc-length fractions ``t`` in [0, 1) to points on a rightward-opening D.

    The closed curve is the vertical chord ``x = x_offset, |y| <= r`` followed by
    the semicircle of radius ``r`` centred at ``(x_offset, 0)`` with ``x >= x_offset``.
    """
    t = np.asarray(t, dtype=np.float64)
    arc = np.pi * radius
    total = arc + 2.0 * radius
    s = t * total
    out = np.empty((len(t), 2))
    on_chord = s < 2.0 * radius
    out[on_chord, 0] = x_offset
    out[on_chord, 1] = s[on_chord] - radius
    ang = (s[~on_chord] - 2.0 * radius) / radius  # 0..pi from top to bottom
    out[~on_chord, 0] = x_offset + radius * np.sin(ang)
    out[~on_chord, 1] = radius * np.cos(ang)
    return out


def distance_to_d_curve(points: np.ndarray, radius: float, x_offset: float = 0.0) -> np.ndarray:
    """Euclidean distance from each point to the D curve of :func:`d_curve`."""
    p = np.asarray(points, dtype=np.float64)
    dx = p[:, 0] - x_offset
    y = p[:, 1]
    chord = np.hypot(dx, np.maximum(np.abs(y) - radius, 0.0))
    rho = np.hypot(dx, y)
    arc_direct = np.abs(rho - radius)
    # nearest point on the arc is radial only when the point is on the arc's side
    endpoint = np.minimum(np.hypot(dx, y - radius), np.hypot(dx, y + radius))
    arc = np.where(dx >= 0, arc_direct, endpoint)
    return np.minimum(chord, arc)


def _domain_cloud(spec: NestedDSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.n_per_class
    inner_offset = 0.5 * (spec.r_outer - spec.r_inner)
    outer = d_curve(rng.uniform(0.0, 1.0, n), spec.r_outer)
    inner = d_curve(rng.uniform(0.0, 1.0, n), spec.r_inner, inner_offset)
    pts = np.concatenate([outer, inner]) + spec.noise * rng.standard_normal((2 * n, 2))
    labels = np.concatenate([np.ones(n, dtype=np.int64), np.full(n, 2, dtype=np.int64)])
    return pts, labels


def gen_nested_d(spec: NestedDSpec) -> LabeledDomainDataset:
    """Nested-D dataset with ``4 * n_per_class`` points (2 domains x 2 labels)."""
    if spec.couple_domains:
        seeds = [spec.seed, spec.seed]
        streams = [np.random.default_rng(s) for s in seeds]
    else:
        streams = [np.random.default_rng([spec.seed, d]) for d in range(2)]
    pts0, lab0 = _domain_cloud(spec, streams[0])
    pts1, lab1 = _domain_cloud(spec, streams[1])
    if spec.flip:
        pts1 = pts1 * np.array([-1.0, 1.0])
    pts1 = pts1 + np.array([spec.separation, 0.0])
    x = np.concatenate([pts0, pts1])
    domain = np.concatenate([np.zeros(len(pts0), dtype=np.int64), np.ones(len(pts1), dtype=np.int64)])
    return LabeledDomainDataset(x, domain, np.concatenate([lab0, lab1]))


# Gaussian-mixture targets -------------------------------------------------------

# default stability target: four well-separated modes on the diagonals
DEFAULT_MOG_MEANS = ((-1.5, -1.5), (-1.5, 1.5), (1.5, -1.5), (1.5, 1.5))
DEFAULT_MOG_VAR = 0.2


def gen_mog_target(means: Sequence[Sequence[float]] = DEFAULT_MOG_MEANS, vars=DEFAULT_MOG_VAR,
                   weights: Sequence[float] | None = None, n: int = 1000, seed: int = 0):
    """Draw ``n`` samples (component first, then Gaussian) and return ``(samples, prior)``.

    A single component returns a :class:`~scoredm.priors.Gaussian` prior.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    k = means.shape[0]
    w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
    if k == 1:
        prior = Gaussian(means[0], np.broadcast_to(np.asarray(vars, dtype=np.float64), means[0].shape))
    else:
        prior = MixtureOfGaussians(w, means, vars)
    rng = np.random.default_rng(seed)
    return prior.sample(n, rng), prior


# tabular -------------------------------------------------------------------------

@dataclass
class TabularTask:
    x: np.ndarray
    y: np.ndarray
    protected: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        for name in ("y", "protected"):
            v = np.asarray(getattr(self, name))
            if not np.all(np.isin(v, (0, 1))):
                raise ValueError(f"{name} must be binary 0/1")
            setattr(self, name, v.astype(np.int64))
        if not np.all(np.isfinite(self.x)):
            raise ValueError("features contain missing or non-finite values")

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.train_idx if part == "train" else self.test_idx
        return self.x[idx], self.y[idx], self.protected[idx]

    def domain_data(self, part: str = "train") -> DomainData:
        x, y, a = self.split(part)
        return DomainData([x[a == g] for g in (0, 1)], [y[a == g] for g in (0, 1)])


def _split_indices(n: int, test_fraction: float, rng: np.random.Generator):
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def gen_biased_tabular(n: int = 1000, n_features: int = 6, bias: float = 1.5, proxy_strength: float = 2.0,
                       test_fraction: float = 0.3, seed: int = 0) -> TabularTask:
    """Synthetic fairness task whose label is correlated with the protected attribute.

    A latent merit ``u ~ N(0, 1)`` drives the label, shifted by ``bias`` for the
    protected group; half the features are noisy copies of ``u`` and the other
    half are noisy proxies of the protected attribute. Features are z-scored with
    train-split statistics.
    """
    if n_features < 2:
        raise ValueError("need at least two features")
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=n)
    u = rng.standard_normal(n)
    y = (u + bias * (a - 0.5) + 0.5 * rng.standard_normal(n) > 0).astype(np.int64)
    k = n_features // 2
    merit = u[:, None] + 0.5 * rng.standard_normal((n, k))
    proxy = proxy_strength * (a[:, None] - 0.5) + rng.standard_normal((n, n_features - k))
    x = np.concatenate([merit, proxy], axis=1)
    train, test = _split_indices(n, test_fraction, rng)
    mu, sd = x[train].mean(axis=0), x[train].std(axis=0)
    x = (x - mu) / np.where(sd > 0, sd, 1.0)
    return TabularTask(x, y, a, train, test, [f"merit{i}" for i in range(k)] +
                       [f"proxy{i}" for i in range(n_features - k)])


@dataclass
class TabularSchema:
    label: str
    protected: str
    categorical: tuple[str, ...] = ()
    drop: tuple[str, ...] = ()
    test_fraction: float = 0.3
    seed: int = 0


def load_tabular_csv(path, schema: TabularSchema) -> TabularTask:
    """Read a preprocessed CSV with a header row.

    Categorical columns are one-hot expanded (sorted category order); all other
    feature columns are parsed as floats and z-scored with train-split
    statistics. Label and protected columns must be 0/1.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = [r for r in reader if any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path} has a header but no rows")
    for col in (schema.label, schema.protected, *schema.categorical, *schema.drop):
        if col not in header:
            raise KeyError(f"column {col!r} not found in {path}")
    pos = {h: i for i, h in enumerate(header)}

    def numeric(col: str) -> np.ndarray:
        out = np.empty(len(rows))
        for r, row in enumerate(rows):
            cell = row[pos[col]].strip() if pos[col] < len(row) else ""
            try:
                out[r] = float(cell)
            except ValueError:
                raise ValueError(f"row {r + 2}, column {col!r}: cannot parse {cell!r}") from None
        if not np.all(np.isfinite(out)):
            raise ValueError(f"column {col!r} has missing or non-finite values")
        return out

    y = numeric(schema.label)
    a = numeric(schema.protected)
    for name, v in (("label", y), ("protected", a)):
        if not np.all(np.isin(v, (0.0, 1.0))):
            raise ValueError(f"{name} column must contain only 0 and 1")
    skip = {schema.label, schema.protected, *schema.drop}
    continuous, names, blocks = [], [], []
    for col in header:
        if col in skip:
            continue
        if col in schema.categorical:
            cells = [row[pos[col]].strip() for row in rows]
            for cat in sorted(set(cells)):
                blocks.append(np.array([c == cat for c in cells], dtype=np.float64)[:, None])
                names.append(f"{col}={cat}")
        else:
            continuous.append(len(names))
            blocks.append(numeric(col)[:, None])
            names.append(col)
    if not blocks:
        raise ValueError("no feature columns")
    x = np.concatenate(blocks, axis=1)
    train, test = _split_indices(len(rows), schema.test_fraction, np.random.default_rng(schema.seed))
    if continuous:
        c = np.array(continuous)
        mu = x[train][:, c].mean(axis=0)
        sd = x[train][:, c].std(axis=0)
        x[:, c] = (x[:, c] - mu) / np.where(sd > 0, sd, 1.0)
    return TabularTask(x, y.astype(np.int64), a.astype(np.int64), train, test, names)
