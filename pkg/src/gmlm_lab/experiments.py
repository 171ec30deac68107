"""Seed-deterministic experiment runners that emit CSV reports.

Every random draw comes from a stream derived from the config seed and the
task's grid coordinates, so results do not depend on scheduling or on the
number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Sequence

import numpy as np

from . import __version__
from .asymptotics import gamma_pl
from .chains import (
    EnterPlus,
    HittingRecord,
    IndependentParallel,
    KGibbs,
    clique_sum,
    first_passage,
    independent_parallel_step,
    k_gibbs_step,
    parallel_map,
)
from .ising import (
    AssumptionError,
    CliqueParams,
    IsingModel,
    Region,
    block_mask,
    build_clique_ising,
    check_large_k,
    check_strong_interactions,
    large_k_threshold,
    mode_region,
    n_params,
)
from .masking import (
    FitOptions,
    UniformK,
    design_from_dataset,
    fit_mple,
    make_dataset,
    population_mask_design,
)
from .numerics import RngStream, derive_seed

EXPERIMENTS = ("param_recovery", "mode_escape", "separation", "normality")
FIELDS = ("all", "clique_only")

# stream tags keep the data, mask and chain streams of one task apart
_DATA, _MASK, _CHAIN, _SEP_GIBBS, _SEP_PAR = range(5)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    n: int = 4
    clique: tuple[int, ...] = (0, 1, 2, 3)
    J: float = 0.05
    h: float = 0.0
    ks: tuple[int, ...] = (1, 2, 3, 4)
    n_sequences: tuple[int, ...] = (100, 316, 1000, 3162, 10000)
    Js: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0, 20.0, 40.0)
    trials: int = 10
    seed: int = 0
    fields: str = "clique_only"
    masks_per_sequence: int = 1
    mask_mode: str = "sampled"
    budget: int = 1000
    include_parallel: bool = True
    delta: float = 0.25
    M: int = 5
    out: str | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "clique", tuple(int(c) for c in self.clique))
        object.__setattr__(self, "ks", tuple(int(k) for k in self.ks))
        object.__setattr__(self, "n_sequences", tuple(int(v) for v in self.n_sequences))
        object.__setattr__(self, "Js", tuple(float(v) for v in self.Js))
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.fields not in FIELDS:
            raise ConfigError(f"fields must be one of {FIELDS}")
        if self.mask_mode not in ("sampled", "population"):
            raise ConfigError("mask_mode must be 'sampled' or 'population'")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.ks or not self.n_sequences or not self.Js:
            raise ConfigError("grids must be non-empty")
        if any(not 1 <= k <= self.n for k in self.ks):
            raise ConfigError(f"every k must lie in [1, {self.n}]")
        if any(v < 1 for v in self.n_sequences):
            raise ConfigError("n_sequences entries must be positive")
        if self.masks_per_sequence < 1 or self.budget < 0 or self.M < 1:
            raise ConfigError("masks_per_sequence and M must be positive, budget nonnegative")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "fields" in d:
            d = {**d, "fields": str(d["fields"]).replace("-", "_")}
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        for key in ("clique", "ks", "n_sequences", "Js"):
            d[key] = list(d[key])
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def field_vector(self) -> np.ndarray:
        if self.fields == "all":
            return np.full(self.n, self.h)
        h = np.zeros(self.n)
        h[list(self.clique)] = self.h
        return h

    def clique_params(self, J: float | None = None) -> CliqueParams:
        return CliqueParams(self.n, self.clique, self.J if J is None else J, self.field_vector())


# reference presets
FIG_FLAT = ExperimentConfig("param_recovery", n=4, clique=(0, 1, 2, 3), J=0.05, h=0.0)
FIG_PEAKY = replace(FIG_FLAT, J=0.3)
FIG_SAMPLING = ExperimentConfig(
    "mode_escape", n=10, clique=(0, 1, 2, 3), h=5.0, ks=(4, 7, 10), budget=1000
)


@dataclass
class ExperimentReport:
    experiment: str
    seed: int
    config_hash: str
    columns: tuple[str, ...]
    rows: list[tuple]
    records: list[tuple] = field(default_factory=list)
    record_columns: tuple[str, ...] = ()

    def header(self) -> str:
        return (
            f"# gmlm_lab {__version__} experiment={self.experiment} "
            f"seed={self.seed} config_sha256={self.config_hash}"
        )

    @staticmethod
    def _cell(v) -> str:
        if isinstance(v, bool):
            return str(int(v))
        if isinstance(v, float):
            return repr(v)
        return str(v)

    def _csv(self, columns, rows) -> str:
        buf = io.StringIO()
        buf.write(self.header() + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([self._cell(v) for v in r])
        return buf.getvalue()

    def to_csv(self) -> str:
        return self._csv(self.columns, self.rows)

    def records_csv(self) -> str:
        return self._csv(self.record_columns, self.records)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def _mean_stdev(values: Sequence[float]) -> tuple[float, float]:
    vals = [float(v) for v in values]
    if not vals:
        return math.nan, math.nan
    mean = sum(vals) / len(vals)
    sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
    return mean, sd


# ---------------------------------------------------------------------------
# parameter recovery


def _fit_task(cfg: ExperimentConfig, truth: IsingModel, task: tuple[int, int, int]):
    k, n_idx, trial = task
    n_seq = cfg.n_sequences[n_idx]
    d = UniformK(cfg.n, k)
    # the data stream ignores k, so every k sees the same sequences
    data_rng = RngStream.derive(cfg.seed, _DATA, n_idx, trial)
    mask_rng = RngStream.derive(cfg.seed, _MASK, k, n_idx, trial)
    data = make_dataset(truth, d, n_seq, cfg.masks_per_sequence, data_rng, mask_rng)
    design = population_mask_design(data, d) if cfg.mask_mode == "population" else design_from_dataset(data, d)
    try:
        fit = fit_mple(design, d, FitOptions())
    except (ArithmeticError, ValueError) as exc:
        return (math.nan, False, type(exc).__name__)
    err = float(np.sum((fit.theta_hat - truth.theta) ** 2)) / n_params(cfg.n)
    return (err, fit.converged, "")


def param_recovery(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    truth = build_clique_ising(cfg.clique_params())
    tasks = [
        (k, n_idx, t)
        for k in cfg.ks
        for n_idx in range(len(cfg.n_sequences))
        for t in range(cfg.trials)
    ]
    results = parallel_map(partial(_fit_task, cfg, truth), tasks, jobs)
    records, rows = [], []
    by_point: dict[tuple[int, int], list] = {}
    for (k, n_idx, t), (err, conv, note) in zip(tasks, results):
        n_seq = cfg.n_sequences[n_idx]
        records.append((k, n_seq, t, err, conv, note))
        by_point.setdefault((k, n_seq), []).append((err, conv))
    for (k, n_seq), vals in by_point.items():
        ok = [e for e, _ in vals if math.isfinite(e)]
        mean, sd = _mean_stdev(ok)
        failures = len(vals) - len(ok)
        unconverged = sum(1 for _, c in vals if not c)
        rows.append((k, n_seq, mean, sd, len(vals), failures, unconverged))
    return ExperimentReport(
        cfg.experiment,
        cfg.seed,
        cfg.digest(),
        ("k", "n_sequences", "mean_error", "stdev", "trials", "failures", "unconverged"),
        rows,
        records,
        ("k", "n_sequences", "trial", "error", "converged", "error_kind"),
    )


# ---------------------------------------------------------------------------
# mode escape (hitting times)


def _samplers(cfg: ExperimentConfig) -> list[tuple[str, int, object]]:
    out = [("k-gibbs", k, KGibbs(k)) for k in cfg.ks]
    if cfg.include_parallel:
        out.append(("independent-parallel", cfg.n, IndependentParallel()))
    return out


def _hit_task(cfg: ExperimentConfig, task) -> HittingRecord:
    j_idx, s_idx, trial = task
    m = build_clique_ising(cfg.clique_params(cfg.Js[j_idx]))
    _, _, spec = _samplers(cfg)[s_idx]
    seed = derive_seed(cfg.seed, _CHAIN, j_idx, s_idx)
    rng = RngStream.derive(seed, trial)
    t = first_passage(m, spec, 0, EnterPlus(block_mask(cfg.clique)), cfg.budget, rng)
    if t is None:
        return HittingRecord(trial, cfg.budget, False, seed)
    return HittingRecord(trial, t, True, seed)


HIT_COLUMNS = ("sampler", "k", "J", "trial", "steps", "hit", "seed")


def mode_escape(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Steps for each sampler to reach R_plus from the all-minus configuration."""
    samplers = _samplers(cfg)
    tasks = [
        (j_idx, s_idx, t)
        for j_idx in range(len(cfg.Js))
        for s_idx in range(len(samplers))
        for t in range(cfg.trials)
    ]
    results = parallel_map(partial(_hit_task, cfg), tasks, jobs)
    records, groups = [], {}
    for (j_idx, s_idx, _), rec in zip(tasks, results):
        name, k, _ = samplers[s_idx]
        J = cfg.Js[j_idx]
        records.append((name, k, J, rec.trial, rec.steps, rec.hit, rec.seed))
        groups.setdefault((name, k, J), []).append(rec)
    rows = []
    for (name, k, J), recs in groups.items():
        steps = [r.steps for r in recs]
        mean, sd = _mean_stdev(steps)
        rows.append(
            (name, k, J, mean, sd, float(statistics.median(steps)), sum(r.hit for r in recs), len(recs))
        )
    return ExperimentReport(
        cfg.experiment,
        cfg.seed,
        cfg.digest(),
        ("sampler", "k", "J", "mean_steps", "stdev", "median_steps", "hits", "trials"),
        rows,
        records,
        HIT_COLUMNS,
    )


# ---------------------------------------------------------------------------
# one-step separation


def separation_instance(delta: float, M: int) -> tuple[CliqueParams, int]:
    """Smallest clique meeting the strong-interaction sizes, with k at the large-k threshold."""
    size = math.ceil(8.0 * (1.0 + math.log(4.0 * M / delta)))
    need_hG = 0.5 * math.log(2.0 * (4.0 - delta) / delta)
    h_site = (need_hG + 1.0) / size
    h_norm = h_site * size
    J = 0.5 * size * math.log(2.0) + h_norm + 1.0
    p = CliqueParams(size, tuple(range(size)), J, h_site)
    return p, math.ceil(large_k_threshold(p, delta))


def _sep_task(p: CliqueParams, k: int, M: int, seed: int, task):
    kind, trial = task
    m = build_clique_ising(p)
    if kind == "k-gibbs":
        rng = RngStream.derive(seed, _SEP_GIBBS, trial)
        x = k_gibbs_step(m, 0, k, rng)
        return mode_region(x, p.clique) is Region.R_PLUS
    rng = RngStream.derive(seed, _SEP_PAR, trial)
    x = 0
    for _ in range(M):
        x = independent_parallel_step(m, x, rng)
        if mode_region(x, p.clique) is Region.R_PLUS:
            return False
    return True


def separation(cfg: ExperimentConfig, jobs: int = 1, instance: tuple[CliqueParams, int] | None = None) -> ExperimentReport:
    """k-Gibbs one-step R_plus entry vs independent-parallel M-step avoidance, from all minus."""
    p, k = instance if instance is not None else separation_instance(cfg.delta, cfg.M)
    strong = check_strong_interactions(p, cfg.delta, cfg.M)
    large = check_large_k(p, k, cfg.delta)
    for rep in (strong, large):
        if not rep.holds:
            raise AssumptionError(f"instance fails: {rep.failing()}")
    if clique_sum(0, p.clique) > -2:
        raise AssumptionError("start state must have clique sum <= -2")
    tasks = [("k-gibbs", t) for t in range(cfg.trials)] + [
        ("independent-parallel", t) for t in range(cfg.trials)
    ]
    out = parallel_map(partial(_sep_task, p, k, cfg.M, cfg.seed), tasks, jobs)
    gibbs = [float(v) for (kind, _), v in zip(tasks, out) if kind == "k-gibbs"]
    par = [float(v) for (kind, _), v in zip(tasks, out) if kind != "k-gibbs"]
    rows = []
    for name, steps, vals in (("k-gibbs", 1, gibbs), ("independent-parallel", cfg.M, par)):
        mean, sd = _mean_stdev(vals)
        rows.append((name, k if name == "k-gibbs" else p.n, steps, p.size, p.J, mean, sd, 1.0 - cfg.delta, len(vals)))
    return ExperimentReport(
        cfg.experiment,
        cfg.seed,
        cfg.digest(),
        ("sampler", "k", "steps", "clique_size", "J", "success_freq", "stdev", "target", "trials"),
        rows,
    )


# ---------------------------------------------------------------------------
# asymptotic normality


def normality(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    """Trace of the empirical covariance of sqrt(n)(theta_hat - theta*) against Tr(Gamma)."""
    truth = build_clique_ising(cfg.clique_params())
    n_seq = cfg.n_sequences[-1]
    single = replace(cfg, n_sequences=(n_seq,))
    rows, records = [], []
    for k in cfg.ks:
        tasks = [(k, 0, t) for t in range(cfg.trials)]
        thetas = parallel_map(partial(_theta_task, single, truth), tasks, jobs)
        Z = math.sqrt(n_seq) * (np.array(thetas) - truth.theta)
        cov = np.cov(Z, rowvar=False, ddof=1) if cfg.trials > 1 else np.zeros((Z.shape[1],) * 2)
        tr_emp = float(np.trace(cov))
        tr_gamma = float(np.trace(gamma_pl(truth, UniformK(cfg.n, k))))
        mean = Z.mean(axis=0)
        se = np.sqrt(np.diag(cov) / cfg.trials)
        max_z = float(np.max(np.abs(mean) / np.where(se > 0, se, np.inf)))
        rows.append((k, n_seq, tr_emp, tr_gamma, tr_emp / tr_gamma, max_z, cfg.trials))
        for t, th in enumerate(thetas):
            records.append((k, t, *[float(v) for v in th]))
    dim = n_params(cfg.n)
    return ExperimentReport(
        cfg.experiment,
        cfg.seed,
        cfg.digest(),
        ("k", "n_sequences", "trace_empirical", "trace_gamma", "ratio", "max_abs_mean_z", "trials"),
        rows,
        records,
        ("k", "trial", *[f"theta_{i}" for i in range(dim)]),
    )


def _theta_task(cfg: ExperimentConfig, truth: IsingModel, task) -> np.ndarray:
    k, n_idx, trial = task
    d = UniformK(cfg.n, k)
    data = make_dataset(
        truth,
        d,
        cfg.n_sequences[n_idx],
        cfg.masks_per_sequence,
        RngStream.derive(cfg.seed, _DATA, n_idx, trial),
        RngStream.derive(cfg.seed, _MASK, k, n_idx, trial),
    )
    design = population_mask_design(data, d) if cfg.mask_mode == "population" else design_from_dataset(data, d)
    return fit_mple(design, d, FitOptions()).theta_hat


RUNNERS = {
    "param_recovery": param_recovery,
    "mode_escape": mode_escape,
    "separation": separation,
    "normality": normality,
}


def run(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentReport:
    return RUNNERS[cfg.experiment](cfg, jobs=jobs)
