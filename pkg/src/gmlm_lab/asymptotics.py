"""Exact population quantities at the true parameter, by enumeration.

Hessian of the population pseudolikelihood loss, covariance of the per-sample
gradient, Fisher information and the asymptotic covariance Gamma = H^{-1}.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .ising import CapacityError, IsingModel, joint_table
from .masking import (
    Adaptive,
    LossDesign,
    MaskDistribution,
    UniformK,
    compile_design,
    features,
    loss_hessian,
    mple_loss,
    pair_gradients,
)
from .numerics import SingularMatrixError, invert_spd, psd_gap, sym_matrix

MAX_POPULATION_N = 10


class RealizabilityError(ValueError):
    pass


class DegenerateHessianError(ArithmeticError):
    def __init__(self, eigmin: float):
        super().__init__(f"population Hessian is degenerate (eigmin={eigmin:.3e})")
        self.eigmin = eigmin


def population_design(truth: IsingModel, d: MaskDistribution) -> LossDesign:
    """All (x, K) pairs weighted by p(x) p(K | x)."""
    if truth.n > MAX_POPULATION_N:
        raise CapacityError(f"population enumeration needs n <= {MAX_POPULATION_N}")
    if d.n != truth.n:
        raise ValueError("mask law and model disagree on n")
    p = joint_table(truth).probs
    size = 1 << truth.n
    blocks = np.asarray(d.blocks, dtype=np.int64)
    if isinstance(d, Adaptive):
        law = d.table
    else:
        law = np.tile(d.probs(0), (size, 1))
    x = np.repeat(np.arange(size), blocks.size)
    k = np.tile(blocks, size)
    w = (p[:, None] * law).reshape(-1)
    return compile_design(truth.n, x, k, w, d)


def _realizable(theta_star, truth: IsingModel) -> np.ndarray:
    theta_star = np.asarray(theta_star, dtype=float)
    fitted = IsingModel.from_theta(truth.n, theta_star)
    gap = float(np.max(np.abs(joint_table(fitted).probs - joint_table(truth).probs)))
    if gap > 1e-10:
        raise RealizabilityError(f"theta* does not reproduce the truth (max gap {gap:.3e})")
    return theta_star


def population_loss(theta, truth: IsingModel, d: MaskDistribution) -> float:
    return mple_loss(theta, population_design(truth, d))


def population_hessian(theta_star, truth: IsingModel, d: MaskDistribution) -> np.ndarray:
    theta_star = _realizable(theta_star, truth)
    return loss_hessian(theta_star, population_design(truth, d))


def gradient_covariance(
    theta_star, truth: IsingModel, d: MaskDistribution, mean_tol: float = 1e-10
) -> np.ndarray:
    """Cov of -grad log p(X_K | X_-K[, K]) under p(X) p(K | X), from explicit per-pair gradients."""
    theta_star = _realizable(theta_star, truth)
    grads, w = pair_gradients(theta_star, population_design(truth, d))
    w = w / w.sum()
    mean = w @ grads
    if float(np.max(np.abs(mean))) > mean_tol:
        raise RealizabilityError(f"mean gradient at theta* is {np.max(np.abs(mean)):.3e}")
    second = np.einsum("r,rd,re->de", w, grads, grads)
    return sym_matrix(second - np.outer(mean, mean))


def mean_gradient(theta_star, truth: IsingModel, d: MaskDistribution) -> np.ndarray:
    grads, w = pair_gradients(np.asarray(theta_star, float), population_design(truth, d))
    return (w / w.sum()) @ grads


def fisher_information(truth: IsingModel) -> np.ndarray:
    if truth.n > MAX_POPULATION_N:
        raise CapacityError(f"Fisher information enumerates 2^n configs; n <= {MAX_POPULATION_N}")
    p = joint_table(truth).probs
    phi = features(np.arange(1 << truth.n), truth.n)
    mean = p @ phi
    centered = phi - mean
    return sym_matrix((centered * p[:, None]).T @ centered)


def gamma_pl(truth: IsingModel, d: MaskDistribution) -> np.ndarray:
    H = population_hessian(truth.theta, truth, d)
    try:
        return invert_spd(H)
    except SingularMatrixError as exc:
        raise DegenerateHessianError(exc.eigmin) from exc


def relative_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300))


def check_gamma_monotone(truth: IsingModel, k_max: int | None = None) -> list[float]:
    """psd_gap(Gamma^k - Gamma^{k+1}) for k = 1 .. k_max-1 under uniform k-masks."""
    k_max = truth.n if k_max is None else k_max
    if not 1 <= k_max <= truth.n:
        raise ValueError(f"k_max must lie in [1, {truth.n}]")
    gammas = [gamma_pl(truth, UniformK(truth.n, k)) for k in range(1, k_max + 1)]
    return [psd_gap(gammas[i] - gammas[i + 1]) for i in range(k_max - 1)]


def check_variance_bound(truth: IsingModel, d: MaskDistribution, poincare_c: float) -> float:
    """psd_gap(C I^{-1} - Gamma); infinite C makes the bound vacuous (returns +inf)."""
    if math.isinf(poincare_c):
        return math.inf
    fisher_inv = invert_spd(fisher_information(truth))
    return psd_gap(poincare_c * fisher_inv - gamma_pl(truth, d))


@dataclass
class AsymptoticReport:
    hessian: np.ndarray
    grad_cov: np.ndarray
    equality_gap: float
    gamma: np.ndarray | None
    fisher: np.ndarray
    degenerate: bool = False
    label: str = ""

    @property
    def trace_gamma(self) -> float:
        return float(np.trace(self.gamma)) if self.gamma is not None else math.nan

    def to_dict(self) -> dict:
        def mat(a):
            return None if a is None else [[float(v) for v in row] for row in a]

        return {
            "label": self.label,
            "hessian": mat(self.hessian),
            "grad_cov": mat(self.grad_cov),
            "equality_gap": self.equality_gap,
            "gamma": mat(self.gamma),
            "fisher": mat(self.fisher),
            "trace_gamma": self.trace_gamma,
            "degenerate": self.degenerate,
        }


def asymptotic_report(truth: IsingModel, d: MaskDistribution, label: str = "") -> AsymptoticReport:
    theta = truth.theta
    H = population_hessian(theta, truth, d)
    C = gradient_covariance(theta, truth, d)
    fisher = fisher_information(truth)
    try:
        gamma = invert_spd(H)
        degenerate = False
    except SingularMatrixError:
        gamma, degenerate = None, True
    return AsymptoticReport(H, C, relative_gap(H, C), gamma, fisher, degenerate, label)


def summary_csv(truth: IsingModel, ks) -> str:
    """CSV rows (k, trace_gamma, eigmin_gap) with eigmin_gap = psd_gap(Gamma^k - Gamma^{k+1})."""
    ks = list(ks)
    gammas = {k: gamma_pl(truth, UniformK(truth.n, k)) for k in ks}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "trace_gamma", "eigmin_gap"])
    for k in ks:
        gap = psd_gap(gammas[k] - gammas[k + 1]) if k + 1 in gammas else math.nan
        w.writerow([k, repr(float(np.trace(gammas[k]))), repr(gap)])
    return buf.getvalue()


def dump_reports(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)
