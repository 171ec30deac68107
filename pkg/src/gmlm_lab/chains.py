"""Block-dynamics samplers, their exact transition matrices, and hitting times.

Two sampler families are compared: block dynamics (k-Gibbs and weighted or
adaptive block laws) which resample a set of coordinates jointly, and the
independent parallel sampler which resamples every coordinate at once from
its single-site conditional at the old state.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Iterable, Sequence

import numpy as np

from .ising import (
    AssumptionError,
    CapacityError,
    CliqueParams,
    IsingModel,
    Region,
    block_mask,
    block_members,
    block_conditional,
    check_strongly_ferromagnetic,
    joint_table,
    mode_region,
    scatter_completions,
    sigmoid,
    spin_table,
    spins,
)
from .masking import (
    Adaptive,
    MaskDistribution,
    UniformK,
    adaptive_conditional,
    sample_mask,
)
from .numerics import RngStream, jacobi_eigen, logsumexp

MAX_STATES = 8192


class UnsupportedSamplerError(TypeError):
    pass


class ReversibilityError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sampler specs


@dataclass(frozen=True)
class KGibbs:
    k: int
    name = "k-gibbs"


@dataclass(frozen=True)
class WeightedBlock:
    d: MaskDistribution
    name = "weighted-block"


@dataclass(frozen=True)
class AdaptiveBlock:
    d: Adaptive
    name = "adaptive-block"


@dataclass(frozen=True)
class IndependentParallel:
    name = "independent-parallel"


SamplerSpec = KGibbs | WeightedBlock | AdaptiveBlock | IndependentParallel


def _check_spec(m: IsingModel, spec) -> None:
    if isinstance(spec, KGibbs) and not 1 <= spec.k <= m.n:
        raise ValueError(f"k-Gibbs needs 1 <= k <= n, got k={spec.k}, n={m.n}")
    if isinstance(spec, (WeightedBlock, AdaptiveBlock)) and spec.d.n != m.n:
        raise ValueError("mask law and model disagree on n")


# ---------------------------------------------------------------------------
# block resampling


def _clique_block_sample(m: IsingModel, x: int, members: Sequence[int], rng: RngStream) -> int:
    """Exact block update for clique models via a dynamic program over #(+1) spins.

    Spins off the clique are independent; the block's clique spins interact
    only through their sum S, with pair energy J (S^2 - r) / 2.
    """
    clique = set(m.clique)
    J = m.J_clique
    s = spins(x, m.n)
    in_c = [i for i in members if i in clique]
    out_c = [i for i in members if i not in clique]
    y = x & ~block_mask(members)
    for i in out_c:
        if rng.random() < sigmoid(2.0 * m.h[i]):
            y |= 1 << i
    r = len(in_c)
    if r == 0:
        return y
    chosen = set(in_c)
    s_out = sum(s[j] for j in m.clique if j not in chosen)
    f = np.array([m.h[i] + J * s_out for i in in_c])
    # L[t, u]: log-sum over the first t spins with u of them +1
    L = np.full((r + 1, r + 1), -np.inf)
    L[0, 0] = 0.0
    for t in range(1, r + 1):
        up = np.full(r + 1, -np.inf)
        up[1:] = L[t - 1, :-1] + f[t - 1]
        L[t] = np.logaddexp(up, L[t - 1] - f[t - 1])
    u_all = np.arange(r + 1)
    S = 2 * u_all - r
    logp_u = L[r] + 0.5 * J * (S * S - r)
    cdf = np.cumsum(np.exp(logp_u - logsumexp(logp_u)))
    u = rng.choice_index(cdf)
    for t in range(r, 0, -1):
        if u == 0:
            break
        if u == t:
            p_plus = 1.0
        else:
            p_plus = math.exp(L[t - 1, u - 1] + f[t - 1] - L[t, u])
        if rng.random() < p_plus:
            y |= 1 << in_c[t - 1]
            u -= 1
    return y


def clique_block_log_probs(m: IsingModel, x: int, members: Sequence[int]) -> np.ndarray:
    """Log-probabilities of all completions implied by the clique energy decomposition."""
    members = sorted(members)
    s = spins(x, m.n)
    clique = set(m.clique)
    A = spin_table(len(members))
    chosen = set(members)
    s_out = sum(s[j] for j in m.clique if j not in chosen)
    logw = np.zeros(A.shape[0])
    Sc = np.zeros(A.shape[0])
    for pos, i in enumerate(members):
        if i in clique:
            logw += (m.h[i] + m.J_clique * s_out) * A[:, pos]
            Sc += A[:, pos]
        else:
            logw += m.h[i] * A[:, pos]
    r = sum(1 for i in members if i in clique)
    logw += 0.5 * m.J_clique * (Sc * Sc - r)
    return logw - logsumexp(logw)


def resample_block(m: IsingModel, x: int, members: Sequence[int], rng: RngStream) -> int:
    """Draw x_K from p(x_K | x_-K); coordinates outside K are kept."""
    members = sorted(members)
    if len(members) == 1:
        i = members[0]
        field = float(m.h[i]) + sum(
            float(m.J[i, j]) * (1.0 if (x >> j) & 1 else -1.0) for j in range(m.n) if j != i
        )
        y = x & ~(1 << i)
        return y | (1 << i) if rng.random() < sigmoid(2.0 * field) else y
    if m.clique is not None:
        return _clique_block_sample(m, x, members, rng)
    dist = block_conditional(m, x, members)
    a = rng.choice_index(np.cumsum(dist.probs))
    return int(scatter_completions(x, members)[a])


def k_gibbs_step(m: IsingModel, x: int, k: int, rng: RngStream) -> int:
    if not 1 <= k <= m.n:
        raise ValueError(f"k={k} outside [1, {m.n}]")
    members = list(range(m.n)) if k == m.n else rng.subset(m.n, k)
    return resample_block(m, x, members, rng)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def independent_parallel_step(m: IsingModel, x: int, rng: RngStream) -> int:
    s = spins(x, m.n)
    field = m.h + m.J @ s
    p_plus = _sigmoid(2.0 * field)
    u = rng.random_array(m.n)
    y = 0
    for i in np.flatnonzero(u < p_plus):
        y |= 1 << int(i)
    return y


def weighted_block_step(m: IsingModel, d: MaskDistribution, x: int, rng: RngStream) -> int:
    K = sample_mask(d, x, rng)
    return resample_block(m, x, block_members(K), rng)


def _joint_probs(m: IsingModel) -> np.ndarray:
    cached = m.__dict__.get("_joint_cache")
    if cached is None:
        cached = joint_table(m).probs
        object.__setattr__(m, "_joint_cache", cached)
    return cached


def adaptive_block_step(m: IsingModel, d: Adaptive, x: int, rng: RngStream) -> tuple[int, int]:
    """Draw K ~ p(K | x), then x_K from the mask-aware conditional; returns (x', K)."""
    K = sample_mask(d, x, rng)
    dist = adaptive_conditional(_joint_probs(m), d, x, K)
    a = rng.choice_index(np.cumsum(dist.probs))
    return int(scatter_completions(x, block_members(K))[a]), K


def step(m: IsingModel, spec, x: int, rng: RngStream) -> int:
    if isinstance(spec, KGibbs):
        return k_gibbs_step(m, x, spec.k, rng)
    if isinstance(spec, IndependentParallel):
        return independent_parallel_step(m, x, rng)
    if isinstance(spec, WeightedBlock):
        return weighted_block_step(m, spec.d, x, rng)
    if isinstance(spec, AdaptiveBlock):
        return adaptive_block_step(m, spec.d, x, rng)[0]
    raise UnsupportedSamplerError(f"unknown sampler {spec!r}")


# ---------------------------------------------------------------------------
# exact transition matrices


@dataclass
class ChainMatrix:
    """Dense row-stochastic kernel. Adaptive chains live on (config, block) pairs,
    state index ``x * n_blocks + b``."""

    n: int
    P: np.ndarray
    mu: np.ndarray | None
    blocks: tuple[int, ...] | None = None
    label: str = ""

    @property
    def size(self) -> int:
        return self.P.shape[0]

    def check(self, row_tol: float = 1e-12, stat_tol: float = 1e-10) -> None:
        rows = np.abs(self.P.sum(axis=1) - 1.0)
        if rows.max() > row_tol:
            raise ValueError(f"rows deviate from 1 by {rows.max():.3e}")
        if self.mu is not None:
            drift = np.abs(self.mu @ self.P - self.mu).max()
            if drift > stat_tol:
                raise ValueError(f"mu P != mu (max drift {drift:.3e})")


def _block_kernel(p: np.ndarray, n: int, K: int, weight_rows: np.ndarray | None = None) -> np.ndarray:
    """Kernel of resampling block K from p(. | x_-K) as a dense matrix."""
    size = 1 << n
    idx = np.arange(size)
    members = block_members(K)
    comp = scatter_completions(0, members)
    ys = (idx[:, None] & ~K) | comp[None, :]
    w = p[ys]
    den = w.sum(axis=1, keepdims=True)
    probs = np.divide(w, den, out=np.zeros_like(w), where=den > 0)
    if weight_rows is not None:
        probs = probs * weight_rows[:, None]
    P = np.zeros((size, size))
    np.add.at(P, (np.repeat(idx, comp.size), ys.ravel()), probs.ravel())
    # unreachable (x_-K, K) contexts: hold still so rows stay stochastic
    dead = np.flatnonzero(den[:, 0] <= 0)
    P[dead, dead] += 1.0 if weight_rows is None else weight_rows[dead]
    return P


def _law_table(d: MaskDistribution, n: int) -> np.ndarray:
    size = 1 << n
    if isinstance(d, Adaptive):
        return d.table
    return np.tile(d.probs(0), (size, 1))


def transition_matrix(m: IsingModel, spec) -> ChainMatrix:
    _check_spec(m, spec)
    size = 1 << m.n
    p = _joint_probs(m)
    if isinstance(spec, IndependentParallel):
        if size * size > MAX_STATES * MAX_STATES or size > MAX_STATES:
            raise CapacityError(f"{size} states exceed the cap of {MAX_STATES}")
        S = spin_table(m.n)
        q = _sigmoid(2.0 * (S @ m.J + m.h))  # q[x, i] = P(y_i = +1 | x)
        P = np.ones((size, size))
        for i in range(m.n):
            plus = S[:, i] > 0
            P *= np.where(plus[None, :], q[:, i : i + 1], 1.0 - q[:, i : i + 1])
        return ChainMatrix(m.n, P, None, label=spec.name)
    if isinstance(spec, AdaptiveBlock):
        d = spec.d
        B = len(d.blocks)
        if size * B > MAX_STATES:
            raise CapacityError(f"{size * B} pair states exceed the cap of {MAX_STATES}")
        law = d.table
        P = np.zeros((size * B, size * B))
        for b, K in enumerate(d.blocks):
            # p(Y_K | X_-K, K) proportional to p(Y) p(K | Y); the block label is kept
            Pb = _block_kernel(p * law[:, b], m.n, K)
            P[b::B, b::B] = Pb
        mu = (p[:, None] * law).reshape(-1)
        cm = ChainMatrix(m.n, P, mu, d.blocks, spec.name)
        cm.check()
        return cm
    if size > MAX_STATES:
        raise CapacityError(f"{size} states exceed the cap of {MAX_STATES}")
    d = UniformK(m.n, spec.k) if isinstance(spec, KGibbs) else spec.d
    law = d.probs(0)
    P = np.zeros((size, size))
    for wK, K in zip(law, d.blocks):
        if wK > 0:
            P += wK * _block_kernel(p, m.n, K)
    cm = ChainMatrix(m.n, P, p.copy(), d.blocks, spec.name)
    cm.check()
    return cm


def adaptive_marginal_matrix(m: IsingModel, d: Adaptive) -> ChainMatrix:
    """Configuration-space kernel that redraws K ~ p(K | x) each step.

    Reversible with respect to p(x); its Dirichlet form agrees with the
    pair-space chain on functions of x alone.
    """
    size = 1 << m.n
    if size > MAX_STATES:
        raise CapacityError(f"{size} states exceed the cap of {MAX_STATES}")
    p = _joint_probs(m)
    P = np.zeros((size, size))
    for b, K in enumerate(d.blocks):
        P += _block_kernel(p * d.table[:, b], m.n, K, weight_rows=d.table[:, b])
    cm = ChainMatrix(m.n, P, p.copy(), d.blocks, "adaptive-marginal")
    cm.check()
    return cm


# ---------------------------------------------------------------------------
# Dirichlet forms and Poincare constants


def _require_reversible_kind(cm: ChainMatrix) -> None:
    if cm.mu is None:
        raise UnsupportedSamplerError(
            "the independent parallel chain has no known stationary law; no Dirichlet form"
        )


def dirichlet_form(cm: ChainMatrix, f, g) -> float:
    """1/2 sum_{x,y} mu(x) P(x,y) (f(x)-f(y)) (g(x)-g(y))."""
    _require_reversible_kind(cm)
    f = np.asarray(f, dtype=float).reshape(-1)
    g = np.asarray(g, dtype=float).reshape(-1)
    total = 0.0
    chunk = max(1, 4_000_000 // cm.size)
    for lo in range(0, cm.size, chunk):
        hi = min(cm.size, lo + chunk)
        df = f[lo:hi, None] - f[None, :]
        dg = g[lo:hi, None] - g[None, :]
        total += float(np.sum(cm.mu[lo:hi, None] * cm.P[lo:hi] * df * dg))
    return 0.5 * total


def dirichlet_form_cov(m: IsingModel, d: MaskDistribution, f, g) -> float:
    """E_{(x_-K, K)} Cov_{x_K | x_-K, K}(f, g) for block dynamics with mask law d.

    For an adaptive law, f and g are functions on (config, block) pairs laid
    out as arrays of shape (2^n, n_blocks); otherwise they are functions of
    the configuration.
    """
    size = 1 << m.n
    p = _joint_probs(m)
    idx = np.arange(size)
    law = _law_table(d, m.n)
    B = len(d.blocks)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if d.adaptive:
        f, g = f.reshape(size, B), g.reshape(size, B)
    total = 0.0
    for b, K in enumerate(d.blocks):
        members = block_members(K)
        comp = scatter_completions(0, members)
        keys = np.unique(idx & ~K)
        ys = keys[:, None] | comp[None, :]
        w = p[ys] * law[ys, b]  # p(x, K) over completions
        mass = w.sum(axis=1)
        live = mass > 0
        q = w[live] / mass[live, None]
        fb = f[ys[live], b] if d.adaptive else f[ys[live]]
        gb = g[ys[live], b] if d.adaptive else g[ys[live]]
        ef = np.sum(q * fb, axis=1)
        eg = np.sum(q * gb, axis=1)
        cov = np.sum(q * fb * gb, axis=1) - ef * eg
        total += float(mass[live] @ cov)
    return total


def reversibility_defect(cm: ChainMatrix) -> float:
    _require_reversible_kind(cm)
    F = cm.mu[:, None] * cm.P
    return float(np.max(np.abs(F - F.T)))


def poincare_constant(cm: ChainMatrix) -> float:
    """1 / spectral gap of the mu-symmetrised kernel; +inf for a vanishing gap."""
    _require_reversible_kind(cm)
    defect = reversibility_defect(cm)
    if defect > 1e-8:
        raise ReversibilityError(f"chain is not reversible (defect {defect:.3e})")
    if np.any(cm.mu <= 0):
        raise ValueError("stationary law must be strictly positive")
    r = np.sqrt(cm.mu)
    S = r[:, None] * cm.P / r[None, :]
    lam = jacobi_eigen(0.5 * (S + S.T)).eigenvalues
    if lam.size == 1:
        return 1.0
    lam2 = float(lam[1])
    if lam2 >= 1.0 - 1e-12:
        return math.inf
    return 1.0 / (1.0 - lam2)


def variance(mu: np.ndarray, f) -> float:
    f = np.asarray(f, dtype=float).reshape(-1)
    mean = mu @ f
    return float(mu @ (f - mean) ** 2)


def poincare_variational_ratio(cm: ChainMatrix, C: float, rng: RngStream, n_funcs: int = 200) -> float:
    """min over random f of E(f,f) C / Var(f); at least 1 when C is a valid constant."""
    worst = math.inf
    for _ in range(n_funcs):
        f = rng.random_array(cm.size) - 0.5
        var = variance(cm.mu, f)
        if var <= 0:
            continue
        worst = min(worst, dirichlet_form(cm, f, f) * C / var)
    return worst


# ---------------------------------------------------------------------------
# theoretical mode-escape constants


def _strong_report(p: CliqueParams):
    rep = check_strongly_ferromagnetic(p)
    if not rep.holds:
        raise AssumptionError(f"strongly ferromagnetic assumption fails: {rep.margins}")
    return rep


def mode_fast_constant(p: CliqueParams, k: int) -> float:
    """Per-step miss probability bound c for k-Gibbs to enter R_plus."""
    if k < p.size:
        raise ValueError(f"k={k} must be at least the clique size {p.size}")
    if k > p.n:
        raise ValueError(f"k={k} exceeds n={p.n}")
    rep = _strong_report(p)
    include = math.comb(p.n - p.size, k - p.size) / math.comb(p.n, k)
    # e^{2(J0+hG)} / (e^{2(J0+hG)} + e^{2 J0} + 2^|C| - 2), divided through
    a = 2.0 * (rep.J_0 + rep.h_G)
    enter = 1.0 / (1.0 + math.exp(-2.0 * rep.h_G) + (2.0**p.size - 2.0) * math.exp(-a))
    return 1.0 - include * enter


def mode_slow_constants(p: CliqueParams, delta: float) -> tuple[float, int]:
    """(c_stuck, T) such that independent parallel stays below the R_plus barrier for T steps w.p. >= 1-delta."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    rep = _strong_report(p)
    e = math.exp(-2.0 * rep.J_0)
    c_stuck = 2.0 * (-1.0 + (1.0 - e) / (e + 1.0) * p.size / 2.0) ** 2 / p.size
    return c_stuck, math.floor(delta / 2.0 * math.exp(c_stuck))


def mode_fast_steps(c_r1: float, delta: float) -> int:
    return math.ceil(math.log(delta) / math.log(c_r1))


# ---------------------------------------------------------------------------
# hitting


def _as_states(start) -> list[int]:
    if isinstance(start, (int, np.integer)):
        return [int(start)]
    return sorted(int(s) for s in start)


def hitting_probability_exact(m: IsingModel, spec, start, clique: Iterable[int] | None = None, T: int = 1) -> float:
    """P(reach R_plus within T steps), minimised over the start set, via absorbing powers."""
    if isinstance(spec, AdaptiveBlock):
        raise UnsupportedSamplerError("exact hitting is defined on configuration chains")
    clique = m.clique if clique is None else tuple(clique)
    if clique is None:
        raise ValueError("a target clique is required")
    cm = transition_matrix(m, spec)
    size = cm.size
    target = np.array([mode_region(x, clique) is Region.R_PLUS for x in range(size)])
    P = cm.P.copy()
    P[target] = 0.0
    P[target, np.flatnonzero(target)] = 1.0
    starts = _as_states(start)
    V = np.zeros((len(starts), size))
    V[np.arange(len(starts)), starts] = 1.0
    for _ in range(T):
        V = V @ P
    return float(V[:, target].sum(axis=1).min())


@dataclass(frozen=True)
class HittingRecord:
    trial: int
    steps: int
    hit: bool
    seed: int


def first_passage(
    m: IsingModel, spec, x0: int, stop: Callable[[int], bool], budget: int, rng: RngStream
) -> int | None:
    """Smallest t in [0, budget] with stop(X_t), or None."""
    x = x0
    if stop(x):
        return 0
    for t in range(1, budget + 1):
        x = step(m, spec, x, rng)
        if stop(x):
            return t
    return None


@dataclass(frozen=True)
class EnterPlus:
    """Stop once every clique spin is +1 (region R_plus)."""

    clique_bits: int

    def __call__(self, x: int) -> bool:
        return x & self.clique_bits == self.clique_bits


@dataclass(frozen=True)
class LeaveLow:
    """Stop once the clique sum exceeds -2, i.e. the chain leaves the low-sum set."""

    clique: tuple[int, ...]

    def __call__(self, x: int) -> bool:
        return clique_sum(x, self.clique) > -2


def _one_trial(m, spec, start, stop, budget, seed, trial) -> HittingRecord:
    rng = RngStream.derive(seed, trial)
    t = first_passage(m, spec, start, stop, budget, rng)
    if t is None:
        return HittingRecord(trial, budget, False, seed)
    return HittingRecord(trial, t, True, seed)


def run_hitting_trials(
    m: IsingModel,
    spec,
    start: int,
    clique: Iterable[int] | None,
    budget: int,
    trials: int,
    seed: int,
    jobs: int = 1,
    stop: Callable[[int], bool] | None = None,
) -> list[HittingRecord]:
    """Independent hitting-time trials; trial i uses the stream derived from (seed, i).

    The default target is R_plus of ``clique``; pass ``stop`` for another event.
    """
    _check_spec(m, spec)
    if budget < 0 or trials < 1:
        raise ValueError("need budget >= 0 and trials >= 1")
    if stop is None:
        clique = m.clique if clique is None else tuple(clique)
        if clique is None:
            raise ValueError("a target clique is required")
        stop = EnterPlus(block_mask(clique))
    work = partial(_one_trial, m, spec, start, stop, budget, seed)
    return parallel_map(work, range(trials), jobs)


def parallel_map(fn, items, jobs: int = 1) -> list:
    """Order-preserving map, in-process for jobs <= 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def clique_sum(x: int, clique: Sequence[int]) -> int:
    return sum(1 if (x >> i) & 1 else -1 for i in clique)
