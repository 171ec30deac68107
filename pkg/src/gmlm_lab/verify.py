"""Randomized verification suites turning the library's identities into checks.

Each suite draws its instances from a seeded stream and returns one
:class:`Check` per assertion family, with the worst value observed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .asymptotics import (
    check_gamma_monotone,
    check_variance_bound,
    gamma_pl,
    gradient_covariance,
    population_hessian,
    relative_gap,
)
from .chains import (
    AdaptiveBlock,
    KGibbs,
    WeightedBlock,
    adaptive_marginal_matrix,
    dirichlet_form,
    dirichlet_form_cov,
    hitting_probability_exact,
    mode_fast_constant,
    poincare_constant,
    transition_matrix,
)
from .ising import (
    CliqueParams,
    IsingModel,
    build_clique_ising,
    joint_table,
    n_params,
    verify_mode_ordering,
)
from .masking import (
    Adaptive,
    MaskDistribution,
    UniformK,
    Weighted,
    adaptive_conditional,
    loss_hessian,
    make_dataset,
    marginalization_identity_check,
    mple_gradient,
    mple_loss,
    random_adaptive,
)
from .numerics import RngStream, finite_diff_gradient, psd_gap

SUITES = ("identity", "monotone", "variance-bound", "dirichlet", "convexity", "modes", "hitting", "fixtures")


@dataclass
class Check:
    name: str
    worst: float
    bound: float
    kind: str  # "<=" or ">="
    instances: int
    failing: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failing

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: worst={self.worst:.3e} (need {self.kind} {self.bound:.0e}) over {self.instances} instances"


class _Tracker:
    def __init__(self, name: str, bound: float, kind: str):
        self.check = Check(name, math.nan, bound, kind, 0)

    def add(self, value: float, instance: str) -> None:
        c = self.check
        c.instances += 1
        if c.kind == "<=":
            c.worst = value if math.isnan(c.worst) else max(c.worst, value)
            ok = value <= c.bound
        else:
            c.worst = value if math.isnan(c.worst) else min(c.worst, value)
            ok = value >= c.bound
        if not ok or math.isnan(value):
            c.failing.append(f"{instance}: {value!r}")


# ---------------------------------------------------------------------------
# random instances


def random_model(n: int, rng: RngStream, h_scale: float = 1.0, j_scale: float = 0.5) -> IsingModel:
    d = n_params(n)
    u = 2.0 * rng.random_array(d) - 1.0
    scale = np.concatenate([np.full(n, h_scale), np.full(d - n, j_scale)])
    return IsingModel.from_theta(n, u * scale)


def random_weighted(n: int, rng: RngStream) -> Weighted:
    """Singletons plus up to two random extra blocks, positive random weights."""
    blocks = [1 << i for i in range(n)]
    pool = [b for b in range(1, 1 << n) if b not in blocks]
    for _ in range(min(len(pool), rng.randbelow(3))):
        blocks.append(pool.pop(rng.randbelow(len(pool))))
    w = 0.2 + rng.random_array(len(blocks))
    return Weighted(n, blocks, w / w.sum())


def random_strong_clique(rng: RngStream, n_max: int = 8) -> CliqueParams:
    """A strongly ferromagnetic clique model with n in [3, n_max]."""
    n = 3 + rng.randbelow(n_max - 2)
    size = 2 + rng.randbelow(min(n, 5) - 1)
    h = np.zeros(n)
    h[:size] = 0.2 + 0.8 * rng.random_array(size)
    h_g = float(h[:size].sum())
    if n > size:
        out = rng.random_array(n - size) - 0.5
        out *= 0.8 * h_g / max(float(np.abs(out).sum()), 1e-12)
        h[size:] = out
    J0 = 0.5 + 2.5 * rng.random()
    return CliqueParams(n, tuple(range(size)), float(np.abs(h).sum()) + J0, h)


# ---------------------------------------------------------------------------
# suites


def suite_identity(seed: int) -> list[Check]:
    """Generalized information-matrix equality H = Cov(grad) and zero mean gradient."""
    rng = RngStream.derive(seed, 101)
    gap = _Tracker("information equality ||H-C||/||H||", 1e-10, "<=")
    for i in range(50):
        n = 1 + i % 4
        k = 1 + rng.randbelow(n)
        m = random_model(n, rng)
        d = UniformK(n, k)
        gap.add(_equality_gap(m, d), f"uniform n={n} k={k} theta={m.theta.tolist()}")
    for i in range(10):
        n = 2 + i % 3
        m = random_model(n, rng)
        d = random_adaptive(n, rng)
        gap.add(_equality_gap(m, d), f"adaptive n={n} blocks={d.blocks} theta={m.theta.tolist()}")
    return [gap.check]


def _equality_gap(m: IsingModel, d: MaskDistribution) -> float:
    H = population_hessian(m.theta, m, d)
    C = gradient_covariance(m.theta, m, d)
    return relative_gap(H, C)


FIG_FLAT_MODEL = CliqueParams(4, (0, 1, 2, 3), 0.05, 0.0)


def suite_monotone(seed: int) -> list[Check]:
    """Gamma^{k+1} <= Gamma^k in the PSD order; traces strictly fall on the flat model."""
    rng = RngStream.derive(seed, 102)
    gaps = _Tracker("psd_gap(Gamma^k - Gamma^(k+1))", -1e-8, ">=")
    flat = build_clique_ising(FIG_FLAT_MODEL)
    models = [("flat", flat)] + [
        (f"random#{i}", random_model(2 + i % 3, rng)) for i in range(10)
    ]
    for label, m in models:
        for k, g in enumerate(check_gamma_monotone(m), start=1):
            gaps.add(g, f"{label} k={k} theta={m.theta.tolist()}")
    drop = _Tracker("flat model Tr(Gamma^k) - Tr(Gamma^(k+1))", 0.0, ">=")
    traces = [float(np.trace(gamma_pl(flat, UniformK(4, k)))) for k in range(1, 5)]
    for k in range(3):
        diff = traces[k] - traces[k + 1]
        drop.add(diff if diff > 0 else -abs(diff) - 1e-300, f"flat k={k + 1} traces={traces}")
    return [gaps.check, drop.check]


def variance_bound_instances(seed: int, count: int = 20):
    """(label, model, mask law, chain used for the Poincare constant)."""
    rng = RngStream.derive(seed, 103)
    out = []
    for i in range(count):
        n = 1 + i % 3
        m = random_model(n, rng)
        kind = i % 4
        if kind == 0 or n == 1:
            d = UniformK(n, 1 + rng.randbelow(n))
            cm = transition_matrix(m, KGibbs(d.k))
        elif kind == 1:
            d = random_weighted(n, rng)
            cm = transition_matrix(m, WeightedBlock(d))
        else:
            d = random_adaptive(n, rng)
            cm = adaptive_marginal_matrix(m, d)
        out.append((f"{type(d).__name__} n={n} theta={m.theta.tolist()}", m, d, cm))
    return out


def suite_variance_bound(seed: int) -> list[Check]:
    """Gamma_PL <= C * I^{-1} with C the Poincare constant of the matching block dynamics."""
    t = _Tracker("psd_gap(C I^-1 - Gamma)", -1e-8, ">=")
    adaptive = 0
    for label, m, d, cm in variance_bound_instances(seed):
        C = poincare_constant(cm)
        adaptive += isinstance(d, Adaptive)
        t.add(check_variance_bound(m, d, C), f"{label} C={C}")
    return [t.check]


def dirichlet_chains(seed: int, count: int = 10):
    rng = RngStream.derive(seed, 104)
    out = []
    for i in range(count):
        n = 1 + i % 3
        m = random_model(n, rng)
        kind = i % 3
        if kind == 0:
            d = UniformK(n, 1 + rng.randbelow(n))
            cm = transition_matrix(m, KGibbs(d.k))
        elif kind == 1:
            d = random_weighted(n, rng)
            cm = transition_matrix(m, WeightedBlock(d))
        else:
            d = random_adaptive(n, rng)
            cm = transition_matrix(m, AdaptiveBlock(d))
        out.append((f"{type(d).__name__} n={n}", m, d, cm))
    return out


def suite_dirichlet(seed: int) -> list[Check]:
    """Matrix Dirichlet form equals the expected block covariance."""
    rng = RngStream.derive(seed, 105)
    t = _Tracker("|E_matrix(f,g) - E_cov(f,g)|", 1e-10, "<=")
    for label, m, d, cm in dirichlet_chains(seed):
        for _ in range(20):
            f = rng.random_array(cm.size) * 2 - 1
            g = rng.random_array(cm.size) * 2 - 1
            diff = abs(dirichlet_form(cm, f, g) - dirichlet_form_cov(m, d, f, g))
            t.add(diff, label)
    return [t.check]


def convexity_instances(seed: int, count: int = 50):
    rng = RngStream.derive(seed, 106)
    out = []
    for i in range(count):
        n = 2 + i % 3
        truth = random_model(n, rng)
        if i % 5 == 4:
            d = random_adaptive(n, rng)
        else:
            d = UniformK(n, 1 + rng.randbelow(n))
        data = make_dataset(truth, d, 30, 2, RngStream(rng.next_u64()), RngStream(rng.next_u64()))
        theta = 2.0 * rng.random_array(n_params(n)) - 1.0
        out.append((f"{d!r} n={n} theta={theta.tolist()}", data, d, theta))
    return out


def suite_convexity(seed: int) -> list[Check]:
    """Loss Hessian is PSD and the analytic gradient matches central differences."""
    eig = _Tracker("loss Hessian eigmin", -1e-8, ">=")
    grad = _Tracker("gradient vs finite difference (relative)", 1e-5, "<=")
    for label, data, d, theta in convexity_instances(seed):
        H = loss_hessian(theta, data, d)
        eig.add(psd_gap(H), label)
        g = mple_gradient(theta, data, d)
        fd = finite_diff_gradient(lambda t: mple_loss(t, data, d), theta, 1e-5)
        grad.add(float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-6)), label)
    return [eig.check, grad.check]


def mode_instances(seed: int, count: int = 10) -> list[CliqueParams]:
    rng = RngStream.derive(seed, 107)
    return [random_strong_clique(rng) for _ in range(count)]


def suite_modes(seed: int) -> list[Check]:
    """Two-mode ordering and the e^{2 h_G} flip ratio by full enumeration."""
    pm = _Tracker("min log p(R+) - max log p(R-)", 0.0, ">=")
    mr = _Tracker("min log p(R-) - 2 J_0 - max log p(rest)", 0.0, ">=")
    ratio = _Tracker("flip ratio relative error vs e^(2 h_G)", 1e-9, "<=")
    for p in mode_instances(seed):
        rep = verify_mode_ordering(p)
        label = f"n={p.n} clique={p.clique} J={p.J} h={p.h}"
        # strict margins: a zero margin must fail, so nudge it below the bound
        pm.add(rep.plus_minus_margin if rep.plus_minus_margin > 0 else -1.0, label)
        if math.isfinite(rep.max_log_rest):
            mr.add(rep.minus_rest_margin if rep.minus_rest_margin > 0 else -1.0, label)
        ratio.add(rep.max_ratio_error if rep.involution_ok else math.inf, label)
    return [pm.check, mr.check, ratio.check]


def hitting_instances(seed: int, count: int = 5):
    rng = RngStream.derive(seed, 108)
    out = []
    for _ in range(count):
        p = random_strong_clique(rng)
        k = p.size + rng.randbelow(p.n - p.size + 1)
        out.append((p, k))
    return out


def suite_hitting(seed: int, horizons=(1, 5, 20)) -> list[Check]:
    """Exact absorption probability within T steps is at least 1 - c_R1^T."""
    t = _Tracker("P(hit R+ by T) - (1 - c_R1^T)", -1e-12, ">=")
    for p, k in hitting_instances(seed):
        m = build_clique_ising(p)
        c = mode_fast_constant(p, k)
        # worst case over every start outside R_plus
        starts = [x for x in range(1 << p.n) if (x & m_clique_bits(p)) != m_clique_bits(p)]
        for T in horizons:
            prob = hitting_probability_exact(m, KGibbs(k), starts, p.clique, T)
            t.add(prob - (1.0 - c**T), f"n={p.n} clique={p.clique} k={k} T={T} J={p.J}")
    return [t.check]


def m_clique_bits(p: CliqueParams) -> int:
    return sum(1 << i for i in p.clique)


# two-spin fixture over {0,1}^2, index = x0 + 2 x1
XS_JOINT = np.array([1 / 2, 1 / 6, 1 / 3, 0.0])
XS_MASKS = Adaptive(2, [1, 2], [[1 / 2, 1 / 2], [1 / 4, 3 / 4], [1 / 3, 2 / 3], [1 / 2, 1 / 2]])


def xs_fixture_values() -> dict[str, tuple[float, float]]:
    """(mask-aware, plain) conditionals under both index conventions."""
    # resample the unmasked coordinate x1 given x0 = 0 and K = {0}
    aware = adaptive_conditional(XS_JOINT, XS_MASKS, 0, 1, resample=(1,)).probs[0]
    plain = XS_JOINT[0] / (XS_JOINT[0] + XS_JOINT[2])
    # literal reading: complete x0 given x1 = 0 and K = {0}
    literal = adaptive_conditional(XS_JOINT, XS_MASKS, 0, 1).probs[0]
    literal_plain = XS_JOINT[0] / (XS_JOINT[0] + XS_JOINT[1])
    return {"complement": (aware, plain), "literal": (literal, literal_plain)}


def suite_fixtures(seed: int) -> list[Check]:
    """Two-spin adaptive fixture values and the marginalization identity."""
    vals = xs_fixture_values()
    expected = {"complement": (9 / 13, 3 / 5), "literal": (6 / 7, 3 / 4)}
    fx = _Tracker("fixture conditional error", 1e-12, "<=")
    for key, got in vals.items():
        for g, e in zip(got, expected[key]):
            fx.add(abs(g - e), key)
    ident = _Tracker("marginalization identity violation", 1e-10, "<=")
    ident.add(marginalization_identity_check(XS_JOINT, XS_MASKS), "fixture")
    rng = RngStream.derive(seed, 109)
    for i in range(20):
        n = 2 + i % 3
        m = random_model(n, rng)
        d = random_adaptive(n, rng)
        ident.add(marginalization_identity_check(joint_table(m).probs, d), f"n={n}")
    return [fx.check, ident.check]


SUITE_FUNCS = {
    "identity": suite_identity,
    "monotone": suite_monotone,
    "variance-bound": suite_variance_bound,
    "dirichlet": suite_dirichlet,
    "convexity": suite_convexity,
    "modes": suite_modes,
    "hitting": suite_hitting,
    "fixtures": suite_fixtures,
}


def run_suite(name: str, seed: int) -> list[Check]:
    if name not in SUITE_FUNCS:
        raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return SUITE_FUNCS[name](seed)
