import math

import numpy as np
import pytest

from gmlm_lab.chains import (
    AdaptiveBlock,
    EnterPlus,
    IndependentParallel,
    KGibbs,
    LeaveLow,
    ReversibilityError,
    UnsupportedSamplerError,
    WeightedBlock,
    adaptive_marginal_matrix,
    clique_block_log_probs,
    clique_sum,
    dirichlet_form,
    dirichlet_form_cov,
    first_passage,
    hitting_probability_exact,
    mode_fast_constant,
    mode_fast_steps,
    mode_slow_constants,
    poincare_constant,
    poincare_variational_ratio,
    reversibility_defect,
    run_hitting_trials,
    step,
    transition_matrix,
)
from gmlm_lab.ising import (
    AssumptionError,
    CliqueParams,
    IsingModel,
    block_conditional,
    build_clique_ising,
    joint_table,
    sigmoid,
)
from gmlm_lab.masking import UniformK, Weighted, random_adaptive
from gmlm_lab.numerics import RngStream, tv_distance
from gmlm_lab.verify import XS_MASKS, random_model, random_strong_clique


def single_spin(h):
    return IsingModel.from_couplings(1, [h], [])


# --- exact kernels ---------------------------------------------------------


def test_single_spin_gibbs_matrix():
    h = 0.4
    P = transition_matrix(single_spin(h), KGibbs(1)).P
    plus = sigmoid(2 * h)
    assert np.allclose(P, [[1 - plus, plus], [1 - plus, plus]], atol=1e-15)


def test_full_block_rows_equal_joint():
    m = random_model(3, RngStream(1))
    P = transition_matrix(m, KGibbs(3)).P
    assert np.allclose(P, np.tile(joint_table(m).probs, (8, 1)), atol=1e-14)


def test_stationarity_and_reversibility():
    rng = RngStream(2)
    for i in range(10):
        n = 2 + i % 3
        m = random_model(n, rng)
        for spec in (KGibbs(1 + rng.randbelow(n)), WeightedBlock(Weighted(n, [1 << j for j in range(n)], [1 / n] * n))):
            cm = transition_matrix(m, spec)
            cm.check()
            assert reversibility_defect(cm) <= 1e-14


def test_adaptive_pair_chain_stationary():
    rng = RngStream(3)
    m = random_model(3, rng)
    d = random_adaptive(3, rng)
    cm = transition_matrix(m, AdaptiveBlock(d))
    assert cm.size == 8 * len(d.blocks)
    cm.check()
    marginal = adaptive_marginal_matrix(m, d)
    marginal.check()
    assert reversibility_defect(marginal) <= 1e-14


def test_poincare_oracles():
    assert poincare_constant(transition_matrix(single_spin(0.3), KGibbs(1))) == pytest.approx(1.0, abs=1e-12)
    # two independent fair spins under single-site Gibbs: lambda_2 = 1/2
    m = IsingModel.from_couplings(2, np.zeros(2), [])
    assert poincare_constant(transition_matrix(m, KGibbs(1))) == pytest.approx(2.0, abs=1e-12)
    assert poincare_constant(transition_matrix(m, KGibbs(2))) == pytest.approx(1.0, abs=1e-12)


def test_adaptive_pair_chain_is_reducible():
    m = random_model(2, RngStream(4))
    assert poincare_constant(transition_matrix(m, AdaptiveBlock(XS_MASKS))) == math.inf


def test_poincare_variational_ratio():
    rng = RngStream(5)
    for i in range(5):
        m = random_model(3, rng)
        cm = transition_matrix(m, KGibbs(1 + i % 3))
        C = poincare_constant(cm)
        assert poincare_variational_ratio(cm, C, rng, 200) >= 1 - 1e-8


def test_nonreversible_rejected():
    P = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    from gmlm_lab.chains import ChainMatrix

    cm = ChainMatrix(0, P, np.full(3, 1 / 3))
    with pytest.raises(ReversibilityError):
        poincare_constant(cm)


def test_independent_parallel_has_no_dirichlet_form():
    m = random_model(2, RngStream(6))
    cm = transition_matrix(m, IndependentParallel())
    assert np.allclose(cm.P.sum(axis=1), 1.0)
    with pytest.raises(UnsupportedSamplerError):
        dirichlet_form(cm, np.ones(4), np.ones(4))


def test_dirichlet_form_equals_conditional_covariance():
    rng = RngStream(7)
    for i in range(6):
        n = 2 + i % 2
        m = random_model(n, rng)
        d = UniformK(n, 1 + rng.randbelow(n))
        cm = transition_matrix(m, KGibbs(d.k))
        for _ in range(10):
            f, g = rng.random_array(1 << n), rng.random_array(1 << n)
            assert dirichlet_form(cm, f, g) == pytest.approx(dirichlet_form_cov(m, d, f, g), abs=1e-12)


def test_dirichlet_form_adaptive_pairs():
    rng = RngStream(8)
    m = random_model(3, rng)
    d = random_adaptive(3, rng)
    cm = transition_matrix(m, AdaptiveBlock(d))
    f, g = rng.random_array(cm.size), rng.random_array(cm.size)
    assert dirichlet_form(cm, f, g) == pytest.approx(dirichlet_form_cov(m, d, f, g), abs=1e-12)


# --- simulation --------------------------------------------------------------


def test_antiferromagnet_oscillates_under_parallel_updates():
    m = IsingModel.from_couplings(2, np.zeros(2), [(0, 1, -20.0)])
    rng = RngStream(9)
    x, flips, steps = 0b00, 0, 2000
    for _ in range(steps):
        y = step(m, IndependentParallel(), x, rng)
        flips += y == (~x & 0b11)
        x = y
    assert flips / steps >= sigmoid(40.0) ** 2 - 0.01


def test_gibbs_long_run_frequencies():
    m = IsingModel.from_couplings(2, [0.3, -0.2], [(0, 1, 0.5)])
    rng = RngStream(10)
    counts = np.zeros(4)
    x = 0
    for _ in range(1_000_000):
        x = step(m, KGibbs(1), x, rng)
        counts[x] += 1
    assert tv_distance(counts / counts.sum(), joint_table(m).probs) <= 0.01


def test_adaptive_long_run_frequencies():
    m = random_model(2, RngStream(11))
    rng = RngStream(12)
    counts = np.zeros(4)
    x = 0
    for _ in range(200_000):
        x = step(m, AdaptiveBlock(XS_MASKS), x, rng)
        counts[x] += 1
    assert tv_distance(counts / counts.sum(), joint_table(m).probs) <= 0.02


def test_clique_block_dp_matches_enumeration():
    m = build_clique_ising(CliqueParams(6, (0, 1, 2, 3, 4), 0.7, [0.2, -0.1, 0.3, 0.0, 0.5, 0.1]))
    members = [1, 2, 4]
    x = 0b101001
    direct = block_conditional(m, x, members).probs
    logp = clique_block_log_probs(m, x, members)
    assert np.allclose(np.exp(logp - logp.max()) / np.exp(logp - logp.max()).sum(), direct, atol=1e-12)


def test_large_clique_block_sampling_runs():
    p = CliqueParams(30, tuple(range(30)), 1.0, 0.1)
    m = build_clique_ising(p)
    rng = RngStream(13)
    x = 0
    for _ in range(20):
        x = step(m, KGibbs(30), x, rng)
    assert clique_sum(x, range(30)) == 30


# --- mode escape ---------------------------------------------------------------


def test_mode_constants_formulas():
    p = CliqueParams(10, tuple(range(8)), 3.0, [0.2] * 8 + [0.05, -0.05])
    J0, hG = 3.0 - 1.7, 1.6
    enter = math.exp(2 * (J0 + hG)) / (math.exp(2 * (J0 + hG)) + math.exp(2 * J0) + 2**8 - 2)
    for k in (8, 9, 10):
        include = math.comb(2, k - 8) / math.comb(10, k)
        assert mode_fast_constant(p, k) == pytest.approx(1 - include * enter, rel=1e-12)
    c = mode_fast_constant(p, 10)
    assert mode_fast_steps(c, 0.25) == math.ceil(math.log(0.25) / math.log(c))
    c_stuck, T = mode_slow_constants(p, 0.25)
    assert c_stuck == pytest.approx(2 * (-1 + math.tanh(J0) * 4) ** 2 / 8, rel=1e-12)
    assert T == math.floor(0.125 * math.exp(c_stuck))
    with pytest.raises(ValueError):
        mode_fast_constant(p, 5)
    with pytest.raises(AssumptionError):
        mode_slow_constants(CliqueParams(4, (0, 1, 2, 3), 0.1, 0.0), 0.25)


def test_mode_slow_reference_instance():
    p = CliqueParams(16, tuple(range(16)), 10.0, 0.1)
    c_stuck, T = mode_slow_constants(p, 0.5)
    J0 = 10.0 - 1.6
    expect = 2 * (-1 + math.tanh(J0) * 8) ** 2 / 16
    assert c_stuck == pytest.approx(expect, rel=1e-12)
    assert T == math.floor(0.25 * math.exp(expect))


def test_hitting_exact_bound_holds():
    rng = RngStream(14)
    for _ in range(3):
        p = random_strong_clique(rng, n_max=6)
        m = build_clique_ising(p)
        k = p.n
        c = mode_fast_constant(p, k)
        starts = [x for x in range(1 << p.n) if not EnterPlus(sum(1 << i for i in p.clique))(x)]
        for T in (1, 5):
            assert hitting_probability_exact(m, KGibbs(k), starts, p.clique, T) >= 1 - c**T - 1e-12


def test_first_passage_and_trials():
    p = CliqueParams(4, (0, 1, 2, 3), 3.0, 0.5)
    m = build_clique_ising(p)
    rng = RngStream(15)
    assert first_passage(m, KGibbs(4), 0b1111, EnterPlus(0b1111), 10, rng) == 0
    recs = run_hitting_trials(m, KGibbs(4), 0, None, 200, 8, seed=3)
    assert [r.trial for r in recs] == list(range(8))
    assert all(r.hit for r in recs)
    again = run_hitting_trials(m, KGibbs(4), 0, None, 200, 8, seed=3, jobs=2)
    assert again == recs


def test_leave_low_stop_rule():
    rule = LeaveLow((0, 1, 2, 3))
    assert not rule(0b0000) and not rule(0b0001) and rule(0b0011)


def test_spec_validation():
    m = random_model(3, RngStream(16))
    with pytest.raises(ValueError):
        transition_matrix(m, KGibbs(4))
    with pytest.raises(UnsupportedSamplerError):
        hitting_probability_exact(m, AdaptiveBlock(random_adaptive(3, RngStream(1))), 0, (0, 1), 1)
