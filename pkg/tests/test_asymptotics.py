import math

import numpy as np
import pytest

from gmlm_lab.asymptotics import (
    DegenerateHessianError,
    RealizabilityError,
    asymptotic_report,
    check_gamma_monotone,
    check_variance_bound,
    dump_reports,
    fisher_information,
    gamma_pl,
    gradient_covariance,
    mean_gradient,
    population_hessian,
    population_loss,
    relative_gap,
    summary_csv,
)
from gmlm_lab.ising import CapacityError, CliqueParams, IsingModel, build_clique_ising
from gmlm_lab.masking import UniformK, Weighted, random_adaptive
from gmlm_lab.numerics import RngStream, finite_diff_gradient, invert_spd, psd_gap
from gmlm_lab.verify import random_model

FLAT = build_clique_ising(CliqueParams(4, (0, 1, 2, 3), 0.05, 0.0))
PEAKY = build_clique_ising(CliqueParams(4, (0, 1, 2, 3), 0.3, 0.0))


def test_flat_traces_frozen():
    traces = [float(np.trace(gamma_pl(FLAT, UniformK(4, k)))) for k in range(1, 5)]
    assert traces == pytest.approx([28.2609, 15.3355, 11.4463, 10.1116], abs=1e-4)


def test_peaky_traces_frozen():
    traces = [float(np.trace(gamma_pl(PEAKY, UniformK(4, k)))) for k in range(1, 5)]
    assert traces == pytest.approx([43.73, 23.46, 17.82, 16.33], abs=1e-2)


def test_fisher_independent_spins():
    m = IsingModel.from_couplings(3, [0.2, -0.1, 0.4], [])
    assert np.allclose(fisher_information(m)[:3, :3], np.diag(1 - np.tanh([0.2, -0.1, 0.4]) ** 2), atol=1e-12)


def test_full_mask_gamma_is_inverse_fisher():
    rng = RngStream(3)
    for n in (2, 3, 4):
        m = random_model(n, rng)
        assert relative_gap(gamma_pl(m, UniformK(n, n)), invert_spd(fisher_information(m))) <= 1e-10


def test_fisher_of_uniform_model_is_identity():
    assert np.allclose(fisher_information(IsingModel.from_couplings(3, np.zeros(3), [])), np.eye(6), atol=1e-15)


def test_hessian_equals_gradient_covariance():
    rng = RngStream(4)
    for i in range(20):
        n = 2 + i % 3
        m = random_model(n, rng)
        d = random_adaptive(n, rng) if i % 2 else UniformK(n, 1 + rng.randbelow(n))
        H = population_hessian(m.theta, m, d)
        C = gradient_covariance(m.theta, m, d)
        assert relative_gap(H, C) <= 1e-10
        assert np.max(np.abs(mean_gradient(m.theta, m, d))) <= 1e-12


def test_population_loss_minimised_at_truth():
    m = random_model(3, RngStream(5))
    d = UniformK(3, 2)
    g = finite_diff_gradient(lambda t: population_loss(t, m, d), m.theta)
    assert np.max(np.abs(g)) <= 1e-6
    shifted = population_loss(m.theta + 0.1, m, d)
    assert shifted > population_loss(m.theta, m, d)


def test_realizability_guard():
    m = random_model(3, RngStream(6))
    with pytest.raises(RealizabilityError):
        population_hessian(m.theta + 0.05, m, UniformK(3, 1))


def test_gamma_monotone_in_k():
    rng = RngStream(7)
    for _ in range(10):
        m = random_model(4, rng)
        assert min(check_gamma_monotone(m)) >= -1e-9
    assert min(check_gamma_monotone(FLAT)) >= -1e-9
    with pytest.raises(ValueError):
        check_gamma_monotone(FLAT, 5)


def test_variance_bound_for_k_gibbs():
    from gmlm_lab.chains import KGibbs, poincare_constant, transition_matrix

    m = random_model(3, RngStream(8))
    for k in (1, 2, 3):
        C = poincare_constant(transition_matrix(m, KGibbs(k)))
        assert check_variance_bound(m, UniformK(3, k), C) >= -1e-9
    assert check_variance_bound(m, UniformK(3, 1), math.inf) == math.inf


def test_degenerate_hessian_reported():
    # one block that never touches coordinate 2 leaves h_2 unidentified
    d = Weighted(3, [0b011, 0b111], [1.0, 0.0])
    m = random_model(3, RngStream(9))
    with pytest.raises((DegenerateHessianError, ValueError)):
        gamma_pl(m, d)


def test_report_and_summary_outputs():
    rep = asymptotic_report(FLAT, UniformK(4, 2), "k=2")
    assert rep.equality_gap <= 1e-10 and not rep.degenerate
    assert rep.trace_gamma == pytest.approx(15.3355, abs=1e-4)
    assert '"label": "k=2"' in dump_reports([rep])
    lines = summary_csv(FLAT, [1, 2, 3, 4]).splitlines()
    assert lines[0] == "k,trace_gamma,eigmin_gap"
    assert len(lines) == 5 and lines[-1].endswith(",nan")
    assert all(float(line.split(",")[2]) >= -1e-9 for line in lines[1:4])


def test_capacity_guard():
    big = IsingModel.from_couplings(11, np.zeros(11), [])
    with pytest.raises(CapacityError):
        fisher_information(big)


def test_psd_gap_of_gamma_positive():
    assert psd_gap(gamma_pl(PEAKY, UniformK(4, 1))) > 0
