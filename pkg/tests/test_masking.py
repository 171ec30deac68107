import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmlm_lab.ising import CliqueParams, IsingModel, block_conditional, build_clique_ising, joint_table
from gmlm_lab.masking import (
    Adaptive,
    FitOptions,
    MaskedDataset,
    UniformK,
    Weighted,
    adaptive_conditional,
    compile_design,
    design_from_dataset,
    features,
    fit_mple,
    load_mask,
    loss_hessian,
    make_dataset,
    marginalization_identity_check,
    mask_from_dict,
    mple_gradient,
    mple_loss,
    population_mask_design,
    random_adaptive,
    sample_mask,
)
from gmlm_lab.numerics import RngStream, finite_diff_gradient, psd_gap
from gmlm_lab.verify import XS_JOINT, XS_MASKS, random_model, xs_fixture_values


def dataset(n, configs, masks):
    return MaskedDataset(n, configs, np.asarray(masks).reshape(len(configs), -1))


# --- mask laws --------------------------------------------------------------


def test_uniform_full_set():
    d = UniformK(4, 4)
    rng = RngStream(0)
    assert all(sample_mask(d, 0, rng) == 0b1111 for _ in range(20))


def test_uniform_single_site_frequencies():
    d, rng = UniformK(4, 1), RngStream(1)
    counts = np.zeros(4)
    for _ in range(100_000):
        counts[sample_mask(d, 0, rng).bit_length() - 1] += 1
    assert np.all(np.abs(counts / 1e5 - 0.25) <= 0.01)


def test_uniform_blocks_enumerated():
    d = UniformK(5, 2)
    assert len(d.blocks) == 10
    assert np.allclose(d.probs(3), 0.1)
    assert d.block_index(0b00011) == d.blocks.index(0b00011)


def test_adaptive_fixture_mask_draws():
    rng = RngStream(2)
    draws = [sample_mask(XS_MASKS, 0, rng) for _ in range(40_000)]
    assert abs(draws.count(1) / len(draws) - 0.5) < 0.01


def test_mask_law_validation():
    with pytest.raises(ValueError):
        Weighted(3, [0b001, 0b010], [0.5, 0.5])  # does not cover coordinate 2
    with pytest.raises(ValueError):
        Weighted(2, [0b01, 0b10], [0.5, 0.6])
    with pytest.raises(ValueError):
        Adaptive(2, [0b01, 0b10], [[1.0, 0.0]] * 3)
    with pytest.raises(ValueError):
        UniformK(3, 0)


def test_mask_json_round_trip(tmp_path):
    for d in (UniformK(3, 2), Weighted(3, [0b011, 0b110], [0.3, 0.7]), XS_MASKS):
        back = mask_from_dict(d.to_dict())
        assert back.blocks == d.blocks
        assert np.allclose(back.probs(1), d.probs(1))
    import json

    path = tmp_path / "mask.json"
    path.write_text(json.dumps(XS_MASKS.to_dict()))
    assert isinstance(load_mask(path), Adaptive)
    with pytest.raises(ValueError):
        mask_from_dict({"type": "weird"})


# --- adaptive conditional -------------------------------------------------------


def test_independent_law_reduces_to_block_conditional():
    for seed in range(4):
        n = 1 + seed
        m = random_model(n, RngStream(seed))
        p = joint_table(m).probs
        blocks = [b for b in range(1, 1 << n)]
        table = np.tile(np.full(len(blocks), 1 / len(blocks)), (1 << n, 1))
        d = Adaptive(n, blocks, table)
        for x in range(1 << n):
            for K in blocks:
                members = [i for i in range(n) if (K >> i) & 1]
                got = adaptive_conditional(p, d, x, K).probs
                assert np.max(np.abs(got - block_conditional(m, x, members).probs)) <= 1e-12


def test_xs_fixture_both_conventions():
    vals = xs_fixture_values()
    aware, plain = vals["complement"]
    assert aware == pytest.approx(9 / 13, abs=1e-15) and plain == pytest.approx(3 / 5, abs=1e-15)
    aware, plain = vals["literal"]
    assert aware == pytest.approx(6 / 7, abs=1e-15) and plain == pytest.approx(3 / 4, abs=1e-15)
    # the mask-aware conditional differs from the plain one under both readings
    assert all(abs(a - b) > 0.05 for a, b in vals.values())


def test_adaptive_conditional_unreachable():
    table = [[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]
    d = Adaptive(2, [0b01, 0b10], table)
    with pytest.raises(ZeroDivisionError):
        adaptive_conditional(np.full(4, 0.25), d, 0, 0b10)


def test_marginalization_identity():
    assert marginalization_identity_check(joint_table(random_model(3, RngStream(0))), UniformK(3, 2)) <= 1e-15
    assert marginalization_identity_check(XS_JOINT, XS_MASKS) <= 1e-12
    rng = RngStream(5)
    for i in range(20):
        n = 2 + i % 3
        m = random_model(n, rng)
        assert marginalization_identity_check(joint_table(m), random_adaptive(n, rng)) <= 1e-10


# --- loss, gradient, Hessian -------------------------------------------------------


def test_features_layout():
    f = features(np.array([0b011]), 3)[0]
    assert list(f) == [1, 1, -1, 1, -1, -1]


def test_uniform_model_loss_is_k_ln2():
    rng = RngStream(3)
    for k in (1, 2, 3):
        d = UniformK(3, k)
        data = make_dataset(random_model(3, rng), d, 40, 2, RngStream(1), RngStream(2))
        assert mple_loss(np.zeros(6), data, d) == pytest.approx(k * math.log(2), abs=1e-14)


def test_two_spin_logistic_loss():
    data = dataset(2, [0b11], [[0b01]])
    theta = np.array([0.0, 0.0, 0.5])
    assert mple_loss(theta, data) == pytest.approx(-math.log(1 / (1 + math.exp(-1))), abs=1e-12)
    assert mple_loss(theta, data) == pytest.approx(0.313262, abs=1e-6)


def test_gradient_full_mask_at_zero():
    x = 0b101
    data = dataset(3, [x], [[0b111]])
    assert np.allclose(mple_gradient(np.zeros(6), data), -features(np.array([x]), 3)[0], atol=1e-15)


def test_gradient_matches_finite_differences():
    rng = RngStream(7)
    for i in range(50):
        n = 2 + i % 3
        truth = random_model(n, rng)
        d = random_adaptive(n, rng) if i % 4 == 3 else UniformK(n, 1 + rng.randbelow(n))
        data = make_dataset(truth, d, 25, 2, RngStream(i), RngStream(100 + i))
        theta = 2 * rng.random_array(truth.theta.size) - 1
        g = mple_gradient(theta, data, d)
        fd = finite_diff_gradient(lambda t: mple_loss(t, data, d), theta)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-6)


def test_hessian_full_mask_uniform_is_identity():
    configs = np.arange(4)
    data = dataset(2, configs, [[0b11]] * 4)
    assert np.allclose(loss_hessian(np.zeros(3), data), np.eye(3), atol=1e-15)


def test_hessian_singleton_support():
    data = dataset(3, [0b010], [[0b001]])
    H = loss_hessian(np.array([0.1, -0.2, 0.3, 0.4, -0.5, 0.6]), data)
    touched = [0, 3, 4]  # h_0, J_01, J_02
    mask = np.zeros(6, dtype=bool)
    mask[touched] = True
    assert np.abs(H[~mask][:, ~mask]).max() <= 1e-15 and np.abs(H[mask][:, ~mask]).max() <= 1e-15
    assert np.abs(H[np.ix_(mask, mask)]).max() > 0


def test_hessian_matches_gradient_differences():
    rng = RngStream(8)
    truth = random_model(3, rng)
    d = UniformK(3, 2)
    data = make_dataset(truth, d, 50, 1, RngStream(1), RngStream(2))
    theta = rng.random_array(6) - 0.5
    H = loss_hessian(theta, data, d)
    cols = []
    for i in range(6):
        e = np.zeros(6)
        e[i] = 1e-5
        cols.append((mple_gradient(theta + e, data, d) - mple_gradient(theta - e, data, d)) / 2e-5)
    assert np.allclose(H, np.array(cols).T, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 4), scale=st.floats(0.1, 3.0))
def test_hessian_psd_property(seed, n, scale):
    rng = RngStream(seed)
    d = UniformK(n, 1 + rng.randbelow(n))
    data = make_dataset(random_model(n, rng), d, 20, 1, RngStream(seed + 1), RngStream(seed + 2))
    theta = scale * (2 * rng.random_array(n + n * (n - 1) // 2) - 1)
    assert psd_gap(loss_hessian(theta, data, d)) >= -1e-8


def test_nonfinite_and_shape_errors():
    data = dataset(2, [0b11], [[0b01]])
    with pytest.raises(ValueError):
        mple_loss(np.zeros(2), data)
    with pytest.raises(ValueError):
        compile_design(2, [0], [0b100], [1.0])


# --- datasets ---------------------------------------------------------------


def test_dataset_csv_round_trip(tmp_path):
    d = UniformK(4, 2)
    data = make_dataset(build_clique_ising(CliqueParams(4, (0, 1, 2, 3), 0.3, 0.0)), d, 30, 3, RngStream(1), RngStream(2))
    path = tmp_path / "data.csv"
    data.write_csv(path)
    assert path.read_text().splitlines()[0] == "seq_index,config_bits,mask_bits"
    back = MaskedDataset.read_csv(path, 4)
    assert np.array_equal(back.configs, data.configs) and np.array_equal(back.masks, data.masks)


def test_dataset_masks_valid():
    d = UniformK(5, 3)
    data = make_dataset(random_model(5, RngStream(0)), d, 200, 2, RngStream(1), RngStream(2))
    assert all(bin(int(k)).count("1") == 3 for k in data.masks.ravel())


def test_population_mask_design_averages_masks():
    d = UniformK(3, 1)
    data = make_dataset(random_model(3, RngStream(4)), d, 40, 1, RngStream(1), RngStream(2))
    design = population_mask_design(data, d)
    theta = RngStream(9).random_array(6) - 0.5
    expected = np.mean(
        [mple_loss(theta, dataset(3, data.configs, [[1 << i]] * data.n_sequences)) for i in range(3)]
    )
    assert mple_loss(theta, design) == pytest.approx(expected, abs=1e-14)


# --- fitting ---------------------------------------------------------------------


def test_fit_symmetric_truth():
    truth = IsingModel.from_couplings(3, np.zeros(3), [])
    d = UniformK(3, 2)
    data = make_dataset(truth, d, 10_000, 1, RngStream(5), RngStream(6))
    fit = fit_mple(data, d)
    assert fit.converged and fit.grad_norm <= 1e-8
    assert np.linalg.norm(fit.theta_hat) <= 0.05


def _direct_mle(data):
    from scipy.optimize import minimize

    n = data.n
    feats = features(np.arange(1 << n), n)
    counts = np.bincount(data.configs, minlength=1 << n) / data.n_sequences

    def nll(theta):
        logits = feats @ theta
        top = logits.max()
        return -(counts @ logits) + top + math.log(np.exp(logits - top).sum())

    def grad(theta):
        logits = feats @ theta
        p = np.exp(logits - logits.max())
        p /= p.sum()
        return feats.T @ (p - counts)

    res = minimize(nll, np.zeros(feats.shape[1]), jac=grad, method="BFGS", options={"gtol": 1e-12})
    return res.x


def test_full_mask_fit_equals_direct_mle():
    for n in (2, 3):
        truth = random_model(n, RngStream(n))
        d = UniformK(n, n)
        data = make_dataset(truth, d, 2000, 1, RngStream(10 + n), RngStream(20 + n))
        fit = fit_mple(data, d)
        assert np.max(np.abs(fit.theta_hat - _direct_mle(data))) <= 1e-3


def test_fit_loss_never_increases():
    truth = random_model(3, RngStream(1))
    d = UniformK(3, 1)
    data = make_dataset(truth, d, 200, 1, RngStream(2), RngStream(3))
    design = design_from_dataset(data, d)
    losses = [fit_mple(design, d, FitOptions(max_iters=it)).loss for it in (0, 1, 5, 20, 100)]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))


def test_fit_reports_unconverged():
    truth = random_model(3, RngStream(1))
    d = UniformK(3, 2)
    data = make_dataset(truth, d, 100, 1, RngStream(2), RngStream(3))
    fit = fit_mple(data, d, FitOptions(max_iters=3))
    assert not fit.converged and fit.iterations == 3
    with pytest.raises(ValueError):
        FitOptions(step_size=0.0)


def test_flat_full_masks_beat_single_site():
    truth = build_clique_ising(CliqueParams(4, (0, 1, 2, 3), 0.05, 0.0))
    errs = {1: [], 4: []}
    for seed in range(10):
        for k in errs:
            d = UniformK(4, k)
            data = make_dataset(truth, d, 10_000, 1, RngStream.derive(seed, 0), RngStream.derive(seed, k))
            fit = fit_mple(data, d)
            errs[k].append(np.sum((fit.theta_hat - truth.theta) ** 2) / 10)
    assert np.mean(errs[4]) < np.mean(errs[1])


def test_all_blocks_listed_for_weighted_enumeration():
    d = Weighted(4, list(UniformK(4, 2).blocks), [1 / 6] * 6)
    assert sorted(d.blocks) == sorted(sum(1 << i for i in c) for c in combinations(range(4), 2))
