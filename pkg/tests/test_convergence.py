import csv

import numpy as np
import pytest

from decun.convergence import (ConvergenceTrace, b_sequence, error_trace, fixed_point,
                               is_divergent, lambda_max, layer_lambdas, operator_norm,
                               rate_bound_general, rate_bound_geometric, rate_bound_pseries,
                               read_trace_csv, reference_instance, simulate,
                               spectral_radius_G)
from decun.errors import (ConvergenceError, DegenerateReferenceError, IllPosedError,
                          ParameterError)
from decun.hqs import Observation, gradient_filters, layer_update
from decun.imaging import filter_spectrum, generate_linear_motion_kernel, synthetic_scene
from decun.network import DecunModel, ScheduleSpec

import dense_oracle


@pytest.fixture(scope="module")
def instance():
    return reference_instance()


@pytest.fixture(scope="module")
def fp(instance):
    return fixed_point(instance.d_bar, instance.beta_bar, instance.mu, instance.y,
                       instance.kernel)


def test_spectral_radius_zero_filters():
    k = generate_linear_motion_kernel(3, 0.0)
    assert spectral_radius_G(np.zeros((2, 3, 3)), np.ones((1, 1)), 1.0, 1.0, (8, 8)) == 0.0
    assert spectral_radius_G(np.zeros((1, 3, 3)), k, 5.0, 2.0, (7, 7)) == 0.0


@pytest.mark.parametrize("shape", [(6, 6), (8, 8)])
def test_spectral_radius_matches_dense_eigenvalues(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(3):
        f = rng.standard_normal((2, 3, 3))
        k = rng.random((3, 3))
        k /= k.sum()
        mu, beta = 10 ** rng.uniform(0, 2), 10 ** rng.uniform(-1, 1)
        G = dense_oracle.G_matrix(f, k, mu, beta, shape)
        ref = np.linalg.eigvalsh((G + G.T) / 2).max()
        assert spectral_radius_G(f, k, mu, beta, shape) == pytest.approx(ref, abs=1e-8)


def test_square_radius_not_above_radius():
    rng = np.random.default_rng(1)
    f = rng.standard_normal((2, 3, 3))
    k = rng.random((3, 3))
    G = dense_oracle.G_matrix(f, k / k.sum(), 20.0, 3.0, (6, 6))
    rho = np.abs(np.linalg.eigvals(G)).max()
    rho_sq = np.abs(np.linalg.eigvals(G @ G)).max()
    assert rho_sq <= rho + 1e-12
    assert rho < 1


def test_spectral_radius_decreases_with_data_weight():
    k = generate_linear_motion_kernel(1, 0.0)  # delta: |k| = 1 everywhere
    values = [spectral_radius_G(gradient_filters(), k, mu, 1.0, (16, 16))
              for mu in (1, 10, 100, 1e4, 1e8)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-7


def test_spectral_radius_degenerate():
    with pytest.raises(IllPosedError):
        spectral_radius_G(np.zeros((2, 3, 3)), np.array([[0.5, 0.5, 0.0]]), 1.0, 1.0, (8, 8))


def test_lambda_max_zero_schedule(instance):
    m = instance.model(ScheduleSpec.zero(), 6)
    shape = instance.y.shape
    lams = layer_lambdas(m, instance.kernel, shape)
    assert np.all(lams == lams[0])
    rho_star = spectral_radius_G(m.d_bar, instance.kernel, m.mu, m.beta_bar, shape)
    assert lambda_max(m, instance.kernel, shape) == max(lams[0], np.sqrt(0.5 * (1 + rho_star)))


def test_lambda_max_dominates_layers(instance):
    m = instance.model(ScheduleSpec.exponential(0.8))
    shape = instance.y.shape
    lam = lambda_max(m, instance.kernel, shape)
    assert np.all(layer_lambdas(m, instance.kernel, shape) <= lam)
    assert lam < 1
    with pytest.raises(ParameterError):
        lambda_max(m, instance.kernel, shape, l0_window=0)


def test_b_sequence():
    b = b_sequence(ScheduleSpec.exponential(0.5), 2.0, 1.0, 3)
    assert b[1] == 4.0
    assert np.allclose(b, [3 * 2 + 2, 4.0, 2.0, 1.0])
    assert not np.any(b_sequence(ScheduleSpec.zero(), 5.0, 2.0, 10))
    p = b_sequence(ScheduleSpec.p_series(3), 1.5, 4.0, 6)
    direct = [(3 * 1.5 + 2 / 16) / (i + 1) ** 3 for i in range(7)]
    assert np.allclose(p, direct, rtol=1e-14)


def test_general_bound_matches_naive_sum():
    rng = np.random.default_rng(2)
    b = rng.random(20)
    lam = 0.7
    got = rate_bound_general(b, lam, 3.0)
    for l in range(20):
        ref = lam ** (l + 1) * 3.0 + sum(lam ** (l - i) * b[i] for i in range(l + 1))
        assert got[l] == pytest.approx(ref, rel=1e-13)


@pytest.mark.parametrize("xi,gamma,lam", [(0.5, 0.5, 0.9), (0.2, 0.8, 0.6), (0.95, 0.3, 0.5)])
def test_geometric_closed_form_equals_convolution(xi, gamma, lam):
    s = ScheduleSpec.exponential(xi, gamma)
    b = b_sequence(s, 2.5, 3.0, 30)[:30]
    closed = rate_bound_geometric(xi, gamma, lam, 1.7, 2.5, 3.0, 30)
    conv = rate_bound_general(b, lam, 1.7)
    assert np.all(closed > 0)
    assert np.max(np.abs(closed - conv)) <= 1e-10


def test_geometric_first_term():
    # l = 0: lambda * w0 + 3|u*| + 2/beta^2 (the i = 0 summand has xi^0 = 1)
    got = rate_bound_geometric(0.3, 0.4, 0.6, 2.0, 1.5, 2.0, 1)[0]
    assert got == pytest.approx(0.6 * 2.0 + 3 * 1.5 + 2 / 4, rel=1e-14)


def test_geometric_decays():
    vals = rate_bound_geometric(0.5, 0.5, 0.9, 1.0, 1.0, 1.0, 400)
    assert vals[-1] < 1e-15
    ratio = vals[-1] / vals[-2]
    assert ratio == pytest.approx(0.9, rel=1e-2)


def test_geometric_singular():
    with pytest.raises(ParameterError, match="rate_bound_general"):
        rate_bound_geometric(0.5, 0.3, 0.5, 1.0, 1.0, 1.0, 5)
    with pytest.raises(ParameterError):
        rate_bound_geometric(0.5, 0.3, 1.0, 1.0, 1.0, 1.0, 5)


def test_pseries_bound():
    lam = 0.8
    got = rate_bound_pseries(2, lam, 1.0, 2.0, 3.0, 40)
    scale = 3 * 2.0 + 2 / 9
    for l in (0, 5, 39):
        ref = lam ** (l + 1) + scale * sum(lam ** (l - i) / (i + 1) ** 2 for i in range(l + 1))
        assert got[l] == pytest.approx(ref, rel=1e-12)
    assert np.all(np.diff(got[10:]) < 0)
    assert rate_bound_pseries(4, lam, 1.0, 2.0, 3.0, 31)[30] < got[30]
    big = rate_bound_pseries(60, lam, 1.0, 2.0, 3.0, 10)
    assert np.allclose(big, lam ** np.arange(1, 11) + scale * lam ** np.arange(10), rtol=1e-12)
    with pytest.raises(ParameterError):
        rate_bound_pseries(0.5, lam, 1.0, 2.0, 3.0, 4)


def test_fixed_point_identity_kernel():
    y = synthetic_scene(32, 1)
    res = fixed_point(gradient_filters(), 10.0, 1e7, y, np.ones((1, 1)), iterations=50)
    assert np.max(np.abs(res.u - y)) < 1e-6


def test_fixed_point_reference_instance(instance, fp):
    assert fp.residual < 1e-9
    obs = Observation(instance.y, instance.kernel)
    d_hat = filter_spectrum(instance.d_bar, instance.y.shape, real=True)
    _, w_next = layer_update(fp.w, d_hat, instance.beta_bar, instance.mu, obs)
    assert np.linalg.norm(w_next - fp.w) / np.linalg.norm(fp.w) < 1e-9


def test_fixed_point_failure_and_warning(instance):
    with pytest.raises(ConvergenceError) as info:
        fixed_point(instance.d_bar, instance.beta_bar, instance.mu, instance.y,
                    instance.kernel, iterations=2)
    assert info.value.residual > 1e-5
    with pytest.warns(RuntimeWarning):
        fixed_point(instance.d_bar, instance.beta_bar, instance.mu, instance.y,
                    instance.kernel, iterations=2, fail_tol=1.0)


def test_reference_instance_perturbations(instance):
    assert instance.e_banks.shape == (30, 2, 3, 3)
    for bank in instance.e_banks:
        assert operator_norm(bank, instance.y.shape) == pytest.approx(0.5, rel=1e-12)
        assert np.allclose(bank.sum(axis=(1, 2)), 0, atol=1e-14)


def test_error_trace_zero_schedule_decreases(instance, fp):
    t = error_trace(instance.model(ScheduleSpec.zero()), instance.y, instance.kernel, fp.w)
    assert len(t.error) == 30 and t.l[0] == 1
    assert np.all(np.diff(t.error[3:]) < 0)


def test_error_trace_orderings(instance, fp):
    def final(s):
        return error_trace(instance.model(s), instance.y, instance.kernel, fp.w).error[-1]

    assert final(ScheduleSpec.exponential(0.2)) <= final(ScheduleSpec.exponential(0.8))
    assert final(ScheduleSpec.p_series(4)) <= final(ScheduleSpec.p_series(1))


def test_error_trace_is_deterministic(instance, fp):
    m = instance.model(ScheduleSpec.exponential(0.6))
    a = error_trace(m, instance.y, instance.kernel, fp.w)
    b = error_trace(m, instance.y, instance.kernel, fp.w)
    assert np.array_equal(a.error, b.error)


def test_error_trace_degenerate_reference(instance):
    with pytest.raises(DegenerateReferenceError):
        error_trace(instance.model(ScheduleSpec.zero(), 2), instance.y, instance.kernel,
                    np.zeros((2,) + instance.y.shape))


def test_summable_limit_equals_hqs_fixed_point(instance, fp):
    m = DecunModel(instance.d_bar, np.resize(instance.e_banks, (120, 2, 3, 3)),
                   instance.beta_bar, instance.mu, ScheduleSpec.exponential(0.7))
    t = error_trace(m, instance.y, instance.kernel, fp.w)
    assert t.error[-1] < 1e-6


def test_bound_dominates_trace(instance, fp):
    for s in (ScheduleSpec.exponential(0.5), ScheduleSpec.p_series(2), ScheduleSpec.zero()):
        res = simulate(instance, s, fp=fp)
        scale = np.linalg.norm(fp.w)
        assert np.all(res.trace.error * scale <= res.trace.bound * scale + 1e-8)


def test_random_schedule_has_no_bound_and_diverges(instance, fp):
    res = simulate(instance, ScheduleSpec.gaussian_random(0), fp=fp)
    assert res.trace.bound is None
    assert res.divergent
    assert not simulate(instance, ScheduleSpec.exponential(0.5), fp=fp).divergent


def test_is_divergent_rule():
    assert not is_divergent(0.5 ** np.arange(30))
    assert not is_divergent(1.0 / np.arange(1, 31))
    assert is_divergent(np.concatenate([0.5 ** np.arange(10), np.full(20, 0.1)]))
    assert not is_divergent(np.full(30, 1e-9))


def test_csv_roundtrip(tmp_path, instance, fp):
    res = simulate(instance, ScheduleSpec.exponential(0.4), fp=fp)
    path = tmp_path / "trace.csv"
    res.trace.write_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["l", "error", "log_error", "lambda_l", "bound"]
    assert len(rows) == 31
    # 17 significant digits round-trip exactly
    back = read_trace_csv(path)
    assert np.array_equal(back.error, res.trace.error)
    assert np.array_equal(back.bound, res.trace.bound)
    assert np.allclose(back.error, np.exp([float(r[2]) for r in rows[1:]]), rtol=1e-12)


def test_csv_without_bound(tmp_path):
    t = ConvergenceTrace(l=np.arange(1, 4), error=np.array([0.5, 0.0, 0.1]),
                         lambda_l=np.full(3, 0.9))
    path = tmp_path / "t.csv"
    t.write_csv(path)
    back = read_trace_csv(path)
    assert back.bound is None
    assert np.isneginf(t.log_error[1])
