import numpy as np
import pytest

from metacog_rl.common.gaussian_process import (
    BaseGpLibrary,
    GpPosterior,
    SquaredExponential,
    gp_fit_direct,
    gp_kl,
    gp_predict,
    gp_predict_batch,
    gptd_fit,
    gptd_fit_segments,
    inducing_marginals,
    joint_kernel,
    min_kl_to_library,
    shift_inducing,
    spread_targets,
)
from metacog_rl.common.oracles import run_gp_oracle


KERNEL = SquaredExponential((1.0,), 1.0)


def line_inputs(L=6):
    return np.linspace(0.0, L - 1.0, L).reshape(-1, 1)


def test_gptd_two_samples():
    a, T, w2, r0 = 0.5, 0.1, 0.05, 0.8
    g = np.exp(-a * T)
    X = np.array([[0.0], [1.0]])
    gp = gptd_fit(X, np.array([r0]), KERNEL, w2, a, T)
    q = 1.0 - 2.0 * g * np.exp(-0.5) + g**2
    m1, _ = gp_predict(gp, X[0])
    m2, _ = gp_predict(gp, X[1])
    assert m1 - g * m2 == pytest.approx(r0 * q / (q + w2), rel=1e-10)


def test_gptd_literal_discount():
    X = np.array([[0.0], [1.0]])
    gp = gptd_fit(X, np.array([1.0]), KERNEL, 1e-6, 0.5, 0.1, td_discount="literal")
    m1, _ = gp_predict(gp, X[0])
    m2, _ = gp_predict(gp, X[1])
    assert m1 - m2 == pytest.approx(1.0, abs=1e-4)


def test_gptd_checks_counts():
    with pytest.raises(ValueError):
        gptd_fit(line_inputs(3), np.ones(3), KERNEL, 0.1, 0.5, 0.1)
    with pytest.raises(ValueError):
        gptd_fit(line_inputs(1), np.ones(0), KERNEL, 0.1, 0.5, 0.1)


def test_dense_oracle():
    cases = run_gp_oracle(seed=2)
    assert [c.name for c in cases] == ["direct/mean", "temporal_difference/mean"]
    assert all(c.passed for c in cases)


def test_single_segment_matches_gptd():
    rng = np.random.default_rng(0)
    X, R = line_inputs(), rng.normal(size=5)
    one = gptd_fit(X, R, KERNEL, 0.1, 0.5, 0.1, prior_mean=1.0)
    seg = gptd_fit_segments([(X, R)], KERNEL, 0.1, 0.5, 0.1, prior_mean=1.0)
    np.testing.assert_allclose(seg.alpha, one.alpha, atol=1e-12)
    np.testing.assert_allclose(seg.C, one.C, atol=1e-12)


def test_segments_are_not_linked():
    rng = np.random.default_rng(1)
    X1, R1 = line_inputs(4), rng.normal(size=3)
    X2, R2 = line_inputs(4) + 20.0, rng.normal(size=3)
    both = gptd_fit_segments([(X1, R1), (X2, R2)], KERNEL, 0.1, 0.5, 0.1)
    first = gptd_fit(X1, R1, KERNEL, 0.1, 0.5, 0.1)
    # far apart segments decouple: predictions on the first are those of its own fit
    np.testing.assert_allclose(gp_predict_batch(both, X1)[0], gp_predict_batch(first, X1)[0], atol=1e-8)


def dense_kl(mu1, S1, mu2, S2):
    d = mu1 - mu2
    _, ld1 = np.linalg.slogdet(S1)
    _, ld2 = np.linalg.slogdet(S2)
    return 0.5 * (np.trace(np.linalg.solve(S2, S1)) + d @ np.linalg.solve(S2, d) - len(d) + ld2 - ld1)


def test_kl_matches_dense_gaussian():
    rng = np.random.default_rng(4)
    X = line_inputs(5)
    g1 = gptd_fit(X, rng.normal(size=4), KERNEL, 0.2, 0.5, 0.1)
    g2 = gptd_fit(X, rng.normal(size=4), KERNEL, 0.4, 0.5, 0.1, prior_mean=0.3)
    kl = gp_kl(g1, g2, jitter=0.0)
    expected = dense_kl(*inducing_marginals(g1), *inducing_marginals(g2))
    assert kl == pytest.approx(expected, rel=1e-6)
    assert kl > 0
    assert gp_kl(g1, g1) == pytest.approx(0.0, abs=1e-6)


def test_kl_needs_shared_support():
    g1 = gptd_fit(line_inputs(3), np.ones(2), KERNEL, 0.1, 0.5, 0.1)
    g2 = gptd_fit(line_inputs(3) + 0.5, np.ones(2), KERNEL, 0.1, 0.5, 0.1)
    with pytest.raises(ValueError):
        gp_kl(g1, g2)


def test_shift_inducing_keeps_predictions():
    rng = np.random.default_rng(5)
    base = gptd_fit(line_inputs(8), rng.normal(size=7), KERNEL, 0.1, 0.5, 0.1, prior_mean=2.0)
    Z = np.array([[0.5], [3.0], [6.5]])
    shifted = shift_inducing(base, Z)
    m0, v0 = gp_predict_batch(base, Z)
    m1, v1 = gp_predict_batch(shifted, Z)
    np.testing.assert_allclose(m1, m0, atol=1e-8)
    np.testing.assert_allclose(v1, v0, atol=1e-8)
    with pytest.raises(ValueError):
        shift_inducing(base, np.zeros((0, 1)))


def test_spread_targets():
    X = np.array([[0.0], [1.0], [1.0]])
    np.testing.assert_array_equal(spread_targets(X, 3, KERNEL), [[0.0], [1.0]])
    X = np.array([[0.0], [0.0], [1.0], [2.0]])
    np.testing.assert_array_equal(spread_targets(X, 3, KERNEL), [[0.0], [1.0], [2.0]])
    assert spread_targets(line_inputs(10), 4, KERNEL).shape == (4, 1)


def test_min_kl_to_library():
    rng = np.random.default_rng(6)
    kernel = joint_kernel([1.0, 1.0], [10.0])
    X = np.column_stack([rng.normal(size=(6, 2)), np.ones(6)])
    gp = gptd_fit(X, rng.normal(size=5), kernel, 0.2, 0.5, 0.1)
    other = gptd_fit(X, rng.normal(size=5) + 3.0, kernel, 0.2, 0.5, 0.1)
    library = BaseGpLibrary((other, gp), (0.2, 0.4))
    best, kls = min_kl_to_library(gp, library, spread_targets(X, 3, kernel))
    assert len(kls) == 2
    assert best == min(kls)
    assert best == pytest.approx(0.0, abs=1e-6)
    assert kls[0] > kls[1]


def test_json_round_trip():
    X = np.column_stack([line_inputs(4), np.ones(4)])
    gp = gptd_fit(X, np.array([0.1, 0.2, 0.3]), joint_kernel([1.0], [5.0]), 0.1, 0.5, 0.1)
    back = GpPosterior.from_json(gp.to_json())
    np.testing.assert_array_equal(back.alpha, gp.alpha)
    assert back.kernel == gp.kernel


def test_direct_fit_interpolates():
    X = np.linspace(0.0, 3.0, 8).reshape(-1, 1)
    y = np.sin(X[:, 0])
    gp = gp_fit_direct(X, y, SquaredExponential((1.0,), 1.0), 1e-6, prior_mean=0.3)
    mean, var = gp_predict_batch(gp, X)
    np.testing.assert_allclose(mean, y, atol=1e-2)
    assert np.all(var < 1e-2)
    far_mean, far_var = gp_predict(gp, np.array([50.0]))
    assert far_mean == pytest.approx(0.3, abs=1e-9)
    assert far_var == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        gp_fit_direct(X, y[:3], SquaredExponential((1.0,), 1.0), 1e-6)


def test_gptd_mean_satisfies_td_rows():
    a, T, w2 = 0.5, 0.1, 0.25
    g = np.exp(-a * T)
    X = np.linspace(0.0, 5.0, 20).reshape(-1, 1)
    f = np.sin(X[:, 0])
    R = f[:-1] - g * f[1:]
    gp = gptd_fit(X, R, KERNEL, w2, a, T)
    mean, _ = gp_predict_batch(gp, X)
    assert np.all(np.abs(mean[:-1] - g * mean[1:] - R) <= 3.0 * np.sqrt(w2))


def test_kl_is_non_negative():
    rng = np.random.default_rng(7)
    X = line_inputs(6)
    for _ in range(20):
        w2 = rng.uniform(0.05, 1.0, size=2)
        m0 = rng.normal(size=2)
        g1 = gptd_fit(X, rng.normal(size=5), KERNEL, w2[0], 0.5, 0.1, prior_mean=m0[0])
        g2 = gptd_fit(X, rng.normal(size=5), KERNEL, w2[1], 0.5, 0.1, prior_mean=m0[1])
        assert gp_kl(g1, g2) >= -1e-8
        assert gp_kl(g2, g1) >= -1e-8
        assert gp_kl(g1, g1) == pytest.approx(0.0, abs=1e-6)
