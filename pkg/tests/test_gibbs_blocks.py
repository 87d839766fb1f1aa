import numpy as np
import pytest
from scipy import stats

from oracles import direct_wls
from svmpvar.design import PanelDesign
from svmpvar.gibbs import (
    SingularPosteriorError,
    draw_impact_matrix,
    draw_q,
    draw_vol_var_params,
    mean_posterior,
    posterior_mean_coefficients,
    q_posterior,
)
from svmpvar.model import ModelSpec, PriorSpec, VolatilityParams, spectral_radius
from svmpvar.simulate import demo_parameters, simulate_panel

FLAT = PriorSpec(gamma_var=1e8)


@pytest.mark.parametrize("P,K,time_effects", [(1, 1, True), (2, 0, False), (1, 2, True)])
def test_mean_block_matches_direct_wls(P, K, time_effects):
    spec = ModelSpec(("temp", "gdp"), P=P, K=K, time_effects=time_effects, priors=FLAT)
    truth = demo_parameters(spec, 3, 30, seed=1)
    rec = simulate_panel(truth, spec, 3, 30, seed=2)
    design = PanelDesign(rec.dataset, spec)
    A = truth.impact.A
    got = design.to_coefficients(posterior_mean_coefficients(design, A, rec.true_states.h, spec.priors))
    want = direct_wls(rec.dataset, spec, A, rec.true_states.h)
    for key in ("c", "beta", "gamma"):
        np.testing.assert_allclose(getattr(got, key), want[key], atol=1e-6)
    np.testing.assert_allclose(got.tau[0], want["tau"], atol=1e-6)


def test_mean_block_draws_have_the_posterior_moments(small_record, small_spec):
    design = PanelDesign(small_record.dataset, small_spec)
    A = small_record.true_params.impact.A
    h = small_record.true_states.h
    P, b, free = mean_posterior(design, A, h, small_spec.priors)
    cov = np.linalg.inv(P)
    mean = cov @ b
    from svmpvar.gibbs import _draw_G

    g = np.random.default_rng(0)
    draws = np.array([_draw_G(design, A, h, small_spec.priors, g).T.reshape(-1)[free] for _ in range(3000)])
    z = (draws.mean(axis=0) - mean) / np.sqrt(np.diag(cov) / 3000)
    assert np.abs(z).max() < 4.5


def _weighted_ridge(X, y, w, var):
    aug_X = np.vstack([X * np.sqrt(w)[:, None], np.eye(X.shape[1]) / np.sqrt(var)])
    aug_y = np.concatenate([y * np.sqrt(w), np.zeros(X.shape[1])])
    return np.linalg.lstsq(aug_X, aug_y, rcond=None)[0]


def test_impact_rows_are_conjugate_regressions(rng):
    n, N = 400, 3
    A_true = np.array([[1, 0, 0], [0.4, 1, 0], [-0.3, 0.2, 1.0]])
    h = rng.normal(scale=0.5, size=(n, N))
    e = np.exp(0.5 * h) * rng.standard_normal((n, N))
    v = np.linalg.solve(A_true, e.T).T
    pri = PriorSpec(impact_var=2.0)
    imp, means = draw_impact_matrix(v, h, pri, rng, return_mean=True)
    for row in range(1, N):
        want = _weighted_ridge(-v[:, :row], v[:, row], np.exp(-h[:, row]), 2.0)
        np.testing.assert_allclose(means[row, :row], want, atol=1e-10)
    np.testing.assert_allclose(means, A_true, atol=0.15)
    assert np.allclose(np.diag(imp.A), 1) and np.allclose(np.triu(imp.A, 1), 0)


def test_q_draws_match_inverse_wishart_without_initial_correction(rng):
    M, T, N = 5, 40, 2
    h = [rng.normal(size=(T, N)) for _ in range(M)]
    pri = PriorSpec(initial_state="fixed", q_df=6.0, q_scale=0.5)
    cur = VolatilityParams(np.zeros((M, N)), 0.3 * np.eye(N), 0.2 * np.eye(N))
    df, S = q_posterior(h, cur.alpha, cur.theta, pri)
    assert df == 6.0 + M * (T - 1)
    draws = np.array([draw_q(h, cur, pri, rng)[0] for _ in range(3000)])
    np.testing.assert_allclose(draws.mean(axis=0), S / (df - N - 1), rtol=0.03, atol=2e-3)
    # the scale carries the transition residuals unless the mutation drops them
    assert not np.allclose(q_posterior(h, cur.alpha, cur.theta, pri, drop_data=True)[1], S)


def test_volatility_blocks_recover_a_long_simulated_var(rng):
    M, T, N = 40, 120, 2
    theta = np.array([[0.8, 0.0], [0.1, 0.6]])
    Q = np.array([[0.1, 0.02], [0.02, 0.08]])
    mu = rng.normal(scale=0.5, size=(M, N))
    alpha = mu @ (np.eye(N) - theta).T
    L = np.linalg.cholesky(Q)
    from scipy import linalg

    S0 = np.linalg.cholesky(linalg.solve_discrete_lyapunov(theta, Q))
    h = []
    for i in range(M):
        x = np.zeros((T, N))
        x[0] = mu[i] + S0 @ rng.standard_normal(N)
        for t in range(1, T):
            x[t] = alpha[i] + theta @ x[t - 1] + L @ rng.standard_normal(N)
        h.append(x)
    pri = PriorSpec()
    cur = VolatilityParams(np.zeros((M, N)), 0.5 * np.eye(N), 0.5 * np.eye(N))
    keep_t, keep_q = [], []
    for it in range(600):
        a, th, _ = draw_vol_var_params(h, cur, pri, rng)
        cur = VolatilityParams(a, th, cur.Q)
        q, _ = draw_q(h, cur, pri, rng)
        cur = VolatilityParams(a, th, q)
        assert spectral_radius(th) < 1
        if it >= 100:
            keep_t.append(th)
            keep_q.append(q)
    np.testing.assert_allclose(np.mean(keep_t, axis=0), theta, atol=0.05)
    np.testing.assert_allclose(np.mean(keep_q, axis=0), Q, atol=0.015)


def test_theta_stays_stationary_with_little_data(rng):
    M, N = 2, 2
    h = [rng.normal(size=(3, N)) for _ in range(M)]
    pri = PriorSpec(vol_coef_var=4.0)
    cur = VolatilityParams(np.zeros((M, N)), 0.1 * np.eye(N), np.eye(N))
    for _ in range(300):
        a, th, _ = draw_vol_var_params(h, cur, pri, rng)
        cur = VolatilityParams(a, th, cur.Q)
        assert spectral_radius(th) < 1


def test_flat_prior_with_constant_paths_is_singular(rng):
    M, N = 3, 2
    h = [np.zeros((10, N)) for _ in range(M)]
    pri = PriorSpec(vol_coef_var=1e8)
    cur = VolatilityParams(np.zeros((M, N)), 0.5 * np.eye(N), 0.1 * np.eye(N))
    with pytest.raises(SingularPosteriorError):
        draw_vol_var_params(h, cur, pri, rng)


def test_inverse_wishart_mean_reference():
    # sanity check of the reference moment used above
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    draws = stats.invwishart.rvs(df=9, scale=S, size=20000, random_state=1)
    np.testing.assert_allclose(draws.mean(axis=0), S / (9 - 3), rtol=0.05, atol=0.01)
