import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from svmpvar.gibbs import PosteriorDraws
from svmpvar.irf import (
    CUMULATIVE_YEARS,
    InfeasibleShockError,
    ShockSpec,
    irf_analytic,
    irf_simulated,
    log_impulse,
    panel_baseline,
    posterior_irf,
    read_irf_csv,
    shock_calibration,
    structural_zero_check,
)
from svmpvar.model import ModelSpec, NonStationaryError
from svmpvar.simulate import demo_parameters

SPEC = ModelSpec(("temp", "gdp"), P=2, K=1, time_effects=False)


def _params(seed=0, **kw):
    return demo_parameters(SPEC, 3, 10, seed=seed, **kw)


def _draws(n=20, seed=0):
    g = np.random.default_rng(seed)
    sets = []
    for _ in range(n):
        p = _params()
        p.mean.gamma = p.mean.gamma + 0.05 * g.standard_normal(p.mean.gamma.shape) * np.tri(2)
        p.mean.beta = p.mean.beta + 0.02 * g.standard_normal(p.mean.beta.shape)
        p.vol.alpha = p.vol.alpha + 0.02 * g.standard_normal(p.vol.alpha.shape)
        sets.append(p)
    return PosteriorDraws.from_sets(SPEC, sets)


def test_level_responses_are_linear_in_size():
    p = _params()
    a = irf_analytic(p, ShockSpec("level", 1, 1.0), 8, SPEC)
    b = irf_analytic(p, ShockSpec("level", 1, -2.5), 8, SPEC)
    np.testing.assert_allclose(b.z, -2.5 * a.z, atol=1e-12)
    assert np.all(a.h == 0)


def test_volatility_responses_are_linear_in_the_log_impulse():
    p = _params()
    a = irf_analytic(p, ShockSpec("volatility", 0, 0.3, "log"), 8, SPEC)
    b = irf_analytic(p, ShockSpec("volatility", 0, 0.6, "log"), 8, SPEC)
    np.testing.assert_allclose(b.h, 2 * a.h, atol=1e-12)
    np.testing.assert_allclose(b.z, 2 * a.z, atol=1e-12)
    assert a.h[0, 0] == pytest.approx(0.3)


def test_no_volatility_in_mean_means_no_level_response():
    p = _params()
    p.mean.gamma[:] = 0.0
    r = irf_analytic(p, ShockSpec("volatility", 0, 0.5), 10, SPEC)
    assert np.all(r.z == 0)
    assert np.abs(r.sigma).max() > 0


def test_white_noise_volatility_by_hand():
    spec = ModelSpec(("temp", "gdp"), P=1, K=0, time_effects=False)
    p = demo_parameters(spec, 2, 5, theta=np.zeros((2, 2)))
    r = irf_analytic(p, ShockSpec("volatility", 0, 0.4, "log"), 4, spec)
    b0 = p.vol.b0
    dh0 = b0[:, 0] * 0.4 / b0[0, 0]
    np.testing.assert_allclose(r.h[0], dh0)
    assert np.all(r.h[1:] == 0)
    z = p.mean.gamma[0] @ dh0
    for t in range(5):
        np.testing.assert_allclose(r.z[t], z, atol=1e-14)
        z = p.mean.beta[0] @ z


def test_recursive_zeros_at_impact():
    p = _params()
    lv = irf_analytic(p, ShockSpec("level", 1, 1.0), 3, SPEC)
    vo = irf_analytic(p, ShockSpec("volatility", 1, 1.0), 3, SPEC)
    assert lv.z[0, 0] == 0.0
    assert vo.h[0, 0] == 0.0 and vo.z[0, 0] == 0.0
    assert lv.z[1, 0] != 0.0 or p.mean.beta[0][0, 1] == 0
    assert all(v == 0.0 for v in structural_zero_check(_draws(5)).values())


def test_calibration_examples():
    assert log_impulse(1.0, 0.0) == pytest.approx(2 * np.log(2))
    assert log_impulse(0.2, np.log(0.04)) == pytest.approx(2 * np.log(2))
    assert log_impulse(-0.5, 0.0) == pytest.approx(2 * np.log(0.5))
    with pytest.raises(InfeasibleShockError):
        log_impulse(-1.0, 0.0)


def test_native_volatility_shock_moves_sigma_by_its_size():
    p = _params()
    r = irf_analytic(p, ShockSpec("volatility", 0, 0.1), 3, SPEC)
    assert r.sigma[0, 0] == pytest.approx(0.1)


def test_zero_shock_simulations_cancel_exactly():
    p = _params()
    for kind in ("volatility", "level"):
        r = irf_simulated(p, ShockSpec.null(kind, 0), 6, SPEC, replications=1000, rng=1)
        assert np.all(r.z == 0) and np.all(r.h == 0) and np.all(r.sigma == 0)


@pytest.mark.parametrize("shock", [ShockSpec("volatility", 0, 0.5, "log"), ShockSpec("level", 1, 1.0),
                                   ShockSpec("volatility", 1, 0.3)])
def test_analytic_matches_simulation(shock):
    p = _params()
    a = irf_analytic(p, shock, 6, SPEC)
    s = irf_simulated(p, shock, 6, SPEC, replications=4000, rng=5)
    for exact, sim, se in ((a.z, s.z, s.z_se), (a.h, s.h, s.h_se), (a.sigma_mean, s.sigma, s.sigma_se)):
        assert np.all(np.abs(exact - sim) <= 4 * se + 1e-10)


def test_simulation_guards():
    p = _params()
    with pytest.raises(ValueError):
        irf_simulated(p, ShockSpec("level", 0), 3, SPEC, replications=10)
    q = _params(theta=np.array([[1.0, 0.0], [0.0, 0.5]]))
    with pytest.raises(NonStationaryError):
        irf_simulated(q, ShockSpec("level", 0), 3, SPEC, replications=1000)


def test_shock_parsing():
    v = ("temperature", "gdp_growth")
    assert ShockSpec.parse("+1C h_temperature", v) == ShockSpec("volatility", 0, 1.0)
    assert ShockSpec.parse("-1pp e_gdp", v) == ShockSpec("level", 1, -1.0)
    assert ShockSpec.parse("0.5log h_gdp", v) == ShockSpec("volatility", 1, 0.5, "log")
    assert ShockSpec.parse("2 t", v) == ShockSpec("level", 0, 2.0)
    for bad in ("one C h_temperature", "+1 h_rain", "0 h_gdp"):
        with pytest.raises(ValueError):
            ShockSpec.parse(bad, v)
    with pytest.raises(ValueError):
        ShockSpec("level", 0, 1.0, "log")


@given(st.integers(0, 10_000))
def test_bands_are_nested(seed):
    r = posterior_irf(_draws(8, seed), ShockSpec("volatility", 0, 0.5), 4)
    for b in (r.z, r.sigma, r.h, r.cumulative):
        assert np.all(b.q05 <= b.q16) and np.all(b.q16 <= b.q84) and np.all(b.q84 <= b.q95)
        assert np.all(b.q05 <= b.mean + 1e-12) and np.all(b.mean <= b.q95 + 1e-12)


def test_single_draw_collapses_the_bands():
    r = posterior_irf(_draws(1), ShockSpec("level", 1, 1.0), 5)
    for q in (r.z.q05, r.z.q16, r.z.q84, r.z.q95):
        np.testing.assert_allclose(q, r.z.mean, atol=1e-15)


def test_posterior_summary(tmp_path):
    draws = _draws(12)
    shock = ShockSpec("volatility", 0, 0.2)
    r = posterior_irf(draws, shock, 10)
    assert r.shock == shock
    assert r.delta == pytest.approx(shock_calibration(draws, shock))
    np.testing.assert_allclose(r.cumulative.mean[0], r.z.mean[:CUMULATIVE_YEARS].sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(r.impact.mean[0], r.z.mean[0])
    r.to_csv(tmp_path / "r.csv", header={"seed": 1}, summary_path=tmp_path / "s.csv")
    assert (tmp_path / "r.csv").read_text().startswith("# seed: 1\n")
    rows = read_irf_csv(tmp_path / "r.csv")
    assert list(rows[0]) == ["shock", "variable", "horizon", "mean", "q05", "q16", "q84", "q95"]
    assert len(rows) == 2 * 2 * 11
    assert {row["variable"] for row in rows} == {"temp", "gdp", "sigma_temp", "sigma_gdp"}
    summary = read_irf_csv(tmp_path / "s.csv")
    assert {row["measure"] for row in summary} == {"impact", f"cumulative_{CUMULATIVE_YEARS}y"}


def test_country_baseline_changes_sigma_only():
    draws = _draws(4)
    a = posterior_irf(draws, ShockSpec("volatility", 0, 0.2), 4)
    b = posterior_irf(draws, ShockSpec("volatility", 0, 0.2), 4, baseline="country", country=2)
    np.testing.assert_allclose(a.z.mean, b.z.mean)
    assert not np.allclose(a.sigma.mean, b.sigma.mean)
    with pytest.raises(ValueError):
        posterior_irf(draws, ShockSpec("level", 0), 4, baseline="country")


def test_panel_baseline_is_the_stationary_mean():
    p = _params()
    hb = panel_baseline(p)
    np.testing.assert_allclose(p.vol.alpha.mean(axis=0) + p.vol.theta @ hb, hb)
