import numpy as np
import pytest

from svmpvar.geweke import battery, evaluate, geweke_joint_test, tiny_spec


def test_battery_labels_match_functionals():
    spec = tiny_spec()
    names = battery(spec, 2)
    from svmpvar.geweke import _design, draw_prior

    p = draw_prior(spec, _design(np.zeros((2, 10, 2)), spec), np.random.default_rng(0))
    assert evaluate(p, spec).shape == (len(names),)
    assert len(set(names)) == len(names)


def test_short_run_agrees():
    res = geweke_joint_test(n_draws=1000, seed=1)
    assert res.max_abs_z < 4.5, sorted(res.rows, key=lambda r: -abs(r.z))[:3]


def test_short_run_catches_the_broken_q_update():
    res = geweke_joint_test(n_draws=400, seed=1, T=12, mutation="q_drop_data")
    assert res.max_abs_z > 6
    worst = max(res.rows, key=lambda r: abs(r.z))
    assert "Q[" in worst.name


def test_without_observations_the_chain_keeps_the_prior():
    res = geweke_joint_test(n_draws=300, seed=2, T=1)
    assert res.max_abs_z < 4.5


def test_time_effects_refused():
    with pytest.raises(ValueError):
        geweke_joint_test(spec=tiny_spec().__class__(("a", "b"), P=1, K=1), n_draws=10)
