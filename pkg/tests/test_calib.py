import dataclasses

import numpy as np
import pytest

from tropic_twin import calib
from tropic_twin.errors import ParseError, ValidationError

from conftest import fixed_week


@pytest.fixture(scope="module")
def sweep(cfg):
    return calib.excitation_trace(cfg, days=7, seed=0)


@pytest.fixture(scope="module")
def short_sweep(cfg):
    return calib.excitation_trace(cfg, days=2, seed=1)


def test_self_replay_loss_is_zero(cfg, sweep, week_trace):
    assert calib.simulation_loss(cfg.physics, sweep, cfg) <= 1e-10
    assert calib.simulation_loss(cfg.physics, week_trace, cfg) <= 1e-10


def test_doubling_fan_coefficient_raises_loss(cfg, sweep):
    wrong = dataclasses.replace(cfg.physics, fan_cubic_coeff=2 * cfg.physics.fan_cubic_coeff)
    assert calib.simulation_loss(wrong, sweep, cfg) > calib.simulation_loss(cfg.physics, sweep, cfg)


def test_loss_is_deterministic(cfg, sweep):
    wrong = dataclasses.replace(cfg.physics, coil_ua=300.0)
    assert calib.simulation_loss(wrong, sweep, cfg) == calib.simulation_loss(wrong, sweep, cfg)


@pytest.mark.parametrize("name", calib.DEFAULT_FREE_PARAMS)
def test_truth_is_minimum_of_perturbation_grid(cfg, sweep, name):
    at_truth = calib.simulation_loss(cfg.physics, sweep, cfg)
    for factor in (0.7, 0.9, 1.1, 1.3):
        theta = dataclasses.replace(cfg.physics, **{name: factor * getattr(cfg.physics, name)})
        assert calib.simulation_loss(theta, sweep, cfg) > at_truth


def test_fan_coefficient_recovered_from_plus_30_percent(cfg, short_sweep):
    truth = cfg.physics.fan_cubic_coeff
    problem = calib.make_problem(short_sweep, cfg.physics, ["fan_cubic_coeff"], {"fan_cubic_coeff": 1.3 * truth})
    result = calib.calibrate(problem, cfg)
    assert abs(result.theta.fan_cubic_coeff / truth - 1) < 0.02
    assert result.history[-1] < result.history[0]
    assert result.non_identifiable == []


def test_init_at_truth_is_a_fixed_point(cfg, short_sweep):
    problem = calib.make_problem(short_sweep, cfg.physics)
    result = calib.calibrate(problem, cfg)
    assert result.iterations == 0 and result.converged
    assert result.theta == cfg.physics


def test_all_default_parameters_recovered_from_excitation(cfg, sweep):
    init = {n: 1.3 * getattr(cfg.physics, n) for n in calib.DEFAULT_FREE_PARAMS}
    result = calib.calibrate(calib.make_problem(sweep, cfg.physics, init=init), cfg)
    for n in calib.DEFAULT_FREE_PARAMS:
        assert abs(getattr(result.theta, n) / getattr(cfg.physics, n) - 1) < 0.05, n


def test_result_stays_inside_bounds(cfg, short_sweep):
    # The truth lies outside this box, so the descent must end pressed against it.
    truth = cfg.physics.coil_ua
    problem = calib.CalibrationProblem(
        short_sweep, ("coil_ua",), {"coil_ua": (1.5 * truth, 3 * truth)}, {"coil_ua": 2 * truth}, max_iters=40
    )
    result = calib.calibrate(problem, cfg)
    assert 1.5 * truth <= result.theta.coil_ua <= 3 * truth
    assert result.theta.coil_ua == pytest.approx(1.5 * truth, rel=1e-9)


def test_problem_validation(cfg, short_sweep):
    with pytest.raises(ValidationError) as exc:
        calib.make_problem(short_sweep, cfg.physics, ["foo"])
    assert "fan_cubic_coeff" in str(exc.value)
    with pytest.raises(ValidationError):
        calib.CalibrationProblem(short_sweep, (), {}, {})
    with pytest.raises(ValidationError):
        calib.CalibrationProblem(short_sweep, ("coil_ua",), {"coil_ua": (1.0, 2.0)}, {"coil_ua": 5.0})
    with pytest.raises(ValidationError):
        calib.CalibrationProblem(short_sweep, ("coil_ua",), {"coil_ua": (3.0, 2.0)}, {"coil_ua": 2.5})


def test_excitation_trace_flags_nothing(cfg, sweep):
    names = (*calib.DEFAULT_FREE_PARAMS, "cop_a1")
    rows = calib.identifiability_report(calib.make_problem(sweep, cfg.physics, names), cfg)
    assert [r.param for r in rows] == list(names)
    assert not any(r.flagged for r in rows)


def test_constant_action_trace_flags_cop_slope(cfg, week_trace):
    names = (*calib.DEFAULT_FREE_PARAMS, "cop_a1")
    rows = {r.param: r for r in calib.identifiability_report(calib.make_problem(week_trace, cfg.physics, names), cfg)}
    assert rows["cop_a1"].flagged
    assert not rows["fan_cubic_coeff"].flagged


def test_latin_hypercube_covers_every_stratum():
    a = calib.latin_hypercube_actions(50, 3)
    lo = np.array([16.0, 0.3, 5.0])
    hi = np.array([27.0, 1.0, 15.0])
    strata = np.floor((a - lo) / (hi - lo) * 50).astype(int)
    for d in range(3):
        assert sorted(strata[:, d]) == list(range(50))


def test_result_csv_round_trip(cfg, short_sweep):
    problem = calib.make_problem(short_sweep, cfg.physics, ["fan_cubic_coeff"], {"fan_cubic_coeff": 9.0}, max_iters=5)
    result = calib.calibrate(problem, cfg)
    text = calib.result_csv(result, cfg.physics, calib.identifiability_report(problem, cfg))
    assert text.splitlines()[0] == "param,init,recovered,truth_if_known,rel_err,sensitivity"
    parsed = calib.parse_result_csv(text)
    assert parsed["fan_cubic_coeff"] == pytest.approx(result.theta.fan_cubic_coeff, rel=1e-8)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "param,value\nfan_cubic_coeff,1\n",
        "param,init,recovered,truth_if_known,rel_err,sensitivity\nfoo,1,1,,,\n",
        "param,init,recovered,truth_if_known,rel_err,sensitivity\ncoil_ua,1,-3,,,\n",
        "param,init,recovered,truth_if_known,rel_err,sensitivity\ncoil_ua,1,abc,,,\n",
        "param,init,recovered,truth_if_known,rel_err,sensitivity\ncoil_ua,1,2\n",
    ],
)
def test_parse_result_csv_rejects_bad_files(text):
    with pytest.raises(ParseError):
        calib.parse_result_csv(text)


def test_fixed_week_replay_distinguishes_seeds(cfg):
    other = fixed_week(cfg, seed=1, days=1)
    assert calib.simulation_loss(cfg.physics, other, cfg) <= 1e-10
