import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tropic_twin import _kernels as K
from tropic_twin import brain, plant, psychro
from tropic_twin import surrogate as S
from tropic_twin.calib import excitation_trace


@pytest.fixture(scope="module")
def quick_model(cfg):
    """Small physics-informed model on a two-day sweep; coarse but smooth."""
    data = S.Dataset.from_trace(excitation_trace(cfg, days=2, seed=0))
    model, _ = S.train_piml(data, cfg.physics, S.TrainConfig(epochs=40, hidden=(16,), n_collocation=256), cfg)
    return model


@pytest.fixture(scope="module")
def day_exo():
    return plant.synth_workload_array(1, plant.CONTROL_PERIOD_S, 1)


def _state(cfg, base, inlet, rh):
    s = base.copy()
    s[K.S_T_IN] = inlet
    s[K.S_W_SUP] = psychro.humidity_ratio_from_rh(s[K.S_T_SUP], rh, cfg.ambient_pressure)
    return plant.PlantState.from_array(s, cfg.ambient_pressure)


def test_fixed_policy_is_constant_and_in_box(day_exo):
    acts = brain.fixed_policy().actions(day_exo)
    assert np.all(acts == np.array(brain.FIXED_ACTION))
    assert plant.ControlAction(*acts[0]).in_box()


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=9, max_size=9))
def test_emitted_actions_are_clamped(coeffs):
    exo = plant.synth_workload_array(1, plant.CONTROL_PERIOD_S, 0)
    for policy in (
        brain.Policy("parametric", np.array(coeffs).reshape(3, 3)),
        brain.Policy("lookup", np.tile(coeffs[:3], (len(exo), 1))),
        brain.Policy("fixed", coeffs[:3]),
    ):
        acts = policy.actions(exo)
        assert np.all(acts >= plant.ACTION_LOW) and np.all(acts <= plant.ACTION_HIGH)


def test_policy_shape_errors(day_exo):
    with pytest.raises(ValueError):
        brain.Policy("lookup", np.zeros((4, 2)))
    with pytest.raises(ValueError):
        brain.Policy("lookup", np.zeros((4, 3))).actions(day_exo)
    with pytest.raises(ValueError):
        brain.Policy("neural", np.zeros(3))


def test_constraint_set_mirrors_site(cfg):
    cs = brain.ConstraintSet.from_site(cfg)
    assert (cs.inlet_max, cs.rh_lo, cs.rh_hi) == (27.0, 30.0, 60.0)
    tight = cs.tightened(0.5, 2.0)
    assert (tight.inlet_max, tight.rh_lo, tight.rh_hi) == (26.5, 32.0, 58.0)


def test_penalty_examples(cfg, week_trace):
    cs = brain.ConstraintSet.from_site(cfg)
    base = week_trace.states[0]
    assert brain.constraint_penalty(_state(cfg, base, 25.0, 45.0), cs) == 0.0
    assert brain.constraint_penalty(_state(cfg, base, 28.0, 45.0), cs, 1000.0) == pytest.approx(1000.0)
    # Continuous across the boundary.
    assert brain.constraint_penalty(_state(cfg, base, 27.0 + 1e-6, 45.0), cs) < 1e-8
    with pytest.raises(ValueError):
        brain.constraint_penalty(_state(cfg, base, 25.0, 45.0), cs, -1.0)


@settings(max_examples=80, deadline=None)
@given(st.floats(15.0, 35.0), st.floats(5.0, 95.0))
def test_penalty_zero_iff_sla_met(cfg, week_trace, inlet, rh):
    state = _state(cfg, week_trace.states[0], inlet, rh)
    penalty = brain.constraint_penalty(state, brain.ConstraintSet.from_site(cfg))
    assert (penalty == 0.0) == (plant.sla_check(state, cfg) == [])


def test_fixed_policy_normalizes_to_exactly_one(cfg, day_exo):
    rep = brain.evaluate(brain.fixed_policy(), cfg, day_exo, "fixed")
    assert rep.normalized_power == 1.0
    assert 0.0 <= rep.sla_violation_periods <= 1.0
    parts = rep.power_fans + rep.power_pumps + rep.power_chillers + rep.power_towers
    assert parts == pytest.approx(rep.mean_cooling_power, rel=1e-12)


def test_evaluate_is_deterministic_and_serializes(cfg, day_exo):
    policy = brain.Policy("fixed", [22.0, 0.7, 9.0])
    a = brain.evaluate(policy, cfg, day_exo, "x")
    b = brain.evaluate(policy, cfg, day_exo, "x")
    assert a.to_json() == b.to_json() and a.periods_csv() == b.periods_csv()
    d = json.loads(a.to_json())
    assert {"mean_cooling_power", "normalized_power", "sla_violation_count", "sla_violation_periods"} <= d.keys()
    lines = a.periods_csv().splitlines()
    assert lines[0] == "period,sup_set_c,fan_ratio,chws_set_c,power_kw,violations"
    assert len(lines) == 1 + len(day_exo)


def test_cem_rejects_small_budget(cfg, day_exo):
    with pytest.raises(ValueError):
        brain.model_free_search(cfg, day_exo, budget=99)


def test_cem_is_seeded_and_never_worse_than_fixed(cfg, day_exo):
    a, log_a = brain.model_free_search(cfg, day_exo, budget=128, seed=4)
    b, _ = brain.model_free_search(cfg, day_exo, budget=128, seed=4)
    assert a.payload.tobytes() == b.payload.tobytes()
    assert log_a.generations == 4 and log_a.budget_exhausted
    assert log_a.interim_violations >= 1
    prm = plant.pack_params(cfg)
    cs = brain.ConstraintSet.from_site(cfg)
    fixed_map = np.zeros((3, 3))
    fixed_map[0] = brain.FIXED_ACTION
    fit_fixed, _ = brain._fitness(fixed_map, day_exo, prm, cfg, cs, brain.PENALTY_WEIGHT)
    fit_found, _ = brain._fitness(a.payload, day_exo, prm, cfg, cs, brain.PENALTY_WEIGHT)
    assert fit_found >= fit_fixed


def test_uni_pi_holds_chilled_water_and_improves_on_fixed(cfg, quick_model, day_exo):
    policy, info = brain.uni_pi_optimize(quick_model, cfg.physics, cfg, day_exo, steps=60)
    _, start = brain.uni_pi_optimize(quick_model, cfg.physics, cfg, day_exo, steps=0)
    acts = policy.actions(day_exo)
    assert np.all(acts[:, 2] == brain.FIXED_ACTION[2])
    assert np.all(info.predicted_objective <= start.predicted_objective)


def test_multi_pi_restarts_are_seeded(cfg, quick_model, day_exo):
    exo = day_exo[:8]
    a, _ = brain.multi_pi_optimize(quick_model, cfg.physics, cfg, exo, steps=40, seed=2)
    b, _ = brain.multi_pi_optimize(quick_model, cfg.physics, cfg, exo, steps=40, seed=2)
    assert a.payload.tobytes() == b.payload.tobytes()
    acts = a.actions(exo)
    assert np.all(acts >= plant.ACTION_LOW) and np.all(acts <= plant.ACTION_HIGH)


def test_zero_load_drives_fans_to_the_floor(cfg, quick_model):
    action = brain.zero_load_action(quick_model, cfg.physics, cfg)
    assert action[1] == pytest.approx(plant.ACTION_LOW[1])
