"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.  The pipeline
criteria share two full seeded pipeline runs (a few minutes on one core).
"""

import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from tropic_twin import _kernels as K
from tropic_twin import calib, plant, psychro
from tropic_twin import surrogate as S
from tropic_twin.brain import FIXED_ACTION
from tropic_twin.cli import TRAIN_DAYS
from tropic_twin.errors import DomainError

from conftest import fd_gradient, fixed_week, random_graph, rel_err


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        assert ok, detail

    return emit


# --------------------------------------------------------------------------- 1


def test_psychrometrics_oracle(verdict):
    t0 = time.perf_counter()
    steam_table = 2.339
    psat_err = abs(psychro.saturation_pressure(20.0) / steam_table - 1)
    rng = np.random.default_rng(0)
    worst = 0.0
    for temp, rh, pressure in zip(rng.uniform(-10, 50, 1000), rng.uniform(1, 100, 1000), rng.uniform(90, 105, 1000)):
        w = psychro.humidity_ratio_from_rh(temp, rh, pressure)
        worst = max(worst, abs(psychro.relative_humidity(temp, w, pressure) / rh - 1))
    elapsed = time.perf_counter() - t0
    ok = psat_err <= 5e-3 and worst <= 1e-9 and elapsed < 1.0
    verdict("1 psychrometrics", ok, f"psat(20) rel err {psat_err:.2e}, round trip max {worst:.1e}, {elapsed:.2f} s")


# --------------------------------------------------------------------------- 2


def test_autodiff_matches_finite_differences(cfg, week_trace, verdict):
    t0 = time.perf_counter()
    worst_graph = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        build = random_graph(rng)
        x = rng.uniform(-1.0, 1.0, 3)
        g, out = build(x)
        grad = np.array([float(v) for v in g.backward(out)])
        worst_graph = max(worst_graph, rel_err(grad, fd_gradient(build, x)).max())

    # Smallest net between 5 inputs and 4 targets: one hidden unit, 14 weights.
    data = S.Dataset.from_trace(week_trace)
    rng = np.random.default_rng(0)
    p = S.init_params((S.N_INPUTS, 1, S.N_TARGETS), S.make_normalizers(data), rng)
    batch = data.subset(rng.choice(len(data), 32, replace=False))
    colloc = S.sample_collocation(32, rng)

    def loss(w):
        return S.composite_loss(p.with_weights(w), batch, colloc, cfg.physics, cfg, 1.0, 30.0)

    _, grad = loss(p.weights)
    h = 1e-5
    fd = np.array([(loss(p.weights + h * e)[0] - loss(p.weights - h * e)[0]) / (2 * h)
                   for e in np.eye(p.weights.size)])
    worst_loss = rel_err(grad, fd).max()
    elapsed = time.perf_counter() - t0
    ok = worst_graph <= 1e-5 and worst_loss <= 1e-5 and elapsed < 10.0
    verdict("2 autodiff", ok,
            f"random graphs max {worst_graph:.1e}, composite loss ({p.weights.size} weights) max {worst_loss:.1e}, "
            f"{elapsed:.2f} s")


# --------------------------------------------------------------------------- 3


def test_plant_conservation(cfg, verdict):
    t0 = time.perf_counter()
    worst_duty, worst_dt = 0.0, 0.0
    for action, exo in [((20.0, 0.9, 7.0), (0.5, 26.0)), ((24.0, 0.6, 10.0), (0.8, 28.0)), ((18.0, 1.0, 6.0), (0.3, 22.0))]:
        tr = plant.simulate(np.tile(action, (96, 1)), np.tile(exo, (96, 1)), cfg)
        s = tr.states[-1]
        heat = s[K.S_P_IT] + s[K.S_P_FAN]
        worst_duty = max(worst_duty, abs(s[K.S_Q_COIL] / heat - 1))
        airflow = cfg.n_crah * cfg.crah_rated_airflow * action[1]
        cp = K.CP_DRY + K.CP_VAPOR * s[K.S_W_RET]
        worst_dt = max(worst_dt, abs((s[K.S_T_RET] - s[K.S_T_SUP]) - heat / (airflow * cp)))
    elapsed = time.perf_counter() - t0
    ok = worst_duty <= 5e-3 and worst_dt <= 0.05 and elapsed < 5.0
    verdict("3 conservation", ok, f"duty vs heat max {worst_duty:.2e}, delta-T max {worst_dt:.2e} K, {elapsed:.2f} s")


# --------------------------------------------------------------------------- 4


def test_affinity_laws_are_exact(verdict):
    rated_fan, rated_pump = 7.5, 45.0
    fan_ok = all(plant.fan_power(r, rated_fan) == rated_fan * r**3 for r in (0.5, 0.8, 1.0))
    try:
        plant.fan_power(1.2, rated_fan)
        fan_limit_ok = False
    except DomainError:
        fan_limit_ok = True
    pump_ok = all(plant.pump_power(r, rated_pump) == rated_pump * r**3 for r in (0.5, 0.8, 1.0, 1.2))
    ok = fan_ok and fan_limit_ok and pump_ok
    verdict("4 affinity", ok,
            f"fan {{0.5,0.8,1.0}} exact={fan_ok}, fan 1.2 outside the fan box raises={fan_limit_ok}, "
            f"pump {{0.5,0.8,1.0,1.2}} exact={pump_ok}")


# --------------------------------------------------------------------------- 5


def test_calibration_recovery(cfg, verdict):
    t0 = time.perf_counter()
    truth = cfg.physics
    trace = calib.excitation_trace(cfg, days=7, seed=0)
    errors = {}
    for name in calib.DEFAULT_FREE_PARAMS:
        for factor in (0.7, 1.3):
            problem = calib.make_problem(trace, truth, [name], {name: factor * getattr(truth, name)})
            result = calib.calibrate(problem, cfg)
            errors[(name, factor)] = abs(getattr(result.theta, name) / getattr(truth, name) - 1)
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    ok = all(e <= 0.02 for e in errors.values()) and elapsed < 120.0
    verdict("5 calibration", ok,
            f"{len(errors)} runs, worst {worst[0]} x{worst[1]} rel err {errors[worst]:.1e}, {elapsed:.1f} s")


# --------------------------------------------------------------------------- 6


def test_physics_informed_beats_data_driven(cfg, verdict):
    t0 = time.perf_counter()
    # One calibration on the operating trace the twin would see first.
    operating = fixed_week(cfg, seed=0)
    per_day = int(round(86400 / plant.CONTROL_PERIOD_S))
    init = {n: 1.3 * getattr(cfg.physics, n) for n in calib.DEFAULT_FREE_PARAMS}
    theta = calib.calibrate(
        calib.make_problem(operating.slice(0, TRAIN_DAYS * per_day), cfg.physics, init=init), cfg
    ).theta

    lines, strict, piml_means = [], True, []
    for seed in (0, 1, 2):
        trace = operating if seed == 0 else fixed_week(cfg, seed=seed)
        train, test = S.measured_split(trace, S.SensorNoise(), seed, TRAIN_DAYS)
        tc = S.TrainConfig(seed=seed)
        data_model, _ = S.train_data_driven(train, tc)
        piml_model, _ = S.train_piml(train, theta, tc, cfg)
        dd = S.evaluate_errors(data_model, test).mean_rel_err
        pi = S.evaluate_errors(piml_model, test).mean_rel_err
        strict &= bool(np.all(pi < dd))
        piml_means.append(pi.mean())
        lines.append(f"seed {seed} piml {np.round(pi, 4).tolist()} data {np.round(dd, 4).tolist()}")
    elapsed = time.perf_counter() - t0
    target = max(piml_means) < 0.05
    ok = strict and elapsed < 300.0
    verdict("6 piml ordering", ok,
            "; ".join(lines) + f"; {elapsed:.0f} s; target piml mean < 5 %: {'met' if target else 'missed'}")


# --------------------------------------------------------------------------- 7-9


def _run_pipeline(cwd: Path) -> float:
    cwd.mkdir()
    env = dict(os.environ)
    env.pop("TROPIC_TWIN_DISABLE_JIT", None)
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "tropic_twin", "pipeline", "--out", "run", "--seed", "0"],
                         cwd=cwd, env=env, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert res.returncode == 0, res.stderr
    return elapsed


@pytest.fixture(scope="session")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    first = _run_pipeline(root / "a")
    second = _run_pipeline(root / "b")
    return root / "a" / "run", root / "b" / "run", first, second


def test_policy_ordering(pipeline_runs, verdict):
    out, _, elapsed, _ = pipeline_runs
    reports = {m: json.loads((out / f"report_{m}.json").read_text()) for m in ("fixed", "unipi", "multipi")}
    power = {m: r["mean_cooling_power"] for m, r in reports.items()}
    with open(out / "search_cem.csv") as f:
        interim = sum(1 for row in csv.DictReader(f) if int(row["violating_periods"]) > 0)
    ordered = power["multipi"] < power["unipi"] < power["fixed"]
    multi_clean = reports["multipi"]["sla_violation_count"] == 0
    ok = ordered and multi_clean and interim >= 1 and elapsed < 600.0
    verdict("7 policy ordering", ok,
            f"multi {power['multipi']:.1f} < uni {power['unipi']:.1f} < fixed {power['fixed']:.1f} kW: {ordered}; "
            f"multi violations {reports['multipi']['sla_violation_count']}; cem interim violations {interim}; "
            f"whole pipeline {elapsed:.0f} s")


def test_performance_budget(cfg, pipeline_runs, verdict):
    exo = plant.synth_workload_array(7, plant.CONTROL_PERIOD_S, 0)
    actions = np.tile(FIXED_ACTION, (len(exo), 1))
    plant.simulate(actions[:4], exo[:4], cfg)  # compile outside the timed call
    t0 = time.perf_counter()
    tr = plant.simulate(actions, exo, cfg)
    rollout = time.perf_counter() - t0
    _, _, first, second = pipeline_runs
    substeps = len(tr) * tr.substeps
    ok = substeps == 10080 and rollout < 2.0 and max(first, second) < 1200.0
    verdict("8 performance", ok,
            f"week rollout ({substeps} substeps) {rollout:.3f} s; pipeline {first:.0f} s / {second:.0f} s")


def test_pipeline_is_deterministic(pipeline_runs, verdict):
    a, b, _, _ = pipeline_runs
    files_a = sorted(p.relative_to(a).as_posix() for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b).as_posix() for p in b.rglob("*") if p.is_file())
    differing = [f for f in files_a if f in files_b and (a / f).read_bytes() != (b / f).read_bytes()]
    ok = files_a == files_b and not differing and len(files_a) > 10
    verdict("9 determinism", ok, f"{len(files_a)} files compared, differing: {differing or 'none'}")
