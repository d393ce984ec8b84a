"""Recover physics coefficients from an operating trace.

The trace's actions and weather are replayed through the plant under a
candidate parameter set and compared with the recorded states.  Descent runs
Adam in log-parameter space with central finite-difference gradients, which
keeps every coefficient positive and makes one learning rate fit them all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .autodiff import AdamState, adam_step
from .config import CHWS_SETPOINT_BOX, FAN_RATIO_BOX, PHYSICS_FIELDS, SUPPLY_SETPOINT_BOX, PhysicsParams, SiteConfig
from .errors import ParseError, ValidationError
from .plant import Trace, pack_params, simulate, steady_state_array, synth_workload_array

DEFAULT_FREE_PARAMS = ("fan_cubic_coeff", "pump_cubic_coeff", "coil_ua", "cop_a0", "zone_heat_capacity")

# Recorded channels compared during replay.
CHANNELS = (K.S_T_RET, K.S_RH_RET, K.S_M_W, K.S_P_FAN, K.S_P_PUMP, K.S_P_CH, K.S_P_TWR)
CHANNEL_NAMES = ("ret_temp", "ret_rh", "chw_flow", "p_fans", "p_pumps", "p_chillers", "p_towers")

# Stand-in loss for a replay that blows up, so the descent can back away from it.
DIVERGED_LOSS = 1e12
FD_REL_STEP = 1e-4
STALL_WINDOW = 20
LOW_SENSITIVITY = 1e-4  # conditional / marginal sensitivity ratio below this is flagged


@dataclass(frozen=True)
class CalibrationProblem:
    trace: Trace
    free_params: tuple[str, ...]
    bounds: dict[str, tuple[float, float]]
    init: dict[str, float]
    max_iters: int = 300
    tol: float = 1e-12
    learning_rate: float = 0.05
    final_lr_fraction: float = 0.02
    momentum: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "free_params", tuple(self.free_params))
        problems = []
        if not self.free_params:
            problems.append("free_params is empty")
        for name in self.free_params:
            if name not in PHYSICS_FIELDS:
                problems.append(f"unknown parameter {name!r}; valid names: {', '.join(PHYSICS_FIELDS)}")
                continue
            if name not in self.bounds or name not in self.init:
                problems.append(f"{name}: missing bounds or init")
                continue
            lo, hi = self.bounds[name]
            if not 0 < lo < hi:
                problems.append(f"{name}: bounds must satisfy 0 < lo < hi, got ({lo}, {hi})")
            elif not lo <= self.init[name] <= hi:
                problems.append(f"{name}: init {self.init[name]} outside [{lo}, {hi}]")
        if len(set(self.free_params)) != len(self.free_params):
            problems.append("free_params has duplicates")
        if len(self.trace) < 1:
            problems.append("trace is empty")
        if not 0 < self.momentum < 1:
            problems.append("momentum must lie in (0, 1)")
        if self.max_iters < 1 or not self.tol >= 0:
            problems.append("max_iters must be >= 1 and tol >= 0")
        if problems:
            raise ValidationError(problems)


def default_bounds(physics: PhysicsParams, names, spread: float = 3.0) -> dict[str, tuple[float, float]]:
    """A factor-of-``spread`` box around the nominal values."""
    return {n: (getattr(physics, n) / spread, getattr(physics, n) * spread) for n in names}


def make_problem(
    trace: Trace,
    nominal: PhysicsParams,
    free_params=DEFAULT_FREE_PARAMS,
    init: dict[str, float] | None = None,
    **controls,
) -> CalibrationProblem:
    """Problem with nominal-centred bounds; ``init`` defaults to the nominal values."""
    free_params = tuple(free_params)
    unknown = [n for n in free_params if n not in PHYSICS_FIELDS]
    if unknown:
        raise ValidationError([f"unknown parameter {n!r}; valid names: {', '.join(PHYSICS_FIELDS)}" for n in unknown])
    if init is None:
        init = {n: getattr(nominal, n) for n in free_params}
    return CalibrationProblem(trace, free_params, default_bounds(nominal, free_params), dict(init), **controls)


# ---------------------------------------------------------------------------
# Replay loss


def channel_scales(trace: Trace) -> np.ndarray:
    """Per-channel standard deviation of the record; flat channels fall back to
    1 % of their magnitude (or 1 when they are zero)."""
    rec = trace.states[:, CHANNELS]
    scale = rec.std(axis=0)
    fallback = np.maximum(0.01 * np.abs(rec).mean(axis=0), 1.0)
    return np.where(scale > 1e-9 * fallback, scale, fallback)


class _Replay:
    """Caches what every loss evaluation on one trace shares."""

    def __init__(self, trace: Trace, cfg: SiteConfig):
        self.trace = trace
        self.cfg = cfg
        self.scales = channel_scales(trace)
        self.recorded = trace.states[:, CHANNELS]
        self.substeps = trace.substeps

    def states(self, theta: PhysicsParams) -> np.ndarray:
        prm = pack_params(self.cfg, theta)
        tr = self.trace
        initial = steady_state_array(tr.actions[0], tr.exo[0], prm)
        return simulate(tr.actions, tr.exo, self.cfg, tr.dt, self.substeps, initial=initial, prm=prm).states

    def residuals(self, theta: PhysicsParams) -> np.ndarray:
        """Normalised per-row, per-channel errors, flattened."""
        return ((self.states(theta)[:, CHANNELS] - self.recorded) / self.scales).ravel()

    def loss(self, theta: PhysicsParams) -> float:
        err = (self.states(theta)[:, CHANNELS] - self.recorded) / self.scales
        value = float(np.mean(err * err))
        return value if math.isfinite(value) else DIVERGED_LOSS


def simulation_loss(theta: PhysicsParams, trace: Trace, cfg: SiteConfig) -> float:
    """Mean squared normalised replay error of ``theta`` against ``trace``.

    The replay starts from the steady state of the first recorded period under
    ``theta``, so a trace generated from its own steady state replays exactly.
    """
    if len(trace) < 1:
        raise ValueError("trace is empty")
    return _Replay(trace, cfg).loss(theta)


# ---------------------------------------------------------------------------
# Descent


@dataclass
class CalibrationResult:
    theta: PhysicsParams
    history: list[float]
    best_loss: float
    iterations: int
    converged: bool
    non_identifiable: list[str] = field(default_factory=list)
    init: dict[str, float] = field(default_factory=dict)


def _with_logs(base: PhysicsParams, names, logs) -> PhysicsParams:
    return replace(base, **{n: float(math.exp(v)) for n, v in zip(names, logs)})


def _in_bounds(theta: PhysicsParams, bounds: dict[str, tuple[float, float]]) -> PhysicsParams:
    """Undo exp/log round-off that can land a hair outside a bound."""
    return replace(theta, **{n: min(max(getattr(theta, n), lo), hi) for n, (lo, hi) in bounds.items()})


def _fd_gradient(replay: _Replay, base: PhysicsParams, names, logs, lo, hi):
    grad = np.zeros(len(names))
    for i in range(len(names)):
        up = logs.copy()
        dn = logs.copy()
        up[i] = min(logs[i] + FD_REL_STEP, hi[i])
        dn[i] = max(logs[i] - FD_REL_STEP, lo[i])
        span = up[i] - dn[i]
        if span <= 0:
            continue
        f_up = replay.loss(_with_logs(base, names, up))
        f_dn = replay.loss(_with_logs(base, names, dn))
        grad[i] = (f_up - f_dn) / span
    return grad


def calibrate(problem: CalibrationProblem, cfg: SiteConfig) -> CalibrationResult:
    """Adam on the replay loss; returns the best parameters seen."""
    names = problem.free_params
    replay = _Replay(problem.trace, cfg)
    base = cfg.physics
    lo = np.log([problem.bounds[n][0] for n in names])
    hi = np.log([problem.bounds[n][1] for n in names])
    logs = np.log([problem.init[n] for n in names])

    theta = replace(base, **{n: float(problem.init[n]) for n in names})
    loss = replay.loss(theta)
    history = [loss]
    best_loss, best_theta = loss, theta
    state = AdamState.zeros(len(names), learning_rate=problem.learning_rate, beta1=problem.momentum)
    ever_moved = np.zeros(len(names), dtype=bool)
    converged = loss <= problem.tol
    it = 0
    while not converged and it < problem.max_iters:
        grad = _fd_gradient(replay, base, names, logs, lo, hi)
        ever_moved |= np.abs(grad) >= 1e-12
        frac = it / max(1, problem.max_iters - 1)
        lr = problem.learning_rate * problem.final_lr_fraction ** frac
        logs, state = adam_step(logs, grad, state, learning_rate=lr)
        logs = np.clip(logs, lo, hi)
        it += 1
        theta = _in_bounds(_with_logs(base, names, logs), {n: problem.bounds[n] for n in names})
        loss = replay.loss(theta)
        history.append(loss)
        if loss < best_loss:
            best_loss, best_theta = loss, theta
        if best_loss <= problem.tol:
            converged = True
        elif len(history) > STALL_WINDOW and min(history[:-STALL_WINDOW]) - best_loss < problem.tol:
            converged = True

    return CalibrationResult(
        theta=best_theta,
        history=history,
        best_loss=best_loss,
        iterations=it,
        converged=converged,
        non_identifiable=[n for n, moved in zip(names, ever_moved) if not moved] if it else [],
        init=dict(problem.init),
    )


# ---------------------------------------------------------------------------
# Identifiability


@dataclass(frozen=True)
class SensitivityRow:
    param: str
    marginal: float  # RMS change of the normalised replay error per unit log change
    conditional: float  # the same once every other free parameter may compensate
    flagged: bool


def identifiability_report(problem: CalibrationProblem, cfg: SiteConfig) -> list[SensitivityRow]:
    """Finite-difference sensitivities of the replay residuals at ``init``.

    The marginal figure alone misses collinear pairs (e.g. COP intercept and
    slope when the setpoint never moves), so each parameter also gets its
    conditional sensitivity from the Fisher matrix; a parameter is flagged
    when that is a negligible fraction of its marginal sensitivity.
    """
    names = problem.free_params
    replay = _Replay(problem.trace, cfg)
    base = cfg.physics
    logs = np.log([problem.init[n] for n in names])
    n_res = replay.residuals(_with_logs(base, names, logs)).size
    jac = np.zeros((n_res, len(names)))
    for i in range(len(names)):
        up = logs.copy()
        dn = logs.copy()
        up[i] += FD_REL_STEP
        dn[i] -= FD_REL_STEP
        jac[:, i] = (
            replay.residuals(_with_logs(base, names, up)) - replay.residuals(_with_logs(base, names, dn))
        ) / (2 * FD_REL_STEP)
    jac /= math.sqrt(n_res)
    fisher = jac.T @ jac
    marginal = np.sqrt(np.diag(fisher))
    conditional = np.zeros(len(names))
    for i in range(len(names)):
        others = [j for j in range(len(names)) if j != i]
        if not others:
            conditional[i] = marginal[i]
            continue
        # Part of column i that the other columns cannot reproduce.
        coef, *_ = np.linalg.lstsq(jac[:, others], jac[:, i], rcond=None)
        conditional[i] = float(np.linalg.norm(jac[:, i] - jac[:, others] @ coef))
    rows = []
    for i, n in enumerate(names):
        flagged = marginal[i] < 1e-12 or conditional[i] < LOW_SENSITIVITY * marginal[i]
        rows.append(SensitivityRow(n, float(marginal[i]), float(conditional[i]), bool(flagged)))
    return rows


# ---------------------------------------------------------------------------
# Excitation and result files


def latin_hypercube_actions(n: int, seed: int) -> np.ndarray:
    """``n`` actions, one per stratum in each dimension of the action box."""
    rng = np.random.default_rng(seed)
    low = np.array([SUPPLY_SETPOINT_BOX[0], FAN_RATIO_BOX[0], CHWS_SETPOINT_BOX[0]])
    high = np.array([SUPPLY_SETPOINT_BOX[1], FAN_RATIO_BOX[1], CHWS_SETPOINT_BOX[1]])
    unit = np.empty((n, 3))
    for d in range(3):
        unit[:, d] = (rng.permutation(n) + rng.random(n)) / n
    return low + (high - low) * unit


def excitation_trace(cfg: SiteConfig, days: int = 7, seed: int = 0) -> Trace:
    """Plant response to a Latin-hypercube sweep of the action box."""
    exo = synth_workload_array(days, 900.0, seed)
    return simulate(latin_hypercube_actions(len(exo), seed), exo, cfg)


def result_csv(result: CalibrationResult, truth: PhysicsParams | None, report: list[SensitivityRow]) -> str:
    sens = {r.param: r for r in report}
    lines = ["param,init,recovered,truth_if_known,rel_err,sensitivity"]
    for name, init in result.init.items():
        rec = getattr(result.theta, name)
        if truth is not None:
            true = getattr(truth, name)
            truth_s, err_s = f"{true:.9g}", f"{abs(rec - true) / abs(true):.6e}"
        else:
            truth_s, err_s = "", ""
        s = sens.get(name)
        lines.append(f"{name},{init:.9g},{rec:.9g},{truth_s},{err_s},{'' if s is None else f'{s.conditional:.6e}'}")
    return "\n".join(lines) + "\n"


def parse_result_csv(text: str) -> dict[str, float]:
    """Recovered value per parameter from a file written by ``result_csv``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "param,init,recovered,truth_if_known,rel_err,sensitivity":
        raise ParseError("not a calibration result file", 1)
    out = {}
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split(",")
        if len(fields) != 6 or fields[0] not in PHYSICS_FIELDS:
            raise ParseError(f"bad calibration row {line!r}", lineno)
        try:
            value = float(fields[2])
        except ValueError:
            raise ParseError(f"bad recovered value {fields[2]!r}", lineno) from None
        if not (math.isfinite(value) and value > 0):
            raise ParseError(f"recovered value must be positive and finite, got {value}", lineno)
        out[fields[0]] = value
    return out
