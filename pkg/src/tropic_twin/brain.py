"""Setpoint policies for the hall and their evaluation on the plant.

Four ways to pick the 15-minute actions are compared:

* fixed      constant commissioning setpoints
* cem        cross-entropy search over an affine weather/load policy, scored
             by full plant rollouts (the model-free baseline)
* unipi      air-loop-only descent through the surrogate: fan power plus SLA
             penalty over (supply setpoint, fan ratio) with chilled water held
* multipi    descent over all three setpoints on the surrogate's predicted
             total cooling power, several restarts per period

All policies clamp what they emit to the action box.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels as K
from .autodiff import AdamState, Graph, Var, adam_step, exp, maximum, minimum
from .config import PhysicsParams, SiteConfig
from .plant import ACTION_HIGH, ACTION_LOW, CONTROL_PERIOD_S, SUBSTEP_S, PlantState, pack_params, simulate
from .surrogate import SurrogateParams, graph_predict

FIXED_ACTION = (20.0, 0.9, 7.0)
PENALTY_WEIGHT = 1000.0
SUBSTEPS = int(CONTROL_PERIOD_S / SUBSTEP_S)

METHOD_LABELS = {
    "fixed": "fixed setpoints",
    "cem": "model-free search (SAC stand-in)",
    "unipi": "air-loop physics-informed optimisation",
    "multipi": "whole-plant physics-informed optimisation",
}


# ---------------------------------------------------------------------------
# Policies


@dataclass(frozen=True)
class Policy:
    """``payload`` is a (3,) action for ``fixed``, a (K, 3) table for
    ``lookup`` and a (3, 3) affine map for ``parametric``; the parametric map
    multiplies the features (1, load deviation, wet-bulb deviation)."""

    kind: str
    payload: np.ndarray
    label: str = ""

    def __post_init__(self):
        p = np.array(self.payload, dtype=float)
        shapes = {"fixed": (3,), "parametric": (3, 3)}
        if self.kind in shapes:
            p = p.reshape(shapes[self.kind])
        elif self.kind == "lookup":
            if p.ndim != 2 or p.shape[1] != 3:
                raise ValueError("lookup payload must be (K, 3)")
        else:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        p.setflags(write=False)
        object.__setattr__(self, "payload", p)

    def actions(self, exo: np.ndarray) -> np.ndarray:
        """(K, 3) actions for the (K, 2) exogenous rows, clamped to the box."""
        exo = np.atleast_2d(np.asarray(exo, dtype=float))
        n = exo.shape[0]
        if self.kind == "fixed":
            raw = np.tile(self.payload, (n, 1))
        elif self.kind == "lookup":
            if self.payload.shape[0] != n:
                raise ValueError(f"lookup table has {self.payload.shape[0]} rows, forecast has {n}")
            raw = self.payload
        else:
            raw = policy_features(exo) @ self.payload
        return np.clip(raw, ACTION_LOW, ACTION_HIGH)


def policy_features(exo: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(len(exo)), (exo[:, 0] - 0.55) / 0.25, (exo[:, 1] - 26.0) / 2.0])


def fixed_policy(cfg: SiteConfig | None = None, action=FIXED_ACTION) -> Policy:
    return Policy("fixed", np.asarray(action, dtype=float), METHOD_LABELS["fixed"])


# ---------------------------------------------------------------------------
# Constraints


@dataclass(frozen=True)
class ConstraintSet:
    inlet_max: float
    rh_lo: float
    rh_hi: float
    action_low: tuple[float, float, float] = tuple(ACTION_LOW.tolist())
    action_high: tuple[float, float, float] = tuple(ACTION_HIGH.tolist())

    @classmethod
    def from_site(cls, cfg: SiteConfig) -> "ConstraintSet":
        return cls(cfg.sla_max_inlet_temp, cfg.sla_rh_min, cfg.sla_rh_max)

    def tightened(self, inlet_margin: float, rh_margin: float) -> "ConstraintSet":
        """Shrunk envelope for optimising against an imperfect model."""
        return ConstraintSet(
            self.inlet_max - inlet_margin,
            self.rh_lo + rh_margin,
            self.rh_hi - rh_margin,
            self.action_low,
            self.action_high,
        )


def _hinge_sq(x):
    return np.maximum(x, 0.0) ** 2


def penalty_values(inlet, rh, cs: ConstraintSet, weight: float = PENALTY_WEIGHT) -> np.ndarray:
    """Squared-hinge SLA penalty for arrays of inlet temperature and supply RH."""
    inlet = np.asarray(inlet, dtype=float)
    rh = np.asarray(rh, dtype=float)
    return weight * (_hinge_sq(inlet - cs.inlet_max) + _hinge_sq(cs.rh_lo - rh) + _hinge_sq(rh - cs.rh_hi))


def constraint_penalty(state: PlantState, cs: ConstraintSet, weight: float = PENALTY_WEIGHT) -> float:
    """kW-equivalent penalty, zero exactly when the state meets the SLA."""
    if weight < 0:
        raise ValueError("penalty weight must be >= 0")
    return float(penalty_values(state.it_inlet_temp, state.supply_air.rh, cs, weight))


def _penalty_graph(inlet: Var, rh: Var, cs: ConstraintSet, weight: float) -> Var:
    over = maximum(inlet - cs.inlet_max, 0.0)
    low = maximum(cs.rh_lo - rh, 0.0)
    high = maximum(rh - cs.rh_hi, 0.0)
    return weight * (over * over + low * low + high * high)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalReport:
    method: str
    label: str
    periods: int
    mean_cooling_power: float
    power_fans: float
    power_pumps: float
    power_chillers: float
    power_towers: float
    sla_violation_count: int
    sla_violation_periods: float
    normalized_power: float
    period_actions: np.ndarray = field(repr=False, default=None)
    period_power: np.ndarray = field(repr=False, default=None)
    period_violations: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> str:
        d = {k: v for k, v in asdict(self).items() if not k.startswith("period_")}
        for k, v in d.items():
            if isinstance(v, float):
                d[k] = float(f"{v:.9g}")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def periods_csv(self) -> str:
        lines = ["period,sup_set_c,fan_ratio,chws_set_c,power_kw,violations"]
        for k in range(self.periods):
            a = self.period_actions[k]
            lines.append(
                f"{k},{a[0]:.6f},{a[1]:.6f},{a[2]:.6f},{self.period_power[k]:.6f},{int(self.period_violations[k])}"
            )
        return "\n".join(lines) + "\n"


def _fine_rollout(actions: np.ndarray, exo: np.ndarray, prm: np.ndarray, cfg: SiteConfig) -> np.ndarray:
    return simulate(actions, exo, cfg, SUBSTEP_S, SUBSTEPS, keep_fine=True, prm=prm).fine


def _rollout_summary(actions, exo, prm, cfg):
    """Per-period mean power, per-period violating-substep counts and the
    week-mean power by category."""
    fine = _fine_rollout(actions, exo, prm, cfg)
    cols = fine[:, [K.S_P_FAN, K.S_P_PUMP, K.S_P_CH, K.S_P_TWR]]
    total = cols.sum(axis=1)
    viol = (
        (fine[:, K.S_T_IN] > cfg.sla_max_inlet_temp)
        | (fine[:, K.S_RH_SUP] < cfg.sla_rh_min)
        | (fine[:, K.S_RH_SUP] > cfg.sla_rh_max)
    )
    n = actions.shape[0]
    return (
        total.reshape(n, SUBSTEPS).mean(axis=1),
        viol.reshape(n, SUBSTEPS).sum(axis=1),
        cols.mean(axis=0),
        fine,
    )


def evaluate(policy: Policy, cfg: SiteConfig, exo: np.ndarray, method: str = "", seed: int = 0) -> EvalReport:
    """Roll the plant through ``exo`` under ``policy``.

    A period counts as violating when any of its substeps breaks the SLA.
    Power is normalised by the fixed policy's mean on the same week.
    ``seed`` is accepted for interface symmetry; the rollout itself is
    deterministic.
    """
    exo = np.asarray(exo, dtype=float)
    prm = pack_params(cfg)
    actions = policy.actions(exo)
    per_power, per_viol, by_cat, _ = _rollout_summary(actions, exo, prm, cfg)
    mean_power = float(per_power.mean())
    base_power, *_ = _rollout_summary(fixed_policy(cfg).actions(exo), exo, prm, cfg)
    violating = int(np.count_nonzero(per_viol))
    return EvalReport(
        method=method or policy.kind,
        label=policy.label,
        periods=len(exo),
        mean_cooling_power=mean_power,
        power_fans=float(by_cat[0]),
        power_pumps=float(by_cat[1]),
        power_chillers=float(by_cat[2]),
        power_towers=float(by_cat[3]),
        sla_violation_count=violating,
        sla_violation_periods=violating / len(exo),
        normalized_power=mean_power / float(base_power.mean()),
        period_actions=actions,
        period_power=per_power,
        period_violations=per_viol,
    )


# ---------------------------------------------------------------------------
# Model-free search


@dataclass
class SearchLog:
    generations: int = 0
    rollouts: int = 0
    # (generation, member, violating periods) for every scored candidate
    violations: list[tuple[int, int, int]] = field(default_factory=list)
    best_fitness: list[float] = field(default_factory=list)
    budget_exhausted: bool = False

    @property
    def interim_violations(self) -> int:
        return sum(1 for *_, v in self.violations if v > 0)


def _fitness(policy_map: np.ndarray, exo, prm, cfg, cs, weight) -> tuple[float, int]:
    actions = Policy("parametric", policy_map).actions(exo)
    fine = _fine_rollout(actions, exo, prm, cfg)
    power = fine[:, K.S_P_FAN] + fine[:, K.S_P_PUMP] + fine[:, K.S_P_CH] + fine[:, K.S_P_TWR]
    pen = penalty_values(fine[:, K.S_T_IN], fine[:, K.S_RH_SUP], cs, weight)
    viol = pen.reshape(len(exo), SUBSTEPS).max(axis=1) > 0
    return -float(power.mean() + pen.mean()), int(np.count_nonzero(viol))


def model_free_search(
    cfg: SiteConfig,
    exo: np.ndarray,
    budget: int = 640,
    seed: int = 0,
    population: int = 32,
    elite_fraction: float = 0.25,
    cs: ConstraintSet | None = None,
    weight: float = PENALTY_WEIGHT,
) -> tuple[Policy, SearchLog]:
    """Cross-entropy search over the 9 coefficients of an affine policy.

    Generation 0 is centred on the fixed setpoints and its first member is
    exactly that point, so the result is never worse than the baseline on the
    search week.  Returns the better of the final elite mean and the best
    candidate seen.
    """
    if budget < 100:
        raise ValueError("budget must be >= 100 rollouts")
    exo = np.asarray(exo, dtype=float)
    cs = cs or ConstraintSet.from_site(cfg)
    prm = pack_params(cfg)
    rng = np.random.default_rng([seed, 2])
    n_elite = max(1, int(round(elite_fraction * population)))

    half = 0.5 * (ACTION_HIGH - ACTION_LOW)
    mean = np.zeros((3, 3))
    mean[0] = FIXED_ACTION
    std = np.vstack([0.5 * half, 0.25 * half, 0.25 * half])

    log = SearchLog()
    best_map, best_fit = mean.copy(), -math.inf
    while log.rollouts + population <= budget:
        cand = mean + std * rng.standard_normal((population, 3, 3))
        if log.generations == 0:
            cand[0] = mean
        fits = np.empty(population)
        for i in range(population):
            fits[i], n_viol = _fitness(cand[i], exo, prm, cfg, cs, weight)
            log.violations.append((log.generations, i, n_viol))
        log.rollouts += population
        order = np.argsort(-fits, kind="stable")
        if fits[order[0]] > best_fit:
            best_fit, best_map = float(fits[order[0]]), cand[order[0]].copy()
        elite = cand[order[:n_elite]]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0) + 1e-3 * np.vstack([half, half, half])
        log.generations += 1
        log.best_fitness.append(best_fit)
    log.budget_exhausted = True

    mean_fit, _ = _fitness(mean, exo, prm, cfg, cs, weight)
    log.rollouts += 1
    chosen = mean if mean_fit >= best_fit else best_map
    return Policy("parametric", chosen, METHOD_LABELS["cem"]), log


# ---------------------------------------------------------------------------
# Surrogate-based descent


@dataclass
class OptimizeInfo:
    steps: int
    restarts: int
    converged_fraction: float
    predicted_objective: np.ndarray = field(repr=False, default=None)

    @property
    def flag(self) -> bool:
        """True when some periods were still moving at the step limit."""
        return self.converged_fraction < 1.0


def _w_from_rh(t: Var, rh: Var, p: float) -> Var:
    pv = rh / 100.0 * (K.MAGNUS_C0 * exp(K.MAGNUS_C1 * t / (t + K.MAGNUS_C2)))
    return K.MW_RATIO * pv / (p - pv)


def _rh_from_w(t: Var, w: Var, p: float) -> Var:
    pv = w * p / (K.MW_RATIO + w)
    return 100.0 * pv / (K.MAGNUS_C0 * exp(K.MAGNUS_C1 * t / (t + K.MAGNUS_C2)))


def _air_side(g: Graph, x: Var, pred: Var, theta: PhysicsParams, cfg: SiteConfig):
    """Inlet temperature and supply RH implied by predicted return air."""
    util, t_set, fan, t_chws = x.column(0), x.column(2), x.column(3), x.column(4)
    t_ret, rh_ret = pred.column(0), pred.column(1)
    p = cfg.ambient_pressure
    idle = theta.it_idle_fraction
    load_frac = idle + (1.0 - idle) * util
    m_a = cfg.n_crah * cfg.crah_rated_airflow * fan
    m_it = cfg.design_it_airflow * load_frac
    deficit = maximum(1.0 - m_a / m_it, 0.0)
    inlet = t_set + theta.recirculation_gain * deficit * (t_ret - t_set)
    w_ret = _w_from_rh(t_ret, maximum(rh_ret, 1e-3), p)
    pc = K.MAGNUS_C0 * exp(K.MAGNUS_C1 * t_chws / (t_chws + K.MAGNUS_C2))
    w_sup = minimum(w_ret, K.MW_RATIO * pc / (p - pc))
    rh_sup = _rh_from_w(t_set, w_sup, p)
    return inlet, rh_sup


def _descend(
    objective,
    exo: np.ndarray,
    starts: np.ndarray,
    free: np.ndarray,
    steps: int,
    learning_rate: float,
):
    """Projected Adam over unit-box action coordinates, all rows at once.

    ``starts`` is (R, K, 3) physical actions; ``free`` masks the optimised
    coordinates.  Returns the best iterate per row and its objective.
    """
    n_restart, n_period, _ = starts.shape
    span = ACTION_HIGH - ACTION_LOW
    exo_rep = np.tile(exo, (n_restart, 1))
    z = ((starts.reshape(-1, 3) - ACTION_LOW) / span).clip(0.0, 1.0)
    state = AdamState.zeros(z.shape, learning_rate=learning_rate)
    best_z = z.copy()
    best_f = np.full(z.shape[0], np.inf)
    moving = np.ones(z.shape[0], dtype=bool)
    for it in range(steps + 1):
        g = Graph()
        zv = g.input(z)
        act = zv * span + ACTION_LOW
        x = g.const(np.hstack([exo_rep, np.zeros_like(z)])) + _pad_actions(g, act)
        f = objective(g, x)
        vals = f.value.ravel()
        better = vals < best_f
        moving = better & (best_f - vals > 1e-9 * np.maximum(1.0, np.abs(vals)))
        best_f = np.where(better, vals, best_f)
        best_z[better] = z[better]
        if it == steps:
            break
        (grad,) = g.backward(f.sum())
        grad = grad * free
        z, state = adam_step(z, grad, state)
        z = z.clip(0.0, 1.0)
    actions = best_z * span + ACTION_LOW
    return actions.reshape(n_restart, n_period, 3), best_f.reshape(n_restart, n_period), float(np.mean(~moving))


def _pad_actions(g: Graph, act: Var) -> Var:
    # Places the 3 action columns after the 2 exogenous ones.
    place = np.zeros((3, 5))
    place[0, 2] = place[1, 3] = place[2, 4] = 1.0
    return act @ place


def uni_pi_optimize(
    model: SurrogateParams,
    theta: PhysicsParams,
    cfg: SiteConfig,
    exo: np.ndarray,
    cs: ConstraintSet | None = None,
    steps: int = 500,
    learning_rate: float = 0.02,
    inlet_margin: float = 0.5,
    rh_margin: float = 2.0,
    weight: float = PENALTY_WEIGHT,
) -> tuple[Policy, OptimizeInfo]:
    """Fan power plus SLA penalty over supply setpoint and fan ratio.

    Chilled water stays at the baseline setpoint, so the chiller plant never
    enters the objective.  Descent starts from the fixed action, which makes
    the predicted objective no worse than the baseline's in every period.
    """
    exo = np.asarray(exo, dtype=float)
    cs = (cs or ConstraintSet.from_site(cfg)).tightened(inlet_margin, rh_margin)

    def objective(g, x):
        pred = graph_predict(g, model, x)
        inlet, rh_sup = _air_side(g, x, pred, theta, cfg)
        fan = x.column(3)
        fan_power = cfg.n_crah * theta.fan_cubic_coeff * fan**3
        return fan_power + _penalty_graph(inlet, rh_sup, cs, weight)

    starts = np.tile(np.asarray(FIXED_ACTION), (1, len(exo), 1))
    acts, obj, conv = _descend(objective, exo, starts, np.array([1.0, 1.0, 0.0]), steps, learning_rate)
    info = OptimizeInfo(steps, 1, conv, obj[0])
    return Policy("lookup", acts[0], METHOD_LABELS["unipi"]), info


def multi_pi_optimize(
    model: SurrogateParams,
    theta: PhysicsParams,
    cfg: SiteConfig,
    exo: np.ndarray,
    cs: ConstraintSet | None = None,
    restarts: int = 8,
    seed: int = 0,
    steps: int = 500,
    learning_rate: float = 0.02,
    inlet_margin: float = 0.5,
    rh_margin: float = 2.0,
    flow_limit: float | None = None,
    weight: float = PENALTY_WEIGHT,
) -> tuple[Policy, OptimizeInfo]:
    """Predicted total cooling power plus penalties over all three setpoints.

    Besides the SLA, predicted chilled-water flow above ``flow_limit``
    (default: the pumps' rated total) is penalised so solutions stay where
    the coil can hold its setpoint.  Restart 0 starts at the fixed action,
    the rest at seeded uniform points of the box; the best restart per
    period is kept.
    """
    exo = np.asarray(exo, dtype=float)
    cs = (cs or ConstraintSet.from_site(cfg)).tightened(inlet_margin, rh_margin)
    if flow_limit is None:
        flow_limit = cfg.pump_rated_flow * cfg.n_chw_pumps
    flow_scale = float(model.output_scale[2])

    def objective(g, x):
        pred = graph_predict(g, model, x)
        inlet, rh_sup = _air_side(g, x, pred, theta, cfg)
        excess = maximum((pred.column(2) - flow_limit) / flow_scale, 0.0)
        return pred.column(3) + _penalty_graph(inlet, rh_sup, cs, weight) + weight * excess * excess

    rng = np.random.default_rng([seed, 3])
    starts = ACTION_LOW + (ACTION_HIGH - ACTION_LOW) * rng.random((restarts, len(exo), 3))
    starts[0] = FIXED_ACTION
    acts, obj, conv = _descend(objective, exo, starts, np.ones(3), steps, learning_rate)
    pick = np.argmin(obj, axis=0)
    cols = np.arange(len(exo))
    info = OptimizeInfo(steps, restarts, conv, obj[pick, cols])
    return Policy("lookup", acts[pick, cols], METHOD_LABELS["multipi"]), info


def zero_load_action(model, theta, cfg, wet_bulb: float = 26.0, **kw) -> np.ndarray:
    """Multi-PI's choice for a single idle-hall period (utilisation 0)."""
    policy, _ = multi_pi_optimize(model, theta, cfg, np.array([[0.0, wet_bulb]]), **kw)
    return policy.payload[0]
