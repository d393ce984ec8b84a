"""Ground-truth simulator of one data hall and its share of the chiller plant.

The hall is a single lumped zone.  Each explicit-Euler substep solves the
CRAH coil for the water flow that holds the supply setpoint, then chains the
chilled-water pumps, chillers and cooling towers.  Control actions and
exogenous inputs are held constant over a control period of ``substeps``
Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .config import (
    CHWS_SETPOINT_BOX,
    FAN_RATIO_BOX,
    SUPPLY_SETPOINT_BOX,
    PhysicsParams,
    SiteConfig,
)
from .errors import CapacityError, DomainError, InfeasibleDutyError
from .psychro import MoistAirState

SUBSTEP_S = 60.0
CONTROL_PERIOD_S = 900.0
DAY_S = 86400.0

ACTION_LOW = np.array([SUPPLY_SETPOINT_BOX[0], FAN_RATIO_BOX[0], CHWS_SETPOINT_BOX[0]])
ACTION_HIGH = np.array([SUPPLY_SETPOINT_BOX[1], FAN_RATIO_BOX[1], CHWS_SETPOINT_BOX[1]])


@dataclass(frozen=True)
class ControlAction:
    crah_supply_setpoint: float
    crah_fan_ratio: float
    chws_setpoint: float

    def as_array(self) -> np.ndarray:
        return np.array([self.crah_supply_setpoint, self.crah_fan_ratio, self.chws_setpoint])

    def in_box(self) -> bool:
        a = self.as_array()
        return bool(np.all(a >= ACTION_LOW) and np.all(a <= ACTION_HIGH))

    def clamped(self) -> "ControlAction":
        return ControlAction(*np.clip(self.as_array(), ACTION_LOW, ACTION_HIGH).tolist())


@dataclass(frozen=True)
class Exogenous:
    it_utilization: float
    ambient_wet_bulb: float

    def as_array(self) -> np.ndarray:
        return np.array([self.it_utilization, self.ambient_wet_bulb])


@dataclass(frozen=True)
class PlantState:
    return_air: MoistAirState
    supply_air: MoistAirState
    it_inlet_temp: float
    chw_flow: float
    chws_temp: float
    cw_temp: float
    power_fans: float
    power_pumps: float
    power_chillers: float
    power_towers: float
    power_it: float
    clock: float
    coil_infeasible: bool = False
    coil_duty: float = 0.0

    @property
    def cooling_power(self) -> float:
        return self.power_fans + self.power_pumps + self.power_chillers + self.power_towers

    def as_array(self) -> np.ndarray:
        v = np.zeros(K.N_STATE)
        v[K.S_T_RET] = self.return_air.temp
        v[K.S_W_RET] = self.return_air.humidity_ratio
        v[K.S_T_SUP] = self.supply_air.temp
        v[K.S_W_SUP] = self.supply_air.humidity_ratio
        v[K.S_T_IN] = self.it_inlet_temp
        v[K.S_M_W] = self.chw_flow
        v[K.S_T_CHWS] = self.chws_temp
        v[K.S_T_CW] = self.cw_temp
        v[K.S_P_FAN] = self.power_fans
        v[K.S_P_PUMP] = self.power_pumps
        v[K.S_P_CH] = self.power_chillers
        v[K.S_P_TWR] = self.power_towers
        v[K.S_P_IT] = self.power_it
        v[K.S_CLOCK] = self.clock
        v[K.S_INFEAS] = float(self.coil_infeasible)
        v[K.S_Q_COIL] = self.coil_duty
        v[K.S_RH_RET] = self.return_air.rh
        v[K.S_RH_SUP] = self.supply_air.rh
        return v

    @classmethod
    def from_array(cls, v: np.ndarray, pressure: float) -> "PlantState":
        return cls(
            return_air=MoistAirState(float(v[K.S_T_RET]), float(v[K.S_W_RET]), pressure),
            supply_air=MoistAirState(float(v[K.S_T_SUP]), float(v[K.S_W_SUP]), pressure),
            it_inlet_temp=float(v[K.S_T_IN]),
            chw_flow=float(v[K.S_M_W]),
            chws_temp=float(v[K.S_T_CHWS]),
            cw_temp=float(v[K.S_T_CW]),
            power_fans=float(v[K.S_P_FAN]),
            power_pumps=float(v[K.S_P_PUMP]),
            power_chillers=float(v[K.S_P_CH]),
            power_towers=float(v[K.S_P_TWR]),
            power_it=float(v[K.S_P_IT]),
            clock=float(v[K.S_CLOCK]),
            coil_infeasible=bool(v[K.S_INFEAS] > 0),
            coil_duty=float(v[K.S_Q_COIL]),
        )


def pack_params(cfg: SiteConfig, physics: PhysicsParams | None = None) -> np.ndarray:
    p = physics if physics is not None else cfg.physics
    prm = np.empty(K.N_PARAMS)
    prm[K.P_N_CH] = cfg.n_chillers
    prm[K.P_CH_CAP] = cfg.chiller_capacity
    prm[K.P_N_CRAH] = cfg.n_crah
    prm[K.P_CRAH_FLOW] = cfg.crah_rated_airflow
    prm[K.P_N_PUMPS] = cfg.n_chw_pumps
    prm[K.P_PUMP_FLOW] = cfg.pump_rated_flow
    prm[K.P_N_TWR] = cfg.n_towers_per_loop
    prm[K.P_TWR_FAN] = cfg.tower_rated_fan_power
    prm[K.P_DESIGN_LOAD] = cfg.hall_it_design_load
    prm[K.P_PRESSURE] = cfg.ambient_pressure
    prm[K.P_FAN_K] = p.fan_cubic_coeff
    prm[K.P_PUMP_K] = p.pump_cubic_coeff
    prm[K.P_UA] = p.coil_ua
    prm[K.P_A0] = p.cop_a0
    prm[K.P_A1] = p.cop_a1
    prm[K.P_A2] = p.cop_a2
    prm[K.P_APPROACH] = p.tower_approach_ref
    prm[K.P_TEXP] = p.tower_exponent
    prm[K.P_CZ] = p.zone_heat_capacity
    prm[K.P_REC] = p.recirculation_gain
    prm[K.P_GAIN] = p.moisture_gain
    prm[K.P_IDLE] = p.it_idle_fraction
    return prm


def max_coil_flow(cfg: SiteConfig) -> float:
    return K.PUMP_MAX_RATIO * cfg.pump_rated_flow * cfg.n_chw_pumps


# ---------------------------------------------------------------------------
# Component models


def it_heat(util: float, cfg: SiteConfig) -> float:
    """IT electrical power in kW, all of which ends up as heat in the hall."""
    if not 0.0 <= util <= 1.0:
        raise DomainError(f"utilization {util} outside [0, 1]")
    idle = cfg.physics.it_idle_fraction
    return cfg.hall_it_design_load * (idle + (1.0 - idle) * util)


def fan_power(ratio: float, rated: float) -> float:
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"fan speed ratio {ratio} outside [0, 1]")
    return rated * ratio**3


def pump_power(flow_ratio: float, rated: float) -> float:
    if not 0.0 <= flow_ratio <= K.PUMP_MAX_RATIO:
        raise DomainError(f"pump flow ratio {flow_ratio} outside [0, {K.PUMP_MAX_RATIO}]")
    return rated * flow_ratio**3


def crah_coil_water_flow(
    return_air: MoistAirState,
    supply_setpoint: float,
    airflow: float,
    chws_temp: float,
    params: PhysicsParams,
    max_flow: float = 900.0,
) -> tuple[float, MoistAirState]:
    """Smallest chilled-water flow (kg/s) for which the coil meets the setpoint.

    Bisection on the counterflow effectiveness-NTU duty.  Raises
    InfeasibleDutyError when even ``max_flow`` falls short.
    """
    if not airflow > 0:
        raise DomainError("airflow must be positive")
    if not chws_temp < supply_setpoint:
        raise DomainError(
            f"supply setpoint {supply_setpoint} degC must exceed chilled water {chws_temp} degC"
        )
    flow, t_sup, w_sup, duty, infeasible = K.coil_solve(
        float(return_air.temp),
        float(return_air.humidity_ratio),
        float(supply_setpoint),
        float(airflow),
        float(chws_temp),
        float(params.coil_ua),
        float(return_air.pressure),
        float(max_flow),
    )
    if infeasible:
        h_ret = return_air.enthalpy
        required = airflow * (h_ret - K.enthalpy(supply_setpoint, w_sup))
        raise InfeasibleDutyError(required, duty)
    return flow, MoistAirState(t_sup, w_sup, return_air.pressure)


def chiller_power(evap_load: float, chws_temp: float, cw_temp: float, cfg: SiteConfig) -> float:
    if evap_load < 0:
        raise DomainError("evaporator load must be non-negative")
    if evap_load > cfg.total_chiller_capacity:
        raise CapacityError(
            f"evaporator load {evap_load} kW exceeds installed capacity "
            f"{cfg.total_chiller_capacity} kW"
        )
    if evap_load == 0:
        return 0.0
    return evap_load / K.clamp_cop(cfg.physics.cop(chws_temp, cw_temp))


def tower_outlet_temp(
    wet_bulb: float, reject_ratio: float, fan_ratio: float, params: PhysicsParams
) -> float:
    if not fan_ratio > 0 or fan_ratio > 1:
        raise DomainError(f"tower fan ratio {fan_ratio} outside (0, 1]")
    if not 0 <= reject_ratio <= 1.5:
        raise DomainError(f"reject ratio {reject_ratio} outside [0, 1.5]")
    return wet_bulb + params.tower_approach_ref * (reject_ratio / fan_ratio) ** params.tower_exponent


# ---------------------------------------------------------------------------
# Dynamics


def _check_action(action: ControlAction) -> None:
    if not action.in_box():
        raise DomainError(f"action {action} outside the feasible box")


def steady_state(action: ControlAction, exo: Exogenous, cfg: SiteConfig) -> PlantState:
    """Equilibrium reached under constant action and exogenous inputs."""
    _check_action(action)
    v = steady_state_array(action.as_array(), exo.as_array(), pack_params(cfg))
    return PlantState.from_array(v, cfg.ambient_pressure)


def steady_state_array(action: np.ndarray, exo: np.ndarray, prm: np.ndarray) -> np.ndarray:
    return K.steady_state_kernel(
        float(action[0]), float(action[1]), float(action[2]), float(exo[0]), float(exo[1]), prm
    )


def step(
    state: PlantState,
    action: ControlAction,
    exo: Exogenous,
    cfg: SiteConfig,
    dt: float = SUBSTEP_S,
) -> PlantState:
    if not 1.0 <= dt <= 300.0:
        raise DomainError(f"dt {dt} s outside [1, 300]")
    _check_action(action)
    out = np.zeros(K.N_STATE)
    K.substep(
        state.as_array(),
        action.crah_supply_setpoint,
        action.crah_fan_ratio,
        action.chws_setpoint,
        exo.it_utilization,
        exo.ambient_wet_bulb,
        pack_params(cfg),
        float(dt),
        out,
    )
    return PlantState.from_array(out, cfg.ambient_pressure)


@dataclass
class Trace:
    """Period-end plant states with the inputs that produced them.

    ``states`` has one row per control period (see ``_kernels.S_*`` for the
    column layout); ``fine`` optionally keeps every Euler substep.
    """

    timestep: float
    dt: float
    actions: np.ndarray
    exo: np.ndarray
    states: np.ndarray
    initial: np.ndarray | None = None
    fine: np.ndarray | None = None
    pressure: float = 101.325

    def __len__(self) -> int:
        return self.actions.shape[0]

    @property
    def substeps(self) -> int:
        return int(round(self.timestep / self.dt))

    @property
    def times(self) -> np.ndarray:
        return self.timestep * np.arange(1, len(self) + 1)

    @property
    def cooling_power(self) -> np.ndarray:
        s = self.states
        return s[:, K.S_P_FAN] + s[:, K.S_P_PUMP] + s[:, K.S_P_CH] + s[:, K.S_P_TWR]

    @property
    def records(self) -> list[tuple[Exogenous, ControlAction, PlantState]]:
        return [
            (
                Exogenous(*self.exo[k].tolist()),
                ControlAction(*self.actions[k].tolist()),
                PlantState.from_array(self.states[k], self.pressure),
            )
            for k in range(len(self))
        ]

    def slice(self, start: int, stop: int) -> "Trace":
        return Trace(
            self.timestep,
            self.dt,
            self.actions[start:stop],
            self.exo[start:stop],
            self.states[start:stop],
            None,
            None,
            self.pressure,
        )


def simulate(
    actions: np.ndarray,
    exo: np.ndarray,
    cfg: SiteConfig,
    dt: float = SUBSTEP_S,
    substeps: int = int(CONTROL_PERIOD_S / SUBSTEP_S),
    initial: np.ndarray | None = None,
    keep_fine: bool = False,
    prm: np.ndarray | None = None,
) -> Trace:
    """Array-level rollout; starts from the steady state of the first period when
    ``initial`` is None."""
    actions = np.ascontiguousarray(actions, dtype=float)
    exo = np.ascontiguousarray(exo, dtype=float)
    if actions.ndim != 2 or actions.shape[1] != 3 or exo.shape != (actions.shape[0], 2):
        raise DomainError("actions must be (K, 3) and exo (K, 2) with equal K")
    if actions.shape[0] < 1:
        raise DomainError("rollout needs at least one period")
    if prm is None:
        prm = pack_params(cfg)
    if initial is None:
        initial = steady_state_array(actions[0], exo[0], prm)
    fine = K.rollout_kernel(np.asarray(initial, dtype=float), actions, exo, prm, float(dt), int(substeps))
    states = fine[substeps - 1 :: substeps]
    return Trace(
        timestep=dt * substeps,
        dt=dt,
        actions=actions,
        exo=exo,
        states=np.ascontiguousarray(states),
        initial=np.asarray(initial, dtype=float),
        fine=fine if keep_fine else None,
        pressure=cfg.ambient_pressure,
    )


def rollout(
    initial: PlantState,
    actions: Sequence[ControlAction],
    exo: Sequence[Exogenous],
    cfg: SiteConfig,
    dt: float = SUBSTEP_S,
    substeps: int = 1,
) -> Trace:
    """Apply ``step`` K times, holding each (action, exo) pair for ``substeps`` steps."""
    if len(actions) != len(exo) or len(actions) < 1:
        raise DomainError("actions and exo must have equal length K >= 1")
    if not 1.0 <= dt <= 300.0:
        raise DomainError(f"dt {dt} s outside [1, 300]")
    for a in actions:
        _check_action(a)
    a_arr = np.array([a.as_array() for a in actions])
    e_arr = np.array([e.as_array() for e in exo])
    return simulate(a_arr, e_arr, cfg, dt, substeps, initial=initial.as_array())


# ---------------------------------------------------------------------------
# SLA


@dataclass(frozen=True)
class SlaViolation:
    quantity: str
    value: float
    limit: float
    margin: float


def sla_check(state: PlantState, cfg: SiteConfig) -> list[SlaViolation]:
    """Violations of the thermal envelope with signed margins (value - limit)."""
    out = []
    if state.it_inlet_temp > cfg.sla_max_inlet_temp:
        out.append(
            SlaViolation(
                "inlet_temp",
                state.it_inlet_temp,
                cfg.sla_max_inlet_temp,
                state.it_inlet_temp - cfg.sla_max_inlet_temp,
            )
        )
    rh = state.supply_air.rh
    if rh < cfg.sla_rh_min:
        out.append(SlaViolation("supply_rh", rh, cfg.sla_rh_min, rh - cfg.sla_rh_min))
    elif rh > cfg.sla_rh_max:
        out.append(SlaViolation("supply_rh", rh, cfg.sla_rh_max, rh - cfg.sla_rh_max))
    return out


def sla_violation_mask(states: np.ndarray, cfg: SiteConfig) -> np.ndarray:
    """Vectorised ``bool(sla_check(...))`` over rows of packed states."""
    rh = states[:, K.S_RH_SUP]
    return (
        (states[:, K.S_T_IN] > cfg.sla_max_inlet_temp)
        | (rh < cfg.sla_rh_min)
        | (rh > cfg.sla_rh_max)
    )


# ---------------------------------------------------------------------------
# Workload

WET_BULB_PHASE = -math.pi / 3.0


def synth_workload_array(days: int, dt: float, seed: int) -> np.ndarray:
    """(K, 2) array of (utilization, wet bulb) at spacing ``dt`` seconds."""
    if days < 1:
        raise DomainError("days must be >= 1")
    n = int(round(days * DAY_S / dt))
    t = dt * np.arange(n)
    phase = 2.0 * np.pi * t / DAY_S
    rng = np.random.default_rng(seed)
    util = np.clip(0.55 + 0.25 * np.sin(phase) + rng.normal(0.0, 0.05, n), 0.0, 1.0)
    wet_bulb = 26.0 + 2.0 * np.sin(phase + WET_BULB_PHASE)
    return np.column_stack([util, wet_bulb])


def synth_workload(days: int, dt: float, seed: int) -> list[Exogenous]:
    return [Exogenous(u, w) for u, w in synth_workload_array(days, dt, seed).tolist()]
