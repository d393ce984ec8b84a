"""Scalar inner loops of the plant simulator.

Everything here works on floats and flat float64 arrays so that the same
source runs under numba or as plain Python.  Callers in ``psychro`` and
``plant`` handle validation and the dataclass surface.
"""

from __future__ import annotations

import math

import numpy as np

from ._jit import kernel

# Magnus saturation-pressure constants (kPa, -, degC).
MAGNUS_C0 = 0.61094
MAGNUS_C1 = 17.625
MAGNUS_C2 = 243.04

MW_RATIO = 0.622  # molar mass water / dry air
CP_DRY = 1.006  # kJ/(kg K)
CP_VAPOR = 1.86  # kJ/(kg K)
H_FG0 = 2501.0  # kJ/kg at 0 degC
CP_WATER = 4.186  # kJ/(kg K)

COIL_TOL_KW = 1e-6
COIL_MAX_ITER = 200
CW_FIXED_POINT_ITERS = 12
PUMP_MAX_RATIO = 1.2

# Packed parameter vector layout.
P_N_CH = 0
P_CH_CAP = 1
P_N_CRAH = 2
P_CRAH_FLOW = 3
P_N_PUMPS = 4
P_PUMP_FLOW = 5
P_N_TWR = 6
P_TWR_FAN = 7
P_DESIGN_LOAD = 8
P_PRESSURE = 9
P_FAN_K = 10
P_PUMP_K = 11
P_UA = 12
P_A0 = 13
P_A1 = 14
P_A2 = 15
P_APPROACH = 16
P_TEXP = 17
P_CZ = 18
P_REC = 19
P_GAIN = 20
P_IDLE = 21
N_PARAMS = 22

# Packed state vector layout.
S_T_RET = 0
S_W_RET = 1
S_T_SUP = 2
S_W_SUP = 3
S_T_IN = 4
S_M_W = 5
S_T_CHWS = 6
S_T_CW = 7
S_P_FAN = 8
S_P_PUMP = 9
S_P_CH = 10
S_P_TWR = 11
S_P_IT = 12
S_CLOCK = 13
S_INFEAS = 14
S_Q_COIL = 15
S_RH_RET = 16
S_RH_SUP = 17
N_STATE = 18


@kernel
def p_sat(t):
    return MAGNUS_C0 * math.exp(MAGNUS_C1 * t / (t + MAGNUS_C2))


@kernel
def w_from_pv(pv, p):
    return MW_RATIO * pv / (p - pv)


@kernel
def pv_from_w(w, p):
    return w * p / (MW_RATIO + w)


@kernel
def w_sat(t, p):
    return w_from_pv(p_sat(t), p)


@kernel
def rh_of(t, w, p):
    rh = 100.0 * pv_from_w(w, p) / p_sat(t)
    if rh > 100.0:
        return 100.0
    if rh < 0.0:
        return 0.0
    return rh


@kernel
def enthalpy(t, w):
    return CP_DRY * t + w * (H_FG0 + CP_VAPOR * t)


@kernel
def cp_moist(w):
    return CP_DRY + CP_VAPOR * w


@kernel
def eps_counterflow(ntu, cr):
    if abs(1.0 - cr) < 1e-9:
        return ntu / (1.0 + ntu)
    e = math.exp(-ntu * (1.0 - cr))
    return (1.0 - e) / (1.0 - cr * e)


@kernel
def coil_duty(m_w, c_air, ua, dt_in):
    """Heat (kW) a counterflow coil moves at water flow ``m_w``."""
    if m_w <= 0.0 or dt_in <= 0.0:
        return 0.0
    c_w = m_w * CP_WATER
    c_min = min(c_w, c_air)
    c_max = max(c_w, c_air)
    return eps_counterflow(ua / c_min, c_min / c_max) * c_min * dt_in


@kernel
def coil_solve(t_ret, w_ret, t_set, m_a, t_chws, ua, p, m_w_max):
    """Water flow meeting the supply setpoint.

    Returns (flow, t_sup, w_sup, duty, infeasible).  Moisture condenses down to
    saturation at the coil surface, taken as the chilled-water supply
    temperature, whenever the return air is wetter than that.
    """
    if t_ret <= t_set or m_a <= 0.0:
        return 0.0, t_ret, w_ret, 0.0, 0.0
    w_sup = min(w_ret, w_sat(t_chws, p))
    h_ret = enthalpy(t_ret, w_ret)
    q_req = m_a * (h_ret - enthalpy(t_set, w_sup))
    c_air = m_a * cp_moist(w_ret)
    dt_in = t_ret - t_chws
    q_max = coil_duty(m_w_max, c_air, ua, dt_in)
    if q_max < q_req:
        t_sup = (h_ret - q_max / m_a - H_FG0 * w_sup) / (CP_DRY + CP_VAPOR * w_sup)
        return m_w_max, t_sup, w_sup, q_max, 1.0
    lo = 0.0
    hi = m_w_max
    mid = 0.5 * (lo + hi)
    for _ in range(COIL_MAX_ITER):
        mid = 0.5 * (lo + hi)
        q = coil_duty(mid, c_air, ua, dt_in)
        if abs(q - q_req) <= COIL_TOL_KW:
            break
        if q < q_req:
            lo = mid
        else:
            hi = mid
    return mid, t_set, w_sup, q_req, 0.0


@kernel
def clamp_cop(cop):
    if cop < 2.0:
        return 2.0
    if cop > 12.0:
        return 12.0
    return cop


@kernel
def chillers_staged(q_evap, cap, n_ch):
    if q_evap <= 0.0:
        return 0.0
    n = math.ceil(q_evap / cap)
    if n > n_ch:
        n = n_ch
    return float(n)


@kernel
def condenser_loop(q_evap, t_chws, wet_bulb, prm):
    """Solve chiller COP and tower outlet jointly.

    Returns (p_chillers, t_cw, n_staged).
    """
    n_s = chillers_staged(q_evap, prm[P_CH_CAP], prm[P_N_CH])
    if n_s == 0.0:
        return 0.0, wet_bulb, 0.0
    t_cw = wet_bulb + prm[P_APPROACH]
    cop = 1.0
    for _ in range(CW_FIXED_POINT_ITERS):
        cop = clamp_cop(prm[P_A0] + prm[P_A1] * t_chws - prm[P_A2] * t_cw)
        ratio = q_evap * (1.0 + 1.0 / cop) / (n_s * prm[P_CH_CAP])
        t_cw = wet_bulb + prm[P_APPROACH] * ratio ** prm[P_TEXP]
    cop = clamp_cop(prm[P_A0] + prm[P_A1] * t_chws - prm[P_A2] * t_cw)
    return q_evap / cop, t_cw, n_s


@kernel
def pump_power_total(m_w, n_s, prm):
    """Chilled-water pumps tracking flow plus fixed-speed condenser pumps."""
    p = n_s * prm[P_PUMP_K]
    if m_w > 0.0:
        n_run = max(n_s, math.ceil(m_w / (PUMP_MAX_RATIO * prm[P_PUMP_FLOW])))
        ratio = m_w / (n_run * prm[P_PUMP_FLOW])
        p += n_run * prm[P_PUMP_K] * ratio**3
    return p


@kernel
def it_heat_kw(util, prm):
    idle = prm[P_IDLE]
    return prm[P_DESIGN_LOAD] * (idle + (1.0 - idle) * util)


@kernel
def fill_algebraic(out, t_ret, w_ret, t_set, fan, t_chws, util, wet_bulb, prm):
    """Coil, inlet and plant quantities for a given return-air state.

    Writes supply air, flow, powers, flags and RH into ``out``; leaves the
    return-air and clock entries to the caller.  Returns (q_it, q_fan, m_a).
    """
    n_crah = prm[P_N_CRAH]
    p_amb = prm[P_PRESSURE]
    q_it = it_heat_kw(util, prm)
    m_a = n_crah * prm[P_CRAH_FLOW] * fan
    q_fan = n_crah * prm[P_FAN_K] * fan**3
    m_w_max = PUMP_MAX_RATIO * prm[P_PUMP_FLOW] * prm[P_N_PUMPS]
    m_w, t_sup, w_sup, q_coil, infeas = coil_solve(
        t_ret, w_ret, t_set, m_a, t_chws, prm[P_UA], p_amb, m_w_max
    )
    p_ch, t_cw, n_s = condenser_loop(q_coil, t_chws, wet_bulb, prm)
    out[S_T_SUP] = t_sup
    out[S_W_SUP] = w_sup
    out[S_M_W] = m_w
    out[S_T_CHWS] = t_chws
    out[S_T_CW] = t_cw
    out[S_P_FAN] = q_fan
    out[S_P_PUMP] = pump_power_total(m_w, n_s, prm)
    out[S_P_CH] = p_ch
    out[S_P_TWR] = n_s * prm[P_N_TWR] * prm[P_TWR_FAN]
    out[S_P_IT] = q_it
    out[S_INFEAS] = infeas
    out[S_Q_COIL] = q_coil
    out[S_RH_SUP] = rh_of(t_sup, w_sup, p_amb)
    return q_it, q_fan, m_a


@kernel
def inlet_temp(t_sup, t_ret, m_a, q_it, prm):
    m_it = prm[P_N_CRAH] * prm[P_CRAH_FLOW] / 1.25 * q_it / prm[P_DESIGN_LOAD]
    if m_it <= 0.0:
        return t_sup
    deficit = 1.0 - m_a / m_it
    if deficit < 0.0:
        deficit = 0.0
    return t_sup + prm[P_REC] * deficit * (t_ret - t_sup)


@kernel
def substep(state, t_set, fan, t_chws, util, wet_bulb, prm, dt, out):
    """One explicit-Euler step of the hall from ``state`` into ``out``."""
    t_ret = state[S_T_RET]
    w_ret = state[S_W_RET]
    q_it, q_fan, m_a = fill_algebraic(
        out, t_ret, w_ret, t_set, fan, t_chws, util, wet_bulb, prm
    )
    t_sup = out[S_T_SUP]
    w_sup = out[S_W_SUP]
    cz = prm[P_CZ]
    t_new = t_ret + dt / cz * (q_it + q_fan - m_a * cp_moist(w_ret) * (t_ret - t_sup))
    # Moisture capacitance shares the thermal time constant of the zone.
    w_new = w_ret + dt * CP_DRY / cz * (prm[P_GAIN] - m_a * (w_ret - w_sup))
    if w_new < 0.0:
        w_new = 0.0
    w_cap = w_sat(t_new, prm[P_PRESSURE])
    if w_new > w_cap:
        w_new = w_cap
    out[S_T_RET] = t_new
    out[S_W_RET] = w_new
    out[S_RH_RET] = rh_of(t_new, w_new, prm[P_PRESSURE])
    out[S_T_IN] = inlet_temp(t_sup, t_new, m_a, q_it, prm)
    out[S_CLOCK] = state[S_CLOCK] + dt


@kernel
def rollout_kernel(state0, actions, exo, prm, dt, substeps):
    """Hold each (action, exo) row for ``substeps`` Euler steps.

    Returns every substep state, shape (K * substeps, N_STATE).
    """
    k_periods = actions.shape[0]
    out = np.empty((k_periods * substeps, N_STATE))
    prev = state0.copy()
    row = 0
    for k in range(k_periods):
        for _ in range(substeps):
            substep(
                prev,
                actions[k, 0],
                actions[k, 1],
                actions[k, 2],
                exo[k, 0],
                exo[k, 1],
                prm,
                dt,
                out[row],
            )
            prev = out[row]
            row += 1
    return out


@kernel
def steady_state_kernel(t_set, fan, t_chws, util, wet_bulb, prm):
    """Equilibrium of the hall under constant inputs.

    Closed form when the coil can hold the setpoint; otherwise the Euler
    recursion is relaxed to convergence.
    """
    out = np.zeros(N_STATE)
    p_amb = prm[P_PRESSURE]
    m_a = prm[P_N_CRAH] * prm[P_CRAH_FLOW] * fan
    q_it = it_heat_kw(util, prm)
    q_fan = prm[P_N_CRAH] * prm[P_FAN_K] * fan**3
    w_ret = w_sat(t_chws, p_amb) + prm[P_GAIN] / m_a
    t_ret = t_set + (q_it + q_fan) / (m_a * cp_moist(w_ret))
    w_ret = min(w_ret, w_sat(t_ret, p_amb))
    fill_algebraic(out, t_ret, w_ret, t_set, fan, t_chws, util, wet_bulb, prm)
    if out[S_INFEAS] > 0.0:
        state = out.copy()
        state[S_T_RET] = t_ret
        state[S_W_RET] = w_ret
        nxt = np.zeros(N_STATE)
        for _ in range(200000):
            substep(state, t_set, fan, t_chws, util, wet_bulb, prm, 60.0, nxt)
            change = abs(nxt[S_T_RET] - state[S_T_RET]) + abs(nxt[S_W_RET] - state[S_W_RET])
            state[:] = nxt
            if change < 1e-12:
                break
        t_ret = state[S_T_RET]
        w_ret = state[S_W_RET]
        fill_algebraic(out, t_ret, w_ret, t_set, fan, t_chws, util, wet_bulb, prm)
    out[S_T_RET] = t_ret
    out[S_W_RET] = w_ret
    out[S_RH_RET] = rh_of(t_ret, w_ret, p_amb)
    out[S_T_IN] = inlet_temp(out[S_T_SUP], t_ret, m_a, q_it, prm)
    out[S_CLOCK] = 0.0
    return out
