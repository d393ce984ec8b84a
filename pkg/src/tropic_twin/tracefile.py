"""Trace CSV files: one row per control period, stamped at the period end."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from . import _kernels as K
from .errors import ParseError
from .plant import SUBSTEP_S, Trace

# (column, kind, index): kind "exo"/"action" index into those arrays, "state" into S_*.
COLUMNS = (
    ("util", "exo", 0),
    ("wet_bulb_c", "exo", 1),
    ("sup_set_c", "action", 0),
    ("fan_ratio", "action", 1),
    ("chws_set_c", "action", 2),
    ("ret_temp_c", "state", K.S_T_RET),
    ("ret_rh_pct", "state", K.S_RH_RET),
    ("ret_w_kgkg", "state", K.S_W_RET),
    ("sup_temp_c", "state", K.S_T_SUP),
    ("sup_rh_pct", "state", K.S_RH_SUP),
    ("inlet_temp_c", "state", K.S_T_IN),
    ("chw_flow_kgs", "state", K.S_M_W),
    ("cw_temp_c", "state", K.S_T_CW),
    ("p_fans_kw", "state", K.S_P_FAN),
    ("p_pumps_kw", "state", K.S_P_PUMP),
    ("p_chillers_kw", "state", K.S_P_CH),
    ("p_towers_kw", "state", K.S_P_TWR),
    ("p_it_kw", "state", K.S_P_IT),
    ("coil_duty_kw", "state", K.S_Q_COIL),
    ("coil_infeasible", "state", K.S_INFEAS),
)
HEADER = ("t_s",) + tuple(c[0] for c in COLUMNS)


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def dumps_trace(trace: Trace) -> str:
    buf = io.StringIO()
    buf.write(",".join(HEADER) + "\n")
    for k in range(len(trace)):
        row = [_fmt(trace.timestep * (k + 1))]
        for _, kind, idx in COLUMNS:
            if kind == "exo":
                v = trace.exo[k, idx]
            elif kind == "action":
                v = trace.actions[k, idx]
            else:
                v = trace.states[k, idx]
            row.append(str(int(v)) if kind == "state" and idx == K.S_INFEAS else _fmt(v))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def loads_trace(text: str, pressure: float = 101.325) -> Trace:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty trace file", 1) from None
    if tuple(h.strip() for h in header) != HEADER:
        raise ParseError(f"unexpected header; expected {','.join(HEADER)}", 1)
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(HEADER):
            raise ParseError(f"expected {len(HEADER)} fields, got {len(row)}", lineno)
        try:
            rows.append([float(v) for v in row])
        except ValueError as exc:
            raise ParseError(str(exc), lineno) from None
    if not rows:
        raise ParseError("trace has no data rows", 2)
    data = np.array(rows)
    if not np.all(np.isfinite(data)):
        raise ParseError("trace contains non-finite values", 2)
    n = len(data)
    timestep = float(data[0, 0])
    if not timestep > 0:
        raise ParseError("first timestamp must be positive (rows are stamped at period end)", 2)
    expected = timestep * np.arange(1, n + 1)
    bad = np.flatnonzero(np.abs(data[:, 0] - expected) > 1e-6 * timestep)
    if bad.size:
        raise ParseError(f"timestamps must be evenly spaced by {timestep:g} s", int(bad[0]) + 2)
    exo = np.zeros((n, 2))
    actions = np.zeros((n, 3))
    states = np.zeros((n, K.N_STATE))
    for j, (_, kind, idx) in enumerate(COLUMNS, start=1):
        {"exo": exo, "action": actions, "state": states}[kind][:, idx] = data[:, j]
    states[:, K.S_T_CHWS] = actions[:, 2]
    states[:, K.S_CLOCK] = data[:, 0]
    return Trace(timestep, SUBSTEP_S, actions, exo, states, None, None, pressure)


def write_trace(trace: Trace, path: str | Path) -> None:
    Path(path).write_text(dumps_trace(trace))


def read_trace(path: str | Path, pressure: float = 101.325) -> Trace:
    return loads_trace(Path(path).read_text(), pressure)
