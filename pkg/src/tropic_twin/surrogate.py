"""MLP surrogates of the hall's four observed quantities.

Inputs are ``(util, wet_bulb, sup_set, fan_ratio, chws_set)`` and outputs are
``(ret_temp, ret_rh, chw_flow, total_cooling_power)``.  Two trainers share one
network definition: a plain data-fit, and a physics-informed fit whose loss
adds squared residuals of the steady-state plant equations, evaluated on the
network's own predictions at the labelled rows and at random collocation
points drawn from the whole operating box.

The residuals are written once against the autodiff tape so the same code
serves training (gradients w.r.t. weights), the optimiser (gradients w.r.t.
actions) and plain evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .autodiff import AdamState, Graph, Var, adam_step, exp, hstack, maximum, minimum, tanh
from .config import (
    CHWS_SETPOINT_BOX,
    FAN_RATIO_BOX,
    SUPPLY_SETPOINT_BOX,
    WET_BULB_BAND,
    PhysicsParams,
    SiteConfig,
)
from .errors import ParseError, TrainingError
from .plant import Trace

INPUT_NAMES = ("util", "wet_bulb", "sup_set", "fan_ratio", "chws_set")
TARGET_NAMES = ("ret_temp", "ret_rh", "chw_flow", "power")
N_INPUTS = len(INPUT_NAMES)
N_TARGETS = len(TARGET_NAMES)

# Operating box the collocation points are drawn from (util is a fraction).
INPUT_LOW = np.array([0.0, WET_BULB_BAND[0], SUPPLY_SETPOINT_BOX[0], FAN_RATIO_BOX[0], CHWS_SETPOINT_BOX[0]])
INPUT_HIGH = np.array([1.0, WET_BULB_BAND[1], SUPPLY_SETPOINT_BOX[1], FAN_RATIO_BOX[1], CHWS_SETPOINT_BOX[1]])

MODEL_FORMAT = "tropic-twin-mlp 1"
ERROR_METRIC = "mean |pred - true| / (max(true) - min(true)) over the test rows"

# Keeps the coil capacity rates positive while an untrained net predicts junk.
_MIN_FLOW = 1e-3
_MIN_DUTY = 1e-3


# ---------------------------------------------------------------------------
# Parameters and data


@dataclass(frozen=True)
class SurrogateParams:
    layer_sizes: tuple[int, ...]
    weights: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    output_mean: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        object.__setattr__(self, "layer_sizes", sizes)
        for name in ("weights", "input_mean", "input_scale", "output_mean", "output_scale"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.weights.shape != (weight_count(sizes),):
            raise ValueError(
                f"expected {weight_count(sizes)} weights for layers {sizes}, got {self.weights.shape}"
            )
        if self.input_mean.shape != (sizes[0],) or self.input_scale.shape != (sizes[0],):
            raise ValueError("input normalizer length does not match the first layer")
        if self.output_mean.shape != (sizes[-1],) or self.output_scale.shape != (sizes[-1],):
            raise ValueError("output normalizer length does not match the last layer")
        if np.any(self.input_scale <= 0) or np.any(self.output_scale <= 0):
            raise ValueError("normalizer scales must be positive")

    def layers(self, weights: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Split a flat weight vector into (W, b) pairs; W is (fan_in, fan_out)."""
        return unflatten(self.layer_sizes, self.weights if weights is None else weights)

    def with_weights(self, weights: np.ndarray) -> "SurrogateParams":
        return SurrogateParams(
            self.layer_sizes, weights, self.input_mean, self.input_scale, self.output_mean, self.output_scale
        )


def weight_count(layer_sizes) -> int:
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def unflatten(layer_sizes, weights: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    pos = 0
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = weights[pos : pos + a * b].reshape(a, b)
        pos += a * b
        out.append((w, weights[pos : pos + b].reshape(1, b)))
        pos += b
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in layers])


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    origin: str = ""

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        y = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} target rows")
        if x.shape[1] != N_INPUTS or y.shape[1] != N_TARGETS:
            raise ValueError(f"expected {N_INPUTS} inputs and {N_TARGETS} targets per row")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, rows) -> "Dataset":
        return Dataset(self.inputs[rows], self.targets[rows], self.origin)

    @classmethod
    def from_trace(cls, trace: Trace, origin: str = "trace") -> "Dataset":
        st = trace.states
        x = np.column_stack([trace.exo[:, 0], trace.exo[:, 1], trace.actions])
        y = np.column_stack([st[:, K.S_T_RET], st[:, K.S_RH_RET], st[:, K.S_M_W], trace.cooling_power])
        return cls(x, y, origin)


@dataclass(frozen=True)
class SensorNoise:
    """Zero-mean Gaussian measurement error on the four recorded targets."""

    temp_sd: float = 0.15  # K
    rh_sd: float = 1.0  # % RH
    flow_rel_sd: float = 0.01  # fraction of reading
    power_rel_sd: float = 0.005  # fraction of reading

    def __post_init__(self):
        if min(self.temp_sd, self.rh_sd, self.flow_rel_sd, self.power_rel_sd) < 0:
            raise ValueError("noise levels must be >= 0")

    def apply(self, data: Dataset, seed: int) -> Dataset:
        y = data.targets
        sd = np.column_stack(
            [
                np.full(len(y), self.temp_sd),
                np.full(len(y), self.rh_sd),
                self.flow_rel_sd * np.abs(y[:, 2]),
                self.power_rel_sd * np.abs(y[:, 3]),
            ]
        )
        rng = np.random.default_rng([seed, 4])
        return Dataset(data.inputs, y + sd * rng.standard_normal(y.shape), data.origin + " (measured)")


NO_NOISE = SensorNoise(0.0, 0.0, 0.0, 0.0)


def split_by_day(data: Dataset, periods_per_day: int, train_days: int) -> tuple[Dataset, Dataset]:
    cut = periods_per_day * train_days
    if len(data) <= cut:
        raise ValueError(f"need more than {train_days} days of rows to split, got {len(data)} rows")
    return data.subset(slice(0, cut)), data.subset(slice(cut, len(data)))


def measured_split(
    trace: Trace, noise: SensorNoise, seed: int, train_days: int = 5
) -> tuple[Dataset, Dataset]:
    """First ``train_days`` as sensors would report them, remaining days as
    plant truth for scoring."""
    per_day = int(round(86400.0 / trace.timestep))
    train, test = split_by_day(Dataset.from_trace(trace), per_day, train_days)
    return noise.apply(train, seed), test


@dataclass(frozen=True)
class TrainConfig:
    lambda_d: float = 1.0
    lambda_p: float = 30.0
    physics_budget_eps: float = 0.05
    epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    n_collocation: int = 2048
    learning_rate: float = 3e-3
    final_lr_fraction: float = 0.03
    hidden: tuple[int, ...] = (64, 64)
    validation_fraction: float = 0.1

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_p < 0 or self.lambda_d + self.lambda_p == 0:
            raise ValueError("lambda_d and lambda_p must be >= 0 and not both zero")
        if not self.physics_budget_eps > 0:
            raise ValueError("physics_budget_eps must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.n_collocation < 0:
            raise ValueError("epochs and batch_size must be >= 1, n_collocation >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainLog:
    """Per-epoch diagnostics; ``train_loss`` is the full-data objective."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    physics_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    final_physics_residual: float = float("nan")
    physics_budget_eps: float = float("nan")

    @property
    def within_budget(self) -> bool:
        return self.final_physics_residual <= self.physics_budget_eps

    def window_non_increasing(self, window: int = 10, rtol: float = 0.2) -> bool:
        """True if no ``window``-epoch stretch ends with a higher best loss than
        the stretch before it, up to ``rtol`` relative minibatch jitter.

        Comparing window minima ignores isolated single-epoch upticks.
        """
        loss = np.asarray(self.train_loss)
        for k in range(len(loss) - 2 * window + 1):
            before = loss[k : k + window].min()
            after = loss[k + window : k + 2 * window].min()
            if after > before * (1.0 + rtol):
                return False
        return True


# ---------------------------------------------------------------------------
# Forward pass


def make_normalizers(data: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Z-score statistics; a constant input column is scaled by its box half-width
    and a constant target by 1 so scales stay positive."""
    in_mean = data.inputs.mean(axis=0)
    in_scale = data.inputs.std(axis=0)
    half_width = 0.5 * (INPUT_HIGH - INPUT_LOW)
    in_scale = np.where(in_scale > 1e-9 * half_width, in_scale, half_width)
    out_mean = data.targets.mean(axis=0)
    out_scale = data.targets.std(axis=0)
    out_scale = np.where(out_scale > 1e-12, out_scale, 1.0)
    return in_mean, in_scale, out_mean, out_scale


def init_params(layer_sizes, normalizers, rng: np.random.Generator) -> SurrogateParams:
    """Glorot-uniform weights, zero biases."""
    layers = []
    for a, b in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = math.sqrt(6.0 / (a + b))
        layers.append((rng.uniform(-limit, limit, size=(a, b)), np.zeros((1, b))))
    return SurrogateParams(tuple(layer_sizes), flatten(layers), *normalizers)


def predict(params: SurrogateParams, inputs: np.ndarray) -> np.ndarray:
    """Batched forward pass in plain NumPy; rows in, rows out."""
    x = np.asarray(inputs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.layer_sizes[0]:
        raise ValueError(f"expected {params.layer_sizes[0]} input features, got {x.shape[1]}")
    h = (x - params.input_mean) / params.input_scale
    layers = params.layers()
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
    w, b = layers[-1]
    y = (h @ w + b) * params.output_scale + params.output_mean
    return y[0] if single else y


def mlp_forward(params: SurrogateParams, x) -> np.ndarray:
    """Prediction for one feature vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (params.layer_sizes[0],):
        raise ValueError(f"expected a feature vector of length {params.layer_sizes[0]}, got shape {x.shape}")
    return predict(params, x)


def _forward_graph(params: SurrogateParams, layer_vars, x: Var) -> Var:
    """Normalised-space output of the network on the tape."""
    h = (x - params.input_mean) / params.input_scale
    for w, b in layer_vars[:-1]:
        h = tanh(h @ w + b)
    w, b = layer_vars[-1]
    return h @ w + b


def _const_layers(g: Graph, params: SurrogateParams):
    return [(g.const(w), g.const(b)) for w, b in params.layers()]


def graph_predict(g: Graph, params: SurrogateParams, x: Var) -> Var:
    """Denormalised predictions on the tape with the weights held constant
    (used when differentiating with respect to the inputs)."""
    yn = _forward_graph(params, _const_layers(g, params), x)
    return yn * params.output_scale + params.output_mean


# ---------------------------------------------------------------------------
# Losses


def data_loss(params: SurrogateParams, batch: Dataset) -> float:
    """Mean squared error in normalised target space."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    pred = predict(params, batch.inputs)
    err = (pred - batch.targets) / params.output_scale
    return float(np.mean(err * err))


def _p_sat(t):
    return K.MAGNUS_C0 * exp(K.MAGNUS_C1 * t / (t + K.MAGNUS_C2))


def _enthalpy(t, w):
    return K.CP_DRY * t + w * (K.H_FG0 + K.CP_VAPOR * t)


@dataclass(frozen=True)
class _Residuals:
    coil: Var  # kW where the coil holds the setpoint, kg/s where it saturates
    rh: Var  # %
    power: Var  # kW
    hall: Var  # kW
    air_capacity: Var  # kW/K, m_a * cp
    saturated: np.ndarray  # (n, 1) bool
    flow_limit: float

    def normalized(self, output_scale: np.ndarray) -> Var:
        """(n, 4) residuals in units of each target's training spread."""
        t_scale = self.air_capacity * float(output_scale[0])
        sat = self.saturated.astype(float)
        coil_scale = t_scale * (1.0 - sat) + self.flow_limit * sat
        return hstack(
            [
                self.coil / coil_scale,
                self.rh / float(output_scale[1]),
                self.power / float(output_scale[3]),
                self.hall / t_scale,
            ]
        )


def coil_saturated(inputs: np.ndarray, theta: PhysicsParams, cfg: SiteConfig) -> np.ndarray:
    """True where the coil cannot hold the supply setpoint even at the pump limit.

    Decided from the inputs alone: the return temperature the hall would settle
    at with the setpoint held is compared against the coil's capacity at
    maximum water flow.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    util, _, t_set, fan, t_chws = x.T
    p_amb = cfg.ambient_pressure
    m_a = cfg.n_crah * cfg.crah_rated_airflow * fan
    idle = theta.it_idle_fraction
    q = cfg.hall_it_design_load * (idle + (1.0 - idle) * util) + cfg.n_crah * theta.fan_cubic_coeff * fan**3
    ps = K.MAGNUS_C0 * np.exp(K.MAGNUS_C1 * t_chws / (t_chws + K.MAGNUS_C2))
    w_sup = K.MW_RATIO * ps / (p_amb - ps)
    w_ret = w_sup + theta.moisture_gain / m_a
    c_air = m_a * (K.CP_DRY + K.CP_VAPOR * w_ret)
    t_ret = t_set + q / c_air
    q_req = m_a * (
        K.CP_DRY * t_ret + w_ret * (K.H_FG0 + K.CP_VAPOR * t_ret)
        - K.CP_DRY * t_set - w_sup * (K.H_FG0 + K.CP_VAPOR * t_set)
    )
    q_max = _coil_capacity_np(_max_flow(cfg) * K.CP_WATER, c_air, theta.coil_ua) * (t_ret - t_chws)
    return (q_max < q_req)[:, None]


def _max_flow(cfg: SiteConfig) -> float:
    return K.PUMP_MAX_RATIO * cfg.pump_rated_flow * cfg.n_chw_pumps


def _coil_capacity_np(c_w, c_air, ua):
    """epsilon * C_min of a counterflow coil (NumPy, for fixed capacity rates)."""
    c_min = np.minimum(c_w, c_air)
    cr = np.minimum(c_w, c_air) / np.maximum(c_w, c_air)
    ntu = ua / c_min
    with np.errstate(invalid="ignore", divide="ignore"):
        e = np.exp(-ntu * (1.0 - cr))
        eps = np.where(np.abs(1.0 - cr) < 1e-9, ntu / (1.0 + ntu), (1.0 - e) / (1.0 - cr * e))
    return eps * c_min


def _coil_capacity(c_w, c_air: Var, ua: float) -> Var:
    """epsilon * C_min on the tape; ``c_w`` may be a Var or an array."""
    c_min = minimum(c_w, c_air)
    c_max = maximum(c_w, c_air)
    cr = c_min / c_max
    decay = exp(-(ua / c_min) * (1.0 - cr))
    # cr == 1 exactly would need the limit form; nudge it off the singularity.
    cr_safe = minimum(cr, 1.0 - 1e-9)
    return (1.0 - decay) / (1.0 - cr_safe * decay) * c_min


def _residual_terms(x: Var, y: Var, theta: PhysicsParams, cfg: SiteConfig) -> _Residuals:
    """Steady-state plant equations applied to predictions ``y`` at inputs ``x``.

    Where the coil holds the setpoint:
      coil:  counterflow duty at the predicted water flow minus the air-side
             duty implied by the predicted return temperature
      hall:  air-side sensible removal minus IT heat plus fan heat
    Where the coil saturates (flow pinned at the pump limit):
      coil:  predicted flow minus the pump limit
      hall:  as above, with the supply temperature the saturated coil delivers
    Everywhere:
      rh:    predicted RH minus the RH implied by the moisture balance
      power: predicted total minus fans + pumps + chillers + towers
    """
    g = x.graph
    util, wet_bulb, t_set, fan, t_chws = (x.column(j) for j in range(N_INPUTS))
    t_ret, rh, flow, power = (y.column(j) for j in range(N_TARGETS))
    p_amb = cfg.ambient_pressure
    saturated = coil_saturated(x.value, theta, cfg)
    sat = saturated.astype(float)
    held = 1.0 - sat

    m_a = cfg.n_crah * cfg.crah_rated_airflow * fan
    q_fan = cfg.n_crah * theta.fan_cubic_coeff * fan**3
    idle = theta.it_idle_fraction
    q_it = cfg.hall_it_design_load * (idle + (1.0 - idle) * util)

    # Return air carries the hall's moisture gain on top of coil-surface saturation.
    ps_coil = _p_sat(t_chws)
    w_sup = K.MW_RATIO * ps_coil / (p_amb - ps_coil)
    w_ret = w_sup + theta.moisture_gain / m_a
    c_air = m_a * (K.CP_DRY + K.CP_VAPOR * w_ret)
    h_ret = _enthalpy(t_ret, w_ret)
    dt_in = t_ret - t_chws

    # Setpoint held.
    q_held = m_a * (h_ret - _enthalpy(t_set, w_sup))
    c_w = maximum(flow, _MIN_FLOW) * K.CP_WATER
    coil_held = _coil_capacity(c_w, c_air, theta.coil_ua) * dt_in - q_held
    hall_held = c_air * (t_ret - t_set) - (q_it + q_fan)

    # Coil saturated: duty at the pump limit sets the supply temperature.
    f_max = _max_flow(cfg)
    q_sat = _coil_capacity(np.full(saturated.shape, f_max * K.CP_WATER), c_air, theta.coil_ua) * dt_in
    t_sup_sat = (h_ret - q_sat / m_a - K.H_FG0 * w_sup) / (K.CP_DRY + K.CP_VAPOR * w_sup)
    hall_sat = c_air * (t_ret - t_sup_sat) - (q_it + q_fan)

    coil = coil_held * held + (flow - f_max) * sat
    hall = hall_held * held + hall_sat * sat
    q_coil = q_held * held + q_sat * sat

    pv_ret = w_ret * p_amb / (K.MW_RATIO + w_ret)
    rh_res = rh - 100.0 * pv_ret / _p_sat(t_ret)

    # Staging is piecewise constant: read the counts off the current values.
    duty = maximum(q_coil, _MIN_DUTY)
    n_staged = np.minimum(np.ceil(duty.value / cfg.chiller_capacity), cfg.n_chillers)
    n_staged = np.maximum(n_staged, 1.0)
    flow_pos = maximum(flow, 0.0)
    n_run = np.maximum(n_staged, np.ceil(flow_pos.value / (K.PUMP_MAX_RATIO * cfg.pump_rated_flow)))
    t_cw = wet_bulb + theta.tower_approach_ref
    for _ in range(K.CW_FIXED_POINT_ITERS):
        cop = _clamped_cop(g, theta, t_chws, t_cw)
        ratio = duty * (1.0 + 1.0 / cop) / (n_staged * cfg.chiller_capacity)
        t_cw = wet_bulb + theta.tower_approach_ref * ratio**theta.tower_exponent
    cop = _clamped_cop(g, theta, t_chws, t_cw)
    p_chillers = duty / cop
    pump_ratio = flow_pos / (n_run * cfg.pump_rated_flow)
    p_pumps = n_staged * theta.pump_cubic_coeff + n_run * theta.pump_cubic_coeff * pump_ratio**3
    p_towers = n_staged * cfg.n_towers_per_loop * cfg.tower_rated_fan_power
    power_res = power - (q_fan + p_pumps + p_chillers + p_towers)

    return _Residuals(coil, rh_res, power_res, hall, c_air, saturated, f_max)


def _clamped_cop(g: Graph, theta: PhysicsParams, t_chws: Var, t_cw: Var) -> Var:
    cop = theta.cop_a0 + theta.cop_a1 * t_chws - theta.cop_a2 * t_cw
    return maximum(minimum(cop, 12.0), 2.0)


def physics_residual(
    params: SurrogateParams | None,
    point,
    theta: PhysicsParams,
    cfg: SiteConfig,
    prediction=None,
    normalized: bool = True,
) -> np.ndarray:
    """Residuals (coil, rh, power, hall) at ``point``.

    The surrogate's own prediction is used unless ``prediction`` is supplied
    (handy for checking plant outputs).  Normalised residuals divide by the
    training spread of the matching target (power residuals by the power
    spread, energy balances by m_a*cp times the return-temperature spread).
    """
    x = np.atleast_2d(np.asarray(point, dtype=float))
    if x.shape[1] != N_INPUTS:
        raise ValueError(f"expected {N_INPUTS} input features")
    if prediction is None:
        if params is None:
            raise ValueError("need either params or an explicit prediction")
        prediction = predict(params, x)
    y = np.atleast_2d(np.asarray(prediction, dtype=float))
    g = Graph()
    terms = _residual_terms(g.const(x), g.const(y), theta, cfg)
    if normalized:
        scale = params.output_scale if params is not None else np.ones(N_TARGETS)
        r = terms.normalized(scale).value
    else:
        r = np.hstack([terms.coil.value, terms.rh.value, terms.power.value, terms.hall.value])
    return r[0] if np.ndim(point) == 1 else r


def mean_physics_residual(params: SurrogateParams, points: np.ndarray, theta, cfg) -> float:
    r = physics_residual(params, np.atleast_2d(points), theta, cfg)
    return float(np.mean(r * r))


def composite_loss(
    params: SurrogateParams,
    batch: Dataset,
    collocation: np.ndarray | None,
    theta: PhysicsParams | None,
    cfg: SiteConfig | None,
    lambda_d: float,
    lambda_p: float,
) -> tuple[float, np.ndarray]:
    """Weighted data + physics loss and its gradient w.r.t. the flat weights."""
    g = Graph()
    layer_vars = [(g.input(w), g.input(b)) for w, b in params.layers()]
    loss = _composite_graph(g, params, layer_vars, batch, collocation, theta, cfg, lambda_d, lambda_p)[0]
    return float(loss.value), np.concatenate([gr.ravel() for gr in g.backward(loss)])


def _composite_graph(g, params, layer_vars, batch, collocation, theta, cfg, lambda_d, lambda_p):
    tgt = (batch.targets - params.output_mean) / params.output_scale
    pred_n = _forward_graph(params, layer_vars, g.const(batch.inputs))
    diff = pred_n - tgt
    d_loss = (diff * diff).mean()
    loss = lambda_d * d_loss
    p_loss = None
    if lambda_p > 0:
        if collocation is not None and len(collocation):
            x_all = np.vstack([batch.inputs, collocation])
            pred_c = _forward_graph(params, layer_vars, g.const(collocation))
            pred_n = _vstack_rows(pred_n, pred_c)
        else:
            x_all = batch.inputs
        y = pred_n * params.output_scale + params.output_mean
        r = _residual_terms(g.const(x_all), y, theta, cfg).normalized(params.output_scale)
        p_loss = (r * r).mean()
        loss = loss + lambda_p * p_loss
    return loss, d_loss, p_loss


def _vstack_rows(a: Var, b: Var) -> Var:
    # Row stacking as a product with selector matrices keeps the tape op set small.
    n, m = a.shape[0], b.shape[0]
    top = np.vstack([np.eye(n), np.zeros((m, n))])
    bottom = np.vstack([np.zeros((n, m)), np.eye(m)])
    g = a.graph
    return g.const(top) @ a + g.const(bottom) @ b


# ---------------------------------------------------------------------------
# Training


def sample_collocation(n: int, rng: np.random.Generator) -> np.ndarray:
    return INPUT_LOW + (INPUT_HIGH - INPUT_LOW) * rng.random((n, N_INPUTS))


def train_data_driven(train: Dataset, cfg: TrainConfig) -> tuple[SurrogateParams, TrainLog]:
    return _train(train, cfg, None, None, 0.0)


def train_piml(
    train: Dataset, theta: PhysicsParams, cfg: TrainConfig, site: SiteConfig
) -> tuple[SurrogateParams, TrainLog]:
    return _train(train, cfg, theta, site, cfg.lambda_p)


def _train(train: Dataset, cfg: TrainConfig, theta, site, lambda_p: float):
    if len(train) == 0:
        raise ValueError("empty training set")
    init_rng = np.random.default_rng([cfg.seed, 0])
    phys_rng = np.random.default_rng([cfg.seed, 1])

    order = init_rng.permutation(len(train))
    n_val = int(round(cfg.validation_fraction * len(train)))
    if len(train) - n_val < 1:
        n_val = 0
    val = train.subset(np.sort(order[:n_val])) if n_val else None
    fit = train.subset(np.sort(order[n_val:]))

    sizes = (N_INPUTS, *cfg.hidden, N_TARGETS)
    params = init_params(sizes, make_normalizers(fit), init_rng)
    weights = params.weights
    state = AdamState.zeros(weights.size, learning_rate=cfg.learning_rate)

    n_batches = max(1, math.ceil(len(fit) / cfg.batch_size))
    log = TrainLog(physics_budget_eps=cfg.physics_budget_eps)
    best_w, best_val = weights, math.inf
    total_steps = cfg.epochs * n_batches
    step = 0
    for epoch in range(cfg.epochs):
        perm = init_rng.permutation(len(fit))
        colloc = sample_collocation(cfg.n_collocation, phys_rng) if lambda_p > 0 else None
        colloc_parts = np.array_split(colloc, n_batches) if colloc is not None else [None] * n_batches
        for b in range(n_batches):
            rows = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if len(rows) == 0:
                continue
            batch = fit.subset(rows)
            p = params.with_weights(weights)
            g = Graph()
            layer_vars = [(g.input(w), g.input(bb)) for w, bb in p.layers()]
            loss, d_loss, p_loss = _composite_graph(
                g, p, layer_vars, batch, colloc_parts[b], theta, site, cfg.lambda_d, lambda_p
            )
            if not np.isfinite(loss.value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}: data={float(d_loss.value):.6g}"
                    + ("" if p_loss is None else f" physics={float(p_loss.value):.6g}")
                )
            grad = np.concatenate([gr.ravel() for gr in g.backward(loss)])
            lr = _cosine_lr(cfg, step, total_steps)
            weights, state = adam_step(weights, grad, state, learning_rate=lr)
            step += 1

        p = params.with_weights(weights)
        fit_data = data_loss(p, fit)
        phys = mean_physics_residual(p, fit.inputs, theta, site) if lambda_p > 0 else 0.0
        log.train_loss.append(cfg.lambda_d * fit_data + lambda_p * phys)
        log.physics_loss.append(phys)
        if val is None:
            val_loss = log.train_loss[-1]
        else:
            val_loss = cfg.lambda_d * data_loss(p, val)
            if lambda_p > 0:
                val_loss += lambda_p * mean_physics_residual(p, val.inputs, theta, site)
        log.val_loss.append(val_loss)
        if not np.isfinite(log.train_loss[-1]):
            raise TrainingError(f"non-finite training loss after epoch {epoch}")
        if val_loss < best_val:
            best_val, best_w, log.best_epoch = val_loss, weights, epoch

    params = params.with_weights(best_w)
    if lambda_p > 0:
        check = np.vstack([fit.inputs, sample_collocation(cfg.n_collocation, phys_rng)])
        log.final_physics_residual = mean_physics_residual(params, check, theta, site)
    return params, log


def _cosine_lr(cfg: TrainConfig, step: int, total: int) -> float:
    frac = step / max(1, total - 1)
    floor = cfg.learning_rate * cfg.final_lr_fraction
    return floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Evaluation and files


@dataclass(frozen=True)
class ErrorReport:
    targets: tuple[str, ...]
    mean_rel_err: np.ndarray
    max_rel_err: np.ndarray
    metric: str = ERROR_METRIC

    def rows(self) -> list[tuple[str, float, float]]:
        return [(t, float(a), float(b)) for t, a, b in zip(self.targets, self.mean_rel_err, self.max_rel_err)]

    def to_csv(self) -> str:
        lines = [f"# metric={self.metric}", "target,mean_rel_err,max_rel_err"]
        lines += [f"{t},{a:.6e},{b:.6e}" for t, a, b in self.rows()]
        return "\n".join(lines) + "\n"


def evaluate_errors(params: SurrogateParams, test: Dataset) -> ErrorReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = predict(params, test.inputs)
    spread = test.targets.max(axis=0) - test.targets.min(axis=0)
    spread = np.where(spread > 0, spread, 1.0)
    rel = np.abs(pred - test.targets) / spread
    return ErrorReport(TARGET_NAMES, rel.mean(axis=0), rel.max(axis=0))


def _fmt(values) -> str:
    return " ".join(f"{v:.9g}" for v in np.asarray(values, dtype=float).ravel())


def dumps_model(params: SurrogateParams) -> str:
    lines = [
        MODEL_FORMAT,
        "layers " + " ".join(str(n) for n in params.layer_sizes),
        "input_mean " + _fmt(params.input_mean),
        "input_scale " + _fmt(params.input_scale),
        "output_mean " + _fmt(params.output_mean),
        "output_scale " + _fmt(params.output_scale),
        f"weights {params.weights.size}",
    ]
    lines += [_fmt(params.weights[i : i + 8]) for i in range(0, params.weights.size, 8)]
    return "\n".join(lines) + "\n"


def loads_model(text: str) -> SurrogateParams:
    lines = text.splitlines()
    if not lines or lines[0].strip() != MODEL_FORMAT:
        raise ParseError(f"expected header {MODEL_FORMAT!r}", 1)
    fields: dict[str, list[str]] = {}
    i = 1
    while i < len(lines):
        parts = lines[i].split()
        i += 1
        if not parts:
            continue
        key, rest = parts[0], parts[1:]
        if key == "weights":
            try:
                n = int(rest[0])
                vals = [float(v) for ln in lines[i:] for v in ln.split()]
            except (IndexError, ValueError) as exc:
                raise ParseError(f"bad weights block: {exc}", i) from None
            if len(vals) != n:
                raise ParseError(f"expected {n} weights, found {len(vals)}", i)
            fields["weights"] = vals
            break
        fields[key] = rest
    try:
        return SurrogateParams(
            tuple(int(v) for v in fields["layers"]),
            np.array(fields["weights"], dtype=float),
            np.array(fields["input_mean"], dtype=float),
            np.array(fields["input_scale"], dtype=float),
            np.array(fields["output_mean"], dtype=float),
            np.array(fields["output_scale"], dtype=float),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]}", len(lines)) from None
    except ValueError as exc:
        raise ParseError(str(exc), len(lines)) from None


def save_model(params: SurrogateParams, path: str | Path) -> None:
    Path(path).write_text(dumps_model(params))


def load_model(path: str | Path) -> SurrogateParams:
    return loads_model(Path(path).read_text())
