"""Moist-air properties at a given total pressure.

Saturation pressure uses the Magnus form
``P_sat = 0.61094 * exp(17.625 T / (T + 243.04))`` kPa, valid from -50 to
100 degC.  Temperatures are degC, pressures kPa, humidity ratios kg/kg dry air.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import _kernels as K
from .errors import DomainError

STANDARD_PRESSURE = 101.325
T_MIN = -50.0
T_MAX = 100.0


@dataclass(frozen=True)
class MoistAirState:
    temp: float
    humidity_ratio: float
    pressure: float = STANDARD_PRESSURE

    def __post_init__(self):
        if not self.humidity_ratio >= 0:
            raise DomainError(f"humidity ratio must be >= 0, got {self.humidity_ratio}")
        if not self.pressure > 0:
            raise DomainError(f"pressure must be > 0, got {self.pressure}")

    @property
    def rh(self) -> float:
        return relative_humidity(self.temp, self.humidity_ratio, self.pressure)

    @property
    def enthalpy(self) -> float:
        return moist_air_enthalpy(self.temp, self.humidity_ratio)


def _check_temp(temp: float) -> None:
    if not T_MIN <= temp <= T_MAX:
        raise DomainError(f"temperature {temp} degC outside [{T_MIN}, {T_MAX}]")


def saturation_pressure(temp: float) -> float:
    _check_temp(temp)
    return K.p_sat(float(temp))


def humidity_ratio(vapor_pressure: float, total_pressure: float = STANDARD_PRESSURE) -> float:
    if vapor_pressure < 0:
        raise DomainError("vapor pressure must be non-negative")
    if vapor_pressure >= total_pressure:
        raise DomainError(
            f"vapor pressure {vapor_pressure} kPa must be below total pressure {total_pressure} kPa"
        )
    return K.w_from_pv(float(vapor_pressure), float(total_pressure))


def vapor_pressure(humidity_ratio: float, total_pressure: float = STANDARD_PRESSURE) -> float:
    """Partial pressure of water vapour for a humidity ratio (inverse of ``humidity_ratio``)."""
    if humidity_ratio < 0:
        raise DomainError("humidity ratio must be non-negative")
    return K.pv_from_w(float(humidity_ratio), float(total_pressure))


def relative_humidity(
    temp: float, humidity_ratio: float, total_pressure: float = STANDARD_PRESSURE
) -> float:
    """Relative humidity in percent, clamped to [0, 100]."""
    if humidity_ratio < 0:
        raise DomainError("humidity ratio must be non-negative")
    _check_temp(temp)
    return K.rh_of(float(temp), float(humidity_ratio), float(total_pressure))


def humidity_ratio_from_rh(
    temp: float, rh: float, total_pressure: float = STANDARD_PRESSURE
) -> float:
    if not 0 <= rh <= 100:
        raise DomainError(f"relative humidity {rh} % outside [0, 100]")
    return humidity_ratio(rh / 100.0 * saturation_pressure(temp), total_pressure)


def dew_point(humidity_ratio: float, total_pressure: float = STANDARD_PRESSURE) -> float:
    """Temperature at which the vapour in ``humidity_ratio`` saturates (inverted Magnus)."""
    if not humidity_ratio > 0:
        raise DomainError("dew point needs a strictly positive humidity ratio")
    pv = K.pv_from_w(float(humidity_ratio), float(total_pressure))
    ln_ratio = math.log(pv / K.MAGNUS_C0)
    if ln_ratio >= K.MAGNUS_C1:
        raise DomainError("vapor pressure beyond the Magnus asymptote")
    t = K.MAGNUS_C2 * ln_ratio / (K.MAGNUS_C1 - ln_ratio)
    _check_temp(t)
    return t


def moist_air_enthalpy(temp: float, humidity_ratio: float) -> float:
    """Specific enthalpy in kJ per kg dry air, zero for dry air at 0 degC."""
    return K.enthalpy(float(temp), float(humidity_ratio))
