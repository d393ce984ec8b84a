import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tropic_twin import psychro
from tropic_twin.errors import DomainError

P = psychro.STANDARD_PRESSURE

# Frozen from a standalone Magnus / ideal-gas script (no package imports).
PSAT_20C = 2.333440623099358
W_AT_2334 = 0.01466545443525169


def test_saturation_pressure_at_zero_is_the_magnus_prefactor():
    assert psychro.saturation_pressure(0.0) == pytest.approx(0.61094, abs=1e-12)


def test_saturation_pressure_at_20c():
    assert psychro.saturation_pressure(20.0) == pytest.approx(PSAT_20C, rel=1e-12)
    assert abs(psychro.saturation_pressure(20.0) / 2.339 - 1) < 0.005


def test_saturation_pressure_increases_from_20_to_30():
    assert psychro.saturation_pressure(30.0) > psychro.saturation_pressure(20.0)


@pytest.mark.parametrize("temp", [-50.1, 100.1, math.nan])
def test_saturation_pressure_rejects_out_of_range(temp):
    with pytest.raises(DomainError):
        psychro.saturation_pressure(temp)


def test_humidity_ratio_examples():
    assert psychro.humidity_ratio(0.0, P) == 0.0
    assert psychro.humidity_ratio(2.334, P) == pytest.approx(W_AT_2334, rel=1e-12)
    with pytest.raises(DomainError):
        psychro.humidity_ratio(P, P)


def test_relative_humidity_examples():
    assert psychro.relative_humidity(20.0, 0.0, P) == 0.0
    assert psychro.relative_humidity(20.0, 0.01467, P) == pytest.approx(100.0, abs=0.05)


def test_dew_point_examples():
    w_sat = psychro.humidity_ratio_from_rh(20.0, 100.0, P)
    assert psychro.dew_point(w_sat, P) == pytest.approx(20.0, abs=1e-6)
    assert psychro.dew_point(psychro.humidity_ratio_from_rh(25.0, 50.0, P), P) < 25.0
    assert psychro.dew_point(0.01467, P) == pytest.approx(20.0, abs=0.01)


def test_enthalpy_examples():
    assert psychro.moist_air_enthalpy(0.0, 0.0) == 0.0
    assert psychro.moist_air_enthalpy(25.0, 0.0) == pytest.approx(25.15, abs=1e-12)
    assert psychro.moist_air_enthalpy(25.0, 0.010) == pytest.approx(50.625, abs=1e-12)


def test_moist_air_state_rejects_negative_humidity():
    with pytest.raises(DomainError):
        psychro.MoistAirState(20.0, -1e-4)


def test_rh_is_clamped_at_saturation():
    assert psychro.MoistAirState(20.0, 0.03).rh == 100.0


temps = st.floats(-50.0, 100.0, allow_nan=False)


@given(temps, temps)
def test_saturation_pressure_strictly_monotone(a, b):
    # Pairs closer than the float resolution of the exponent cannot be ordered.
    if a + 1e-6 < b:
        assert psychro.saturation_pressure(a) < psychro.saturation_pressure(b)


@given(st.floats(1e-6, 0.9))
def test_humidity_ratio_vapor_pressure_inverse(frac):
    pv = frac * P
    assert psychro.vapor_pressure(psychro.humidity_ratio(pv, P), P) == pytest.approx(pv, rel=1e-10)


@given(st.floats(0.0, 60.0), st.floats(1.0, 100.0))
def test_rh_round_trip(temp, rh):
    w = psychro.humidity_ratio_from_rh(temp, rh, P)
    assert psychro.relative_humidity(temp, w, P) == pytest.approx(rh, rel=1e-9)


@given(st.floats(0.0, 60.0), st.floats(5.0, 100.0))
def test_dew_point_not_above_dry_bulb(temp, rh):
    w = psychro.humidity_ratio_from_rh(temp, rh, P)
    assert psychro.dew_point(w, P) <= temp + 1e-9
