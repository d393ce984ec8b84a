"""Site topology, rated component data and the physics parameter vector.

Scenario files are flat ``key = value`` text grouped under ``[plant]``,
``[sla]`` and ``[physics]`` headers; ``#`` starts a comment.  Every key is
optional and falls back to the built-in tropical case study.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ParseError, ValidationError

# Feasible action box shared by the plant, the optimizers and validation.
SUPPLY_SETPOINT_BOX = (16.0, 27.0)
FAN_RATIO_BOX = (0.3, 1.0)
CHWS_SETPOINT_BOX = (5.0, 15.0)
WET_BULB_BAND = (20.0, 32.0)

# Upper bound on tower reject ratio; COP >= 2 keeps rejection below 1.5x capacity.
MAX_REJECT_RATIO = 1.5


@dataclass(frozen=True)
class PhysicsParams:
    """Identifiable coefficients of the lumped hall and plant models.

    ``fan_cubic_coeff`` is the power of one CRAH fan at full speed and
    ``pump_cubic_coeff`` the power of one chilled-water pump at rated flow.
    ``coil_ua`` is the aggregate conductance of all hall coils.
    """

    fan_cubic_coeff: float = 7.9
    pump_cubic_coeff: float = 48.0
    coil_ua: float = 220.0
    cop_a0: float = 7.3
    cop_a1: float = 0.2
    cop_a2: float = 0.1
    tower_approach_ref: float = 5.0
    tower_exponent: float = 0.6
    zone_heat_capacity: float = 5.0e4
    recirculation_gain: float = 0.5
    moisture_gain: float = 0.002
    it_idle_fraction: float = 0.3

    def cop(self, chws_temp: float, cw_temp: float) -> float:
        """Unclamped affine COP."""
        return self.cop_a0 + self.cop_a1 * chws_temp - self.cop_a2 * cw_temp


@dataclass(frozen=True)
class SiteConfig:
    n_chillers: int = 5
    chiller_capacity: float = 4572.0
    n_crah: int = 22
    crah_rated_fan_power: float = 7.5
    crah_rated_airflow: float = 12.5
    n_chw_pumps: int = 5
    pump_rated_power: float = 45.0
    pump_rated_flow: float = 150.0
    n_towers_per_loop: int = 2
    tower_rated_fan_power: float = 15.0
    hall_it_design_load: float = 2621.0
    sla_max_inlet_temp: float = 27.0
    sla_rh_min: float = 30.0
    sla_rh_max: float = 60.0
    ambient_pressure: float = 101.325
    physics: PhysicsParams = field(default_factory=PhysicsParams)

    @property
    def total_chiller_capacity(self) -> float:
        return self.n_chillers * self.chiller_capacity

    @property
    def design_it_airflow(self) -> float:
        """IT airflow demand at design load (CRAHs carry a 25 % margin over it)."""
        return self.n_crah * self.crah_rated_airflow / 1.25

    def with_physics(self, **changes: float) -> "SiteConfig":
        return dataclasses.replace(
            self, physics=dataclasses.replace(self.physics, **changes)
        )


_SECTIONS = {
    "plant": (
        "n_chillers",
        "chiller_capacity",
        "n_crah",
        "crah_rated_fan_power",
        "crah_rated_airflow",
        "n_chw_pumps",
        "pump_rated_power",
        "pump_rated_flow",
        "n_towers_per_loop",
        "tower_rated_fan_power",
        "hall_it_design_load",
        "ambient_pressure",
    ),
    "sla": ("sla_max_inlet_temp", "sla_rh_min", "sla_rh_max"),
    "physics": tuple(f.name for f in fields(PhysicsParams)),
}
_INT_FIELDS = {"n_chillers", "n_crah", "n_chw_pumps", "n_towers_per_loop"}
PHYSICS_FIELDS = _SECTIONS["physics"]


def default_case_study() -> SiteConfig:
    """One data hall of the 18,350 kW tropical site plus its shared chiller plant."""
    return SiteConfig()


def validate(cfg: SiteConfig) -> list[str]:
    """Return one message per violated invariant, in a fixed order."""
    out: list[str] = []
    for name in _SECTIONS["plant"]:
        if not getattr(cfg, name) > 0:
            out.append(f"{name} must be strictly positive (got {getattr(cfg, name)})")
    if not cfg.sla_max_inlet_temp > 0:
        out.append("sla_max_inlet_temp must be strictly positive")
    if not (0 < cfg.sla_rh_min < 100 and 0 < cfg.sla_rh_max < 100):
        out.append("sla_rh_min and sla_rh_max must lie in (0, 100)")
    if not cfg.sla_rh_min < cfg.sla_rh_max:
        out.append(
            f"sla_rh_min ({cfg.sla_rh_min}) must be below sla_rh_max ({cfg.sla_rh_max})"
        )
    if cfg.hall_it_design_load > cfg.total_chiller_capacity:
        out.append(
            f"hall_it_design_load ({cfg.hall_it_design_load} kW) exceeds chiller "
            f"capacity ({cfg.total_chiller_capacity} kW)"
        )

    p = cfg.physics
    for name in (
        "fan_cubic_coeff",
        "pump_cubic_coeff",
        "coil_ua",
        "tower_approach_ref",
        "tower_exponent",
        "zone_heat_capacity",
    ):
        if not getattr(p, name) > 0:
            out.append(f"physics.{name} must be strictly positive (got {getattr(p, name)})")
    if not p.moisture_gain >= 0:
        out.append("physics.moisture_gain must be non-negative")
    for name in ("recirculation_gain", "it_idle_fraction"):
        if not 0 <= getattr(p, name) < 1:
            out.append(f"physics.{name} must lie in [0, 1)")
    if p.tower_approach_ref > 0 and p.tower_exponent > 0:
        lo, hi = cop_range(cfg)
        if not (2.0 <= lo and hi <= 12.0):
            out.append(f"chiller COP over the setpoint box spans [{lo:.3g}, {hi:.3g}], outside [2, 12]")
    return out


def cop_range(cfg: SiteConfig) -> tuple[float, float]:
    """Extremes of the affine COP over chws box x reachable condenser temperatures."""
    p = cfg.physics
    cw_hi = WET_BULB_BAND[1] + p.tower_approach_ref * MAX_REJECT_RATIO**p.tower_exponent
    corners = [
        p.cop(t, c) for t in CHWS_SETPOINT_BOX for c in (WET_BULB_BAND[0], cw_hi)
    ]
    return min(corners), max(corners)


def check(cfg: SiteConfig) -> SiteConfig:
    problems = validate(cfg)
    if problems:
        raise ValidationError(problems)
    return cfg


def parse_site_config(text: str) -> SiteConfig:
    """Parse scenario text; raises ParseError or ValidationError."""
    values: dict[str, dict[str, float | int]] = {s: {} for s in _SECTIONS}
    section: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(f"malformed section header {raw.strip()!r}", lineno)
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ParseError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        if section is None:
            raise ParseError("key outside of any section", lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in _SECTIONS[section]:
            raise ParseError(f"unknown key {key!r} in [{section}]", lineno)
        if key in values[section]:
            raise ParseError(f"duplicate key {key!r}", lineno)
        try:
            number = int(value) if key in _INT_FIELDS else float(value)
        except ValueError:
            kind = "integer" if key in _INT_FIELDS else "number"
            raise ParseError(f"{key} expects a {kind}, got {value!r}", lineno) from None
        if isinstance(number, float) and not math.isfinite(number):
            raise ParseError(f"{key} must be finite", lineno)
        values[section][key] = number

    physics = PhysicsParams(**values["physics"])
    cfg = SiteConfig(**values["plant"], **values["sla"], physics=physics)
    return check(cfg)


def load_site_config(path: str | Path | None) -> SiteConfig:
    if path is None:
        return default_case_study()
    return parse_site_config(Path(path).read_text(encoding="utf-8"))


def serialize_site_config(cfg: SiteConfig) -> str:
    lines: list[str] = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        source = cfg.physics if section == "physics" else cfg
        for key in keys:
            lines.append(f"{key} = {getattr(source, key)!r}")
        lines.append("")
    return "\n".join(lines)
