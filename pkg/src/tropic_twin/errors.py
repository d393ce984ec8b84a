"""Exception types shared across the package."""


class TwinError(Exception):
    """Base class for all package errors."""


class DomainError(TwinError, ValueError):
    """An argument lies outside the domain where a formula is valid."""


class ParseError(TwinError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class ValidationError(TwinError, ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class InfeasibleDutyError(TwinError):
    """The coil cannot meet the requested duty even at maximum water flow."""

    def __init__(self, required_kw: float, max_kw: float):
        self.required_kw = required_kw
        self.max_kw = max_kw
        super().__init__(
            f"coil duty {required_kw:.3f} kW exceeds deliverable {max_kw:.3f} kW"
        )


class CapacityError(TwinError, ValueError):
    """Evaporator load exceeds installed chiller capacity."""


class TrainingError(TwinError, RuntimeError):
    """Training produced a non-finite loss."""
