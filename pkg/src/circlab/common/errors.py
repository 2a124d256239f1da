"""Named failures raised across circlab.

Argument problems derive from ValueError, numerical failures from
ArithmeticError and exhausted limits from RuntimeError, so callers that only
know the builtin families still catch them.
"""

from __future__ import annotations

from typing import Any


class CirclabError(Exception):
    """Base class for every domain error."""


# ---------- Configuration ----------
class ConfigError(CirclabError, ValueError):
    pass


# ---------- Map evaluation and marked sets ----------
class SingularProximity(CirclabError, ArithmeticError):
    """Point too close to a zero of Phi for ln|Phi| to be meaningful."""

    def __init__(self, x: float, phi_value: float) -> None:
        super().__init__(f"|Phi({x!r})| = {phi_value:.3e} is inside the singular exclusion radius")
        self.x = x
        self.phi_value = phi_value


class NoZeros(CirclabError, ValueError):
    """Phi never changes sign on the circle."""


class DegeneratePhi(CirclabError, ValueError):
    """Morse or transversality certificate failed."""


class UnresolvedRoot(CirclabError, ArithmeticError):
    pass


class UnboundedRatio(CirclabError, ArithmeticError):
    pass


# ---------- Orbits ----------
class UndefinedAtStep(CirclabError, ArithmeticError):
    def __init__(self, step: int, message: str = "") -> None:
        super().__init__(message or f"d_i vanishes at step {step}")
        self.step = step


class OrbitHitsSet(CirclabError, ArithmeticError):
    pass


class CriticalOrbitTruncated(CirclabError, ArithmeticError):
    def __init__(self, critical_point: float, step: int) -> None:
        super().__init__(
            f"orbit of f({critical_point:.12g}) entered the exclusion radius at step {step}"
        )
        self.critical_point = critical_point
        self.step = step


# ---------- Returns ----------
class OutOfBindingRange(CirclabError, ValueError):
    def __init__(self, message: str, time: int | None = None) -> None:
        super().__init__(message if time is None else f"{message} (return at time {time})")
        self.time = time


class NotAFreeReturn(CirclabError, ValueError):
    pass


# ---------- Inducing ----------
class UnresolvableCut(CirclabError, ArithmeticError):
    pass


class BudgetExceeded(CirclabError, RuntimeError):
    """Limit reached before the target; the partial result rides along."""

    def __init__(self, message: str, partial: Any = None) -> None:
        super().__init__(message)
        self.partial = partial


class GrowthFailed(CirclabError, RuntimeError):
    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"{message} (blocked at step {step})")
        self.step = step


# ---------- Statistics ----------
class InsufficientData(CirclabError, RuntimeError):
    pass


class NonConvergence(CirclabError, ArithmeticError):
    pass


class DivergentIntegral(CirclabError, ArithmeticError):
    pass


class NoiseDominated(CirclabError, RuntimeError):
    pass


class NegativeVarianceEstimate(CirclabError, ArithmeticError):
    def __init__(self, sigma_squared: float, lag: int) -> None:
        super().__init__(f"Green-Kubo sum truncated at lag {lag} gave sigma^2 = {sigma_squared:.3e}")
        self.sigma_squared = sigma_squared
        self.lag = lag


class EmptyBall(CirclabError, ArithmeticError):
    pass
