"""Exception types raised across the package."""


class LLJumpError(Exception):
    """Base class for all package errors."""


class NonUnitQuaternion(LLJumpError, ValueError):
    pass


class DegenerateMass(LLJumpError, ValueError):
    pass


class SingularInertia(LLJumpError, ArithmeticError):
    pass


class InconsistentSchedule(LLJumpError, ValueError):
    pass


class InfeasibleBounds(LLJumpError, ValueError):
    pass


class MissingJacobian(LLJumpError, ValueError):
    pass


class LengthMismatch(LLJumpError, ValueError):
    pass


class NoActiveContacts(LLJumpError, ValueError):
    pass


class QpInfeasible(LLJumpError, ArithmeticError):
    pass


class NumericalBlowup(LLJumpError, ArithmeticError):
    """Simulation state left its sanity envelope (usually unstable gains)."""

    def __init__(self, message, tick=None):
        super().__init__(message)
        self.tick = tick


class ScenarioError(LLJumpError, ValueError):
    pass
