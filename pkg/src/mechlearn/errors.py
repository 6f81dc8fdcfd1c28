"""Exception taxonomy shared across the package.

Every error carries an ``exit_code`` so the CLI can map failure categories
to distinct process exit codes (documented in the README).
"""


class MechLearnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(MechLearnError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class ShapeError(MechLearnError, ValueError):
    """Dimension mismatch between arrays or between data and a model."""

    exit_code = 2


class InvalidArchitectureError(MechLearnError, ValueError):
    """Malformed network architecture (empty layer list, zero-size layer)."""

    exit_code = 2


class MissingArtifactError(MechLearnError, FileNotFoundError):
    """A required input file (dataset, checkpoint, metrics) does not exist."""

    exit_code = 3


class ArtifactConflictError(MechLearnError):
    """Output exists with a different config hash; pass --force to overwrite."""

    exit_code = 3


class NumericError(MechLearnError, ArithmeticError):
    """A non-finite value appeared during numeric evaluation."""

    exit_code = 4


class NonPositiveDefiniteMassError(NumericError):
    """Cholesky factorization of a mass matrix failed."""

    exit_code = 4


class DivergedTrainingError(NumericError):
    """Training loss became non-finite; reports epoch and batch."""

    exit_code = 4


class DivergedRolloutError(NumericError):
    """Closed-loop or open-loop simulation produced a non-finite state."""

    exit_code = 4


class InfeasibleTrajectoryError(MechLearnError):
    """Trajectory optimization exhausted its iteration budget before the
    dynamics defects met tolerance.  Carries the best iterate found."""

    exit_code = 5

    def __init__(self, message, trajectory=None, defect_norm=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.defect_norm = defect_norm


class AllDivergedError(MechLearnError):
    """Every point of a gain-search grid diverged; carries per-point notes."""

    exit_code = 5

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []
