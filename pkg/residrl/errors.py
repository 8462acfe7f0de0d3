"""
Exception taxonomy. Every error the command line can report carries the
process exit status it maps to.
"""


class ResidrlError(Exception):
    exit_code = 1


class ConfigError(ResidrlError):
    exit_code = 2

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class CalibrationError(ResidrlError):
    """Base policy succeeds too rarely in the target domain to seed demonstrations."""
    exit_code = 3


class MissingArtifactError(ResidrlError):
    exit_code = 4

    def __init__(self, path, hint: str = ""):
        self.path = path
        msg = f"missing artifact: {path}"
        if hint:
            msg += f" ({hint})"
        super().__init__(msg)


class OutputExistsError(ResidrlError):
    exit_code = 5

    def __init__(self, path):
        self.path = path
        super().__init__(f"output already exists: {path} (pass --force to replace it)")


class ThresholdNotReachedError(ResidrlError):
    exit_code = 1


class NumericalDivergenceError(ResidrlError, FloatingPointError):
    exit_code = 1


class ObservationLayoutError(ResidrlError, ValueError):
    exit_code = 1


class StaleGraphError(ResidrlError, RuntimeError):
    exit_code = 1
