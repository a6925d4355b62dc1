"""Exception types shared across the package.

Every error carries an ``exit_code`` so the CLI can report the failure
category without string matching.
"""


class PortforgeError(Exception):
    exit_code = 1


class InvalidArgument(PortforgeError, ValueError):
    exit_code = 2


class NetlistError(InvalidArgument):
    """Netlist syntax or validation failure; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegenerateReference(PortforgeError, ValueError):
    exit_code = 3


class StructuralSingularity(PortforgeError):
    exit_code = 4


class SingularSystem(PortforgeError):
    exit_code = 4


class Divergence(PortforgeError):
    """Nonlinear or joint iteration failed to converge."""

    exit_code = 5

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class OptimizationError(PortforgeError):
    exit_code = 6


class ConfigError(InvalidArgument):
    exit_code = 7
