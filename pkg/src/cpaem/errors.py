"""Exception hierarchy; each class carries the process exit code used by the CLI."""


class CpaemError(Exception):
    exit_code = 2


class InputError(CpaemError, ValueError):
    """Malformed input or usage (exit code 1)."""

    exit_code = 1


class DegenerateNetworkError(InputError):
    """A hidden unit has an identically zero weight row."""


class NumericalError(CpaemError, ArithmeticError):
    """Numerical failure: LP breakdown, degenerate geometry, monotonicity violation."""

    exit_code = 2


class DegenerateRegionError(NumericalError):
    pass


class StaleCacheError(NumericalError):
    """Posterior cache used after the parameters it was computed under changed."""


class ResourceError(CpaemError, RuntimeError):
    """Region cap or similar resource limit exceeded (exit code 3)."""

    exit_code = 3
