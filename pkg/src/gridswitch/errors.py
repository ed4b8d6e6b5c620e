"""Exception types raised across the package."""


class GridSwitchError(Exception):
    """Base class for every error raised by gridswitch."""


class InvalidState(GridSwitchError, ValueError):
    pass


class TopologyError(GridSwitchError, ValueError):
    pass


class ConfigError(GridSwitchError, ValueError):
    pass


class NumericalDivergence(GridSwitchError, FloatingPointError):
    """A simulated state became non-finite.

    ``index`` is the flat index of the first offending state entry and
    ``t`` the simulation time at which it was detected.
    """

    def __init__(self, message, index=None, t=None):
        super().__init__(message)
        self.index = index
        self.t = t


class CapExceeded(GridSwitchError, RuntimeError):
    def __init__(self, cap):
        super().__init__(f"arborescence enumeration exceeded cap of {cap} trees")
        self.cap = cap


class ShapeError(GridSwitchError, ValueError):
    pass


class DataError(GridSwitchError, ValueError):
    pass


class DivergenceError(GridSwitchError, FloatingPointError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class CalibrationError(GridSwitchError, ValueError):
    pass


class AllTreesCompromised(GridSwitchError, RuntimeError):
    """No candidate topology produced a conforming abnormality estimate."""

    def __init__(self, message, estimates=None):
        super().__init__(message)
        self.estimates = estimates
