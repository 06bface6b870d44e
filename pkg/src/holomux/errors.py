"""Exception types shared across the package."""


class HolomuxError(Exception):
    """Base class for all holomux errors."""


class ParameterError(HolomuxError, ValueError):
    """A numeric argument is outside its documented domain."""


class ConfigFileError(HolomuxError, ValueError):
    """A config file is malformed or contains unknown keys."""


class ShotOrderError(HolomuxError, ValueError):
    """Event stream is not grouped by shot id."""


class BinningMismatchError(HolomuxError, ValueError):
    """Two histograms (or a histogram and derived counts) disagree on binning."""


class FitError(HolomuxError, RuntimeError):
    """A least-squares fit failed to converge; carries the initial guess."""

    def __init__(self, message, initial_guess=None):
        super().__init__(message)
        self.initial_guess = initial_guess
