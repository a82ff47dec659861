"""Exception types shared across the package."""


class PhaseDvfsError(Exception):
    """Base class for all errors raised by this package."""


class TraceError(PhaseDvfsError, ValueError):
    pass


class EmptyTrace(TraceError):
    pass


class NonMonotoneArrivals(TraceError):
    pass


class MalformedRow(TraceError):
    pass


class OffGridFrequency(PhaseDvfsError, ValueError):
    def __init__(self, f, grid=None):
        self.f = f
        msg = f"frequency {f} MHz is not on the grid"
        if grid is not None:
            msg += f" [{grid.f_min}:{grid.f_max}:{grid.step}]"
        super().__init__(msg)


class FitError(PhaseDvfsError, ValueError):
    pass


class RankDeficientError(FitError):
    pass


class NegativeLatencyError(FitError):
    pass


class ProfileError(PhaseDvfsError, ValueError):
    pass


class DoubleDispatch(PhaseDvfsError, RuntimeError):
    pass


class EmptyBatch(PhaseDvfsError, ValueError):
    pass


class MissingBaseline(PhaseDvfsError, KeyError):
    pass


class ConfigError(PhaseDvfsError, ValueError):
    pass
