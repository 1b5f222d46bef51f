class LyapunovLabError(Exception):
    """
    Base class for every error raised by the lab.
    """


class ImproperlyConfigured(LyapunovLabError):
    """
    A configuration value, chain declaration or setting is invalid.

    Args:
        message: What is wrong.
        field: Optional dotted path of the offending field (e.g. "chain.N").
    """

    def __init__(self, message, *, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class JetOverflow(LyapunovLabError):
    """
    A Taylor coefficient left the floating-point range.
    """


class CalibrationFailed(LyapunovLabError):
    """
    Coefficient calibration ran out of rounds without passing.
    """

    def __init__(self, message, *, report=None, worst_state=None):
        self.report = report
        self.worst_state = worst_state
        super().__init__(message)


class EnvelopeDegenerate(LyapunovLabError):
    """
    The sampled lower envelope vanished at an energy level.
    """

    def __init__(self, level):
        self.level = level
        super().__init__(f"Lie-derivative envelope degenerates at level w={level!r}")


class NoConvergence(LyapunovLabError):
    """
    A root search found nothing within its budget.
    """


class ThresholdViolation(LyapunovLabError):
    """
    A state outside the certified box showed no finite order below the threshold.
    """

    def __init__(self, message, *, state=None, order=None):
        self.state = state
        self.order = order
        super().__init__(message)


class StepUnderflow(LyapunovLabError):
    """
    The adaptive integrator's step collapsed.
    """


class WindowEmpty(LyapunovLabError):
    """
    The energy decay window is empty for the given energy.
    """

    def __init__(self, H0, t_lo, t_hi):
        self.H0 = H0
        self.t_lo = t_lo
        self.t_hi = t_hi
        super().__init__(f"Empty decay window for H0={H0!r}: [{t_lo!r}, {t_hi!r}]")
