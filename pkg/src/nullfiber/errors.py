"""Exception hierarchy shared by every module."""


class NullFiberError(Exception):
    """Base class for all library errors."""


class SpecError(NullFiberError, ValueError):
    """A network description violates the JSON schema or a structural invariant."""


class DimensionMismatch(NullFiberError, ValueError):
    pass


class InvalidRange(NullFiberError, ValueError):
    pass


class NonSPDOutputMetric(SpecError):
    pass


class _TraceAbort(NullFiberError):
    # ``partial`` is set to the CurveTrace accumulated before the failure when
    # the error escapes from a tracer.
    partial = None


class EmptyKernel(_TraceAbort):
    """The metric is non-degenerate at the point, so there is no null direction."""


class AmbiguousDirection(NullFiberError, ValueError):
    """Kernel has dimension > 1 and no combination coefficients were supplied."""


class StepRejected(_TraceAbort):
    """A tracing step was aborted (rank transition or failed correction)."""


class EmptyCurve(NullFiberError, ValueError):
    pass
