"""Singular pullback metrics of smooth networks and the equivalence classes
(fibers) they induce on input space and first-layer weight space."""
from importlib import resources

from .errors import (
    AmbiguousDirection,
    DimensionMismatch,
    EmptyCurve,
    EmptyKernel,
    InvalidRange,
    NonSPDOutputMetric,
    NullFiberError,
    SpecError,
    StepRejected,
)
from .leaftrace import (
    CurveTrace,
    FiberCertificate,
    TraceConfig,
    Verdict,
    null_direction,
    project_to_fiber,
    rk4_null_step,
    same_class_certificate,
    trace_leaf,
)
from .pullback import (
    KernelBasis,
    MetricTensor,
    Polyline,
    image_length,
    kernel_basis,
    pseudodistance_upper_bound,
    pseudolength,
    pullback_metric,
    seminorm,
)
from .smoothnet import (
    Activation,
    NetworkSpec,
    SmoothLayer,
    check_full_rank,
    composite_jacobian,
    finite_diff_jacobian,
    forward,
    layer_jacobian,
    load_network,
    network_from_dict,
    network_to_dict,
    random_network,
)
from .weightspace import WeightPoint, trace_weight_class, weight_jacobian, weight_kernel

__version__ = "0.1.0"


def fixture_path(name: str):
    """Path of a bundled network JSON (``linear_kernel``, ``level_curves``, ``weight_space``)."""
    return resources.files(__name__) / "fixtures" / f"{name}.json"


def load_fixture(name: str) -> NetworkSpec:
    return load_network(fixture_path(name))
