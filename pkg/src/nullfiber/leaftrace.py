"""Null-curve tracing: predictor-corrector continuation along KER(g_0).

Each step takes one classical RK4 step along a unit kernel direction and
then pulls the predicted point back onto the starting fiber
``𝒩^{-1}(𝒩(p))`` with minimum-norm Gauss-Newton iterations.

Kernel bases are only defined up to an orthogonal change of basis, so the
basis at a new point is aligned to the previous one by orthogonal
Procrustes (a plain sign flip when the kernel is one-dimensional). A fixed
coefficient vector in the aligned basis selects the direction when the
kernel has dimension > 1.

The tracer works on any object with ``dim``, ``value(x)``, ``jacobian(x)``
and ``metric_sqrt``; ``NetworkMap`` adapts a NetworkSpec, and
``nullfiber.weightspace`` supplies the first-layer parameter map.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import AmbiguousDirection, DimensionMismatch, EmptyKernel, StepRejected
from .pullback import KernelBasis, default_rank_tol, kernel_from_factor
from .smoothnet import NetworkSpec, composite_jacobian, forward

__all__ = [
    "TraceConfig",
    "CurveTrace",
    "Projection",
    "Verdict",
    "FiberCertificate",
    "NetworkMap",
    "null_direction",
    "rk4_null_step",
    "project_to_fiber",
    "trace_leaf",
    "trace_map",
    "same_class_certificate",
]


class NetworkMap:
    """The full network ``M_0 -> M_n`` seen through the tracer's map protocol."""

    def __init__(self, net: NetworkSpec):
        self.net = net
        self.dim = net.input_dim
        self.metric_sqrt = net.metric_sqrt()

    def value(self, x):
        return forward(self.net, 1, self.net.n_layers, x)

    def jacobian(self, x):
        return composite_jacobian(self.net, 1, self.net.n_layers, x)


def _as_map(obj):
    return NetworkMap(obj) if isinstance(obj, NetworkSpec) else obj


@dataclass(frozen=True)
class TraceConfig:
    step_size: float = 0.01
    n_steps: int = 100
    corrector_tol: float = 1e-10
    corrector_max_iters: int = 20
    seed_direction: tuple | None = None
    kernel_coeffs: tuple | None = None
    rank_tol: float | None = None

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if not self.corrector_tol > 0:
            raise ValueError(f"corrector_tol must be positive, got {self.corrector_tol}")
        if self.corrector_max_iters < 0:
            raise ValueError("corrector_max_iters must be >= 0")
        for name in ("seed_direction", "kernel_coeffs"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(c) for c in np.ravel(v)))

    def to_dict(self) -> dict:
        return {
            "step_size": self.step_size,
            "n_steps": self.n_steps,
            "corrector_tol": self.corrector_tol,
            "corrector_max_iters": self.corrector_max_iters,
            "seed_direction": None if self.seed_direction is None else list(self.seed_direction),
            "kernel_coeffs": None if self.kernel_coeffs is None else list(self.kernel_coeffs),
            "rank_tol": self.rank_tol,
        }


@dataclass(eq=False)
class CurveTrace:
    """Polyline produced by a tracer, with per-vertex outputs and fiber drift.

    ``drift[k]`` is ``|𝒩(vertices[k]) - 𝒩(vertices[0])|`` in the output metric.
    ``last_direction`` is the (aligned, unsigned) field direction at the last
    vertex; pass it as ``seed_direction`` to continue or reverse a trace.
    """

    vertices: np.ndarray
    outputs: np.ndarray
    drift: np.ndarray
    step_size: float
    corrector_iterations: np.ndarray
    kernel_dim: int
    pseudolength_estimate: float = 0.0
    last_direction: np.ndarray | None = None
    truncated: bool = False
    message: str = ""

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def params(self) -> np.ndarray:
        return np.arange(self.n_vertices) * self.step_size

    @property
    def max_drift(self) -> float:
        return float(np.max(self.drift)) if self.drift.size else 0.0


class Projection(NamedTuple):
    point: np.ndarray
    converged: bool
    iterations: int
    residual: float


# --- kernel field -------------------------------------------------------------


def _kernel(fmap, x, tol) -> KernelBasis:
    return kernel_from_factor(fmap.metric_sqrt @ fmap.jacobian(x), x, tol)


def _procrustes(basis: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Rotate ``basis`` (d x r) within its span to best match ``ref`` (d x r)."""
    u, _, wt = np.linalg.svd(basis.T @ ref)
    return basis @ (u @ wt)


def _align(basis: np.ndarray, ref) -> np.ndarray:
    if ref is None:
        return basis
    ref = np.asarray(ref, dtype=float)
    if ref.ndim == 1:
        ref = ref[:, None]
    if ref.shape[1] != basis.shape[1]:
        return basis
    if basis.shape[1] == 1:
        return -basis if float(basis[:, 0] @ ref[:, 0]) < 0 else basis
    return _procrustes(basis, ref)


def _combine(basis: np.ndarray, coeffs) -> np.ndarray:
    r = basis.shape[1]
    if coeffs is None:
        if r > 1:
            raise AmbiguousDirection(
                f"kernel has dimension {r}; supply {r} combination coefficients"
            )
        return basis[:, 0].copy()
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (r,):
        raise DimensionMismatch(f"expected {r} kernel coefficients, got {coeffs.size}")
    v = basis @ coeffs
    n = np.linalg.norm(v)
    # all-zero coefficients select the stationary field
    return v / n if n > 0 else v


class _Field:
    """Aligned unit null-vector field of a map, with a fixed kernel dimension."""

    def __init__(self, fmap, coeffs=None, tol=None, r=None):
        self.fmap = fmap
        self.coeffs = coeffs
        self.tol = tol
        self.r = r

    def basis(self, x, ref=None) -> np.ndarray:
        kb = _kernel(self.fmap, x, self.tol)
        if kb.r == 0:
            raise EmptyKernel(f"metric has full rank {kb.rank} at {np.array2string(x, precision=6)}")
        if self.r is None:
            self.r = kb.r
        elif kb.r != self.r:
            raise StepRejected(f"kernel dimension changed from {self.r} to {kb.r} (rank transition)")
        return _align(kb.vectors, ref)

    def direction(self, basis) -> np.ndarray:
        return _combine(basis, self.coeffs)


def null_direction(net, x, prev=None, coeffs=None, tol: float | None = None) -> np.ndarray:
    """Unit vector in KER(g_0) at x.

    ``prev`` may be a previous direction (the result is sign-aligned with it)
    or a previous d x r basis (the new basis is Procrustes-aligned to it
    before combining with ``coeffs``). Without ``prev`` the deterministic
    orientation of ``kernel_basis`` is used. Zero ``coeffs`` give the zero
    vector.
    """
    fmap = _as_map(net)
    x = np.asarray(x, dtype=float)
    if x.shape != (fmap.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({fmap.dim},)")
    fld = _Field(fmap, coeffs, tol)
    prev_arr = None if prev is None else np.asarray(prev, dtype=float)
    basis = fld.basis(x, prev_arr if prev_arr is not None and prev_arr.ndim == 2 else None)
    if prev_arr is not None and prev_arr.ndim == 1 and basis.shape[1] == 1:
        basis = _align(basis, prev_arr)
    v = fld.direction(basis)
    if prev_arr is not None and prev_arr.ndim == 1 and float(v @ prev_arr) < 0:
        v = -v
    return v


def _rk4(fld: _Field, x, h, ref):
    b1 = fld.basis(x, ref)
    k1 = fld.direction(b1)
    k2 = fld.direction(fld.basis(x + 0.5 * h * k1, b1))
    k3 = fld.direction(fld.basis(x + 0.5 * h * k2, b1))
    k4 = fld.direction(fld.basis(x + h * k3, b1))
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), b1


def rk4_null_step(net, x, h: float, prev=None, coeffs=None, tol: float | None = None) -> np.ndarray:
    """One RK4 step of size h along the aligned null field; stages are aligned to the basis at x."""
    fmap = _as_map(net)
    x = np.asarray(x, dtype=float)
    if x.shape != (fmap.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({fmap.dim},)")
    if h == 0:
        return x.copy()
    fld = _Field(fmap, coeffs, tol)
    ref = None if prev is None else np.asarray(prev, dtype=float)
    x_new, _ = _rk4(fld, x, h, ref)
    return x_new


# --- corrector ----------------------------------------------------------------


def project_to_fiber(net, x, target, tol: float = 1e-10, max_iters: int = 20) -> Projection:
    """Gauss-Newton projection onto ``{x : 𝒩(x) = target}``.

    Iterates ``x <- x - (S J)^+ S (𝒩(x) - target)`` with the minimum-norm
    pseudoinverse (so the update is orthogonal to the kernel), halving the
    step when the residual would grow. Returns the best iterate and whether
    ``|𝒩(x) - target|_g <= tol`` was reached.
    """
    fmap = _as_map(net)
    x = np.array(x, dtype=float)
    target = np.asarray(target, dtype=float)
    S = fmap.metric_sqrt
    if x.shape != (fmap.dim,):
        raise DimensionMismatch(f"x has shape {x.shape}, expected ({fmap.dim},)")
    if target.shape != (S.shape[0],):
        raise DimensionMismatch(f"target has shape {target.shape}, expected ({S.shape[0]},)")
    rcond = default_rank_tol(fmap.dim)
    res = S @ (fmap.value(x) - target)
    rnorm = float(np.linalg.norm(res))
    it = 0
    while rnorm > tol and it < max_iters:
        it += 1
        factor = S @ fmap.jacobian(x)
        delta = np.linalg.lstsq(factor, res, rcond=rcond)[0]
        t = 1.0
        for _ in range(30):
            trial = x - t * delta
            with np.errstate(over="ignore", invalid="ignore"):
                res_t = S @ (fmap.value(trial) - target)
            rn = float(np.linalg.norm(res_t))
            if np.isfinite(rn) and rn < rnorm:
                break
            t *= 0.5
        else:
            break
        x, res, rnorm = trial, res_t, rn
    return Projection(x, rnorm <= tol, it, rnorm)


# --- tracing ------------------------------------------------------------------


def _segment_lengths(fmap, vertices) -> float:
    if vertices.shape[0] < 2:
        return 0.0
    mids = 0.5 * (vertices[1:] + vertices[:-1])
    deltas = np.diff(vertices, axis=0)
    total = 0.0
    for m, d in zip(mids, deltas):
        total += float(np.linalg.norm(fmap.metric_sqrt @ (fmap.jacobian(m) @ d)))
    return total


def trace_map(fmap, p, cfg: TraceConfig) -> CurveTrace:
    """Predictor-corrector null-curve trace of an arbitrary map (see module docstring)."""
    p = np.asarray(p, dtype=float)
    if p.shape != (fmap.dim,):
        raise DimensionMismatch(f"start point has shape {p.shape}, expected ({fmap.dim},)")
    S = fmap.metric_sqrt
    target = fmap.value(p)
    steps = abs(int(cfg.n_steps))
    h = cfg.step_size if cfg.n_steps >= 0 else -cfg.step_size

    vertices = [p.copy()]
    outputs = [target]
    drift = [0.0]
    iters = [0]
    fld = _Field(fmap, cfg.kernel_coeffs, cfg.rank_tol)

    def build(truncated=False, message="", last=None):
        v = np.array(vertices)
        return CurveTrace(
            vertices=v,
            outputs=np.array(outputs),
            drift=np.array(drift),
            step_size=h,
            corrector_iterations=np.array(iters, dtype=int),
            kernel_dim=fld.r or 0,
            pseudolength_estimate=_segment_lengths(fmap, v),
            last_direction=last,
            truncated=truncated,
            message=message,
        )

    if steps == 0:
        return build()

    try:
        seed = None if cfg.seed_direction is None else np.asarray(cfg.seed_direction, dtype=float)
        if seed is not None and seed.shape != (fmap.dim,):
            raise DimensionMismatch(f"seed_direction must have length {fmap.dim}")
        ref = fld.basis(p)
        if seed is not None:
            if fld.r == 1:
                ref = _align(ref, seed)
            elif fld.coeffs is None:
                fld.coeffs = ref.T @ seed
        x = p
        for _ in range(steps):
            x_pred, ref = _rk4(fld, x, h, ref)
            proj = project_to_fiber(fmap, x_pred, target, cfg.corrector_tol, cfg.corrector_max_iters)
            if not proj.converged:
                raise StepRejected(
                    f"corrector did not reach tol {cfg.corrector_tol:g} "
                    f"(residual {proj.residual:.3g} after {proj.iterations} iterations)"
                )
            x = proj.point
            out = fmap.value(x)
            vertices.append(x)
            outputs.append(out)
            drift.append(float(np.linalg.norm(S @ (out - target))))
            iters.append(proj.iterations)
        last = fld.direction(fld.basis(x, ref))
    except (EmptyKernel, StepRejected) as exc:
        exc.partial = build(truncated=True, message=str(exc))
        raise
    return build(last=last)


def trace_leaf(net: NetworkSpec, p, cfg: TraceConfig) -> CurveTrace:
    """Trace the equivalence class of p in M_0 for ``|cfg.n_steps|`` steps.

    Negative ``n_steps`` walks the opposite way. On EmptyKernel or
    StepRejected the exception carries the partial trace in ``.partial``.
    """
    return trace_map(NetworkMap(net), p, cfg)


# --- certificates -------------------------------------------------------------


class Verdict(str, enum.Enum):
    DIFFERENT_FIBER = "DifferentFiber"
    CONNECTED = "Connected"
    SAME_FIBER_UNKNOWN = "SameFiberUnknown"


@dataclass(eq=False)
class FiberCertificate:
    verdict: Verdict
    output_mismatch: float
    evidence: CurveTrace | None = None
    distance: float = float("nan")
    details: dict = field(default_factory=dict)


def same_class_certificate(
    net: NetworkSpec,
    x,
    y,
    cfg: TraceConfig,
    out_tol: float = 1e-8,
    space_tol: float = 1e-6,
    patience: int = 25,
) -> FiberCertificate:
    """Decide whether x and y lie in the same equivalence class.

    Different outputs prove different classes. Otherwise a greedy trace from
    x steps along the kernel projection of ``y - x_k`` (length capped at
    ``cfg.step_size``), re-projecting onto x's fiber after every step, for
    at most ``|cfg.n_steps|`` steps. Reaching y within ``space_tol`` proves
    connection; running out of budget or progress proves nothing.
    """
    fmap = NetworkMap(net)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (fmap.dim,) or y.shape != (fmap.dim,):
        raise DimensionMismatch(f"x and y must have shape ({fmap.dim},)")
    S = fmap.metric_sqrt
    target = fmap.value(x)
    mismatch = float(np.linalg.norm(S @ (target - fmap.value(y))))
    if mismatch > out_tol:
        return FiberCertificate(Verdict.DIFFERENT_FIBER, mismatch, None, float(np.linalg.norm(y - x)))

    vertices, outputs, drift, iters = [x.copy()], [target], [0.0], [0]
    cur = x.copy()
    dist = float(np.linalg.norm(y - cur))
    best, stale = dist, 0
    reason = "step budget exhausted"
    for _ in range(abs(int(cfg.n_steps))):
        if dist <= space_tol:
            break
        kb = _kernel(fmap, cur, cfg.rank_tol)
        if kb.r == 0:
            reason = "kernel vanished"
            break
        g = y - cur
        proj = kb.vectors @ (kb.vectors.T @ g)
        pn = float(np.linalg.norm(proj))
        if pn <= 1e-14 * max(1.0, dist):
            reason = "target direction orthogonal to the kernel"
            break
        step = proj * min(1.0, cfg.step_size / pn)
        pr = project_to_fiber(fmap, cur + step, target, cfg.corrector_tol, cfg.corrector_max_iters)
        if not pr.converged:
            reason = "corrector failed"
            break
        cur = pr.point
        out = fmap.value(cur)
        vertices.append(cur)
        outputs.append(out)
        drift.append(float(np.linalg.norm(S @ (out - target))))
        iters.append(pr.iterations)
        dist = float(np.linalg.norm(y - cur))
        if dist < best * (1 - 1e-9):
            best, stale = dist, 0
        else:
            stale += 1
            if stale >= patience:
                reason = "no progress toward y"
                break

    v = np.array(vertices)
    trace = CurveTrace(
        vertices=v,
        outputs=np.array(outputs),
        drift=np.array(drift),
        step_size=cfg.step_size,
        corrector_iterations=np.array(iters, dtype=int),
        kernel_dim=_kernel(fmap, x, cfg.rank_tol).r,
        pseudolength_estimate=_segment_lengths(fmap, v),
    )
    if dist <= space_tol:
        return FiberCertificate(Verdict.CONNECTED, mismatch, trace, dist)
    return FiberCertificate(Verdict.SAME_FIBER_UNKNOWN, mismatch, trace, dist, {"reason": reason})
