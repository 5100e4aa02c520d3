"""Pullback of the output metric to an earlier manifold, its kernel, and
(pseudo)lengths of polylines measured with it.

The pullback at layer ``i`` is ``g_i = J^T g_n J`` where ``J`` is the
Jacobian of ``Λ_n ∘ ... ∘ Λ_{i+1}``. Rank and kernel are read off the SVD of
the factor ``S J`` (``S`` the symmetric square root of ``g_n``), which has
half the dynamic range of ``g_i`` itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionMismatch, EmptyCurve, InvalidRange
from .smoothnet import NetworkSpec, composite_jacobian, forward

__all__ = [
    "MetricTensor",
    "KernelBasis",
    "Polyline",
    "DistanceBound",
    "default_rank_tol",
    "pullback_factor",
    "pullback_metric",
    "kernel_basis",
    "kernel_from_factor",
    "orient",
    "seminorm",
    "pseudolength",
    "image_length",
    "pseudodistance_upper_bound",
]

_ORIENT_THRESHOLD = 1e-10


def default_rank_tol(dim: int) -> float:
    return dim * np.finfo(float).eps * 64


@dataclass(frozen=True, eq=False)
class MetricTensor:
    """Pulled-back (possibly degenerate) metric at a point.

    ``factor`` is ``S J``, so ``matrix == factor.T @ factor`` up to rounding.
    """

    point: np.ndarray
    matrix: np.ndarray
    rank: int
    tol_used: float
    singular_values: np.ndarray
    factor: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True, eq=False)
class KernelBasis:
    """Orthonormal columns spanning the null (vertical) space at ``point``."""

    point: np.ndarray
    vectors: np.ndarray
    rank: int
    singular_values: np.ndarray
    tol_used: float

    @property
    def r(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True, eq=False)
class Polyline:
    """Piecewise-linear curve, parameterized uniformly on [0, 1]."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2:
            raise DimensionMismatch(f"vertices must be a (k, d) array, got shape {v.shape}")
        if v.shape[0] < 2:
            raise EmptyCurve("a polyline needs at least two vertices")
        object.__setattr__(self, "vertices", v)

    @property
    def n_segments(self) -> int:
        return self.vertices.shape[0] - 1

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    def refine(self, factor: int = 2) -> "Polyline":
        """Split every segment into ``factor`` equal pieces (same geometric curve)."""
        v = self.vertices
        s = np.arange(factor)[:, None] / factor
        inner = v[:-1, None, :] + s[None] * (v[1:] - v[:-1])[:, None, :]
        return Polyline(np.vstack([inner.reshape(-1, v.shape[1]), v[-1:]]))

    def sample(self, per_segment: int) -> np.ndarray:
        """Points at parameters ``j / per_segment`` inside every segment, endpoints included."""
        return self.refine(per_segment).vertices


def _check_layer(net: NetworkSpec, at_layer: int) -> None:
    if not 0 <= at_layer <= net.n_layers:
        raise InvalidRange(f"at_layer must lie in 0..{net.n_layers}, got {at_layer}")


def pullback_factor(net: NetworkSpec, at_layer: int, x) -> np.ndarray:
    """``S J`` at x (or a batch of points), with J the Jacobian from M_at_layer to M_n."""
    _check_layer(net, at_layer)
    x = np.asarray(x, dtype=float)
    d = net.dims[at_layer]
    if x.ndim not in (1, 2) or x.shape[-1] != d:
        raise DimensionMismatch(f"point has shape {x.shape}, expected last dimension {d}")
    s = net.metric_sqrt()
    if at_layer == net.n_layers:
        return np.broadcast_to(s, x.shape[:-1] + s.shape).copy()
    return s @ composite_jacobian(net, at_layer + 1, net.n_layers, x)


def pullback_metric(net: NetworkSpec, at_layer: int, x, tol: float | None = None) -> MetricTensor:
    """``J^T g_n J`` at x on manifold ``M_at_layer``; rank by singular-value thresholding."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch("pullback_metric takes a single point")
    factor = pullback_factor(net, at_layer, x)
    if at_layer == net.n_layers:
        matrix = np.array(net.output_metric)
    else:
        jac = composite_jacobian(net, at_layer + 1, net.n_layers, x)
        matrix = jac.T @ net.output_metric @ jac
        matrix = 0.5 * (matrix + matrix.T)
    tol = default_rank_tol(x.size) if tol is None else tol
    s = np.linalg.svd(factor, compute_uv=False)
    rank = _rank(s, tol)
    return MetricTensor(x.copy(), matrix, rank, tol, s, factor)


def _rank(s: np.ndarray, tol: float) -> int:
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def orient(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so that its first clearly nonzero entry is positive."""
    out = np.array(vectors, dtype=float)
    for j in range(out.shape[1]):
        col = out[:, j]
        nz = np.flatnonzero(np.abs(col) > _ORIENT_THRESHOLD * max(np.linalg.norm(col), 1.0))
        if nz.size and col[nz[0]] < 0:
            out[:, j] = -col
    return out


def kernel_from_factor(factor: np.ndarray, point, tol: float | None = None) -> KernelBasis:
    """Null space of ``factor`` (m x d) from its full SVD."""
    point = np.asarray(point, dtype=float)
    d = factor.shape[1]
    tol = default_rank_tol(d) if tol is None else tol
    if not 0 < tol < 1:
        raise ValueError(f"tol must lie in (0, 1), got {tol}")
    _, s, vt = np.linalg.svd(factor, full_matrices=True)
    rank = _rank(s, tol)
    vectors = orient(vt[rank:].T)
    return KernelBasis(point.copy(), vectors, rank, s, tol)


def kernel_basis(net: NetworkSpec, at_layer: int, x, tol: float | None = None) -> KernelBasis:
    """Orthonormal basis of KER(g_at_layer) at x, deterministically oriented."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatch("kernel_basis takes a single point")
    return kernel_from_factor(pullback_factor(net, at_layer, x), x, tol)


def seminorm(metric: MetricTensor, v) -> float:
    """sqrt(g(v, v)), clamped at zero.

    Evaluated as ``|S J v|`` when the factor is known, which keeps null
    vectors at round-off level instead of the square root of round-off.
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (metric.dim,):
        raise DimensionMismatch(f"vector has shape {v.shape}, expected ({metric.dim},)")
    if metric.factor is not None:
        return float(np.linalg.norm(metric.factor @ v))
    return float(np.sqrt(max(v @ metric.matrix @ v, 0.0)))


def pseudolength(net: NetworkSpec, at_layer: int, curve, quad_points: int = 16) -> float:
    """Length of a polyline in M_at_layer under the pulled-back metric.

    Midpoint rule with ``quad_points`` nodes per segment. Non-negative and
    additive over concatenation of polylines.
    """
    if quad_points < 1:
        raise ValueError("quad_points must be >= 1")
    curve = curve if isinstance(curve, Polyline) else Polyline(curve)
    if curve.dim != net.dims[at_layer]:
        raise DimensionMismatch(
            f"curve lives in dimension {curve.dim}, layer {at_layer} has dimension {net.dims[at_layer]}"
        )
    v = curve.vertices
    deltas = v[1:] - v[:-1]
    s = (np.arange(quad_points) + 0.5) / quad_points
    nodes = v[:-1, None, :] + s[None, :, None] * deltas[:, None, :]
    factor = pullback_factor(net, at_layer, nodes.reshape(-1, curve.dim))
    factor = factor.reshape(deltas.shape[0], quad_points, *factor.shape[1:])
    speeds = np.linalg.norm(np.einsum("kqij,kj->kqi", factor, deltas), axis=-1)
    return float(speeds.mean(axis=1).sum())


def image_length(net: NetworkSpec, layer: int, curve, quad_points: int = 64) -> float:
    """Length in M_layer of the image under ``Λ_layer ∘ ... ∘ Λ_1`` of a curve in M_0.

    The image curve is sampled at ``quad_points`` sub-intervals per segment
    and the resulting polyline is measured with the layer's own metric
    (midpoint rule). For ``layer == n`` this is the plain g_n chord length.
    """
    curve = curve if isinstance(curve, Polyline) else Polyline(curve)
    if curve.dim != net.input_dim:
        raise DimensionMismatch("image_length expects a curve in the input manifold")
    pts = curve.sample(quad_points)
    if layer > 0:
        pts = forward(net, 1, layer, pts)
    return pseudolength(net, layer, Polyline(pts), quad_points=1)


class DistanceBound(NamedTuple):
    bound: float
    straight: float
    converged: bool
    segments: int
    iterations: int


def _energy(net, S, pts, reg):
    m = pts.shape[0] - 1
    out = forward(net, 1, net.n_layers, pts) @ S.T
    d_out = np.diff(out, axis=0)
    d_in = np.diff(pts, axis=0)
    return m * (np.sum(d_out**2) + reg * np.sum(d_in**2)), out


def _energy_grad(net, S, pts, out, reg):
    m = pts.shape[0] - 1
    jac = S @ composite_jacobian(net, 1, net.n_layers, pts[1:-1])
    lap_out = 2 * out[1:-1] - out[:-2] - out[2:]
    lap_in = 2 * pts[1:-1] - pts[:-2] - pts[2:]
    g = np.einsum("kij,ki->kj", jac, lap_out) + reg * lap_in
    return 2 * m * g


def _descend(net, S, pts, iters, step, reg, gtol):
    energy, out = _energy(net, S, pts, reg)
    t = step
    for it in range(iters):
        grad = _energy_grad(net, S, pts, out, reg)
        gnorm = np.linalg.norm(grad)
        if gnorm <= gtol:
            return pts, True, it
        while True:
            trial = pts.copy()
            trial[1:-1] -= t * grad
            e_new, out_new = _energy(net, S, trial, reg)
            if e_new < energy:
                break
            t *= 0.5
            if t < 1e-14 * step:
                return pts, True, it
        if energy - e_new <= 1e-15 * max(energy, 1e-300):
            return trial, True, it + 1
        pts, energy, out = trial, e_new, out_new
        t = min(2 * t, step)
    return pts, False, iters


def pseudodistance_upper_bound(
    net: NetworkSpec,
    x,
    y,
    segments: int = 32,
    descent_iters: int = 200,
    step: float = 0.05,
    quad_points: int = 16,
    reg: float = 1e-3,
) -> DistanceBound:
    """Upper bound on the pseudodistance between x and y in M_0.

    Coarse-to-fine: starting from the straight segment, the polyline is
    refined by halving segments up to ``segments`` and, at each level, the
    interior vertices descend the discrete energy
    ``m * sum |S(N(p_{k+1}) - N(p_k))|^2 + reg * m * sum |p_{k+1} - p_k|^2``.
    The returned bound is the smallest pseudolength seen at any level, so a
    finer schedule never returns a larger value. It is a bound, not the
    infimum. ``converged`` is False if some level exhausted ``descent_iters``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d0 = net.input_dim
    if x.shape != (d0,) or y.shape != (d0,):
        raise DimensionMismatch(f"x and y must have shape ({d0},)")
    if segments < 1:
        raise ValueError("segments must be >= 1")
    line = Polyline(np.stack([x, y]))
    straight = pseudolength(net, 0, line, quad_points)
    best = straight
    levels = [segments]
    while levels[-1] % 2 == 0 and levels[-1] > 1:
        levels.append(levels[-1] // 2)
    levels.reverse()
    S = net.metric_sqrt()
    curve = line.refine(levels[0]) if levels[0] > 1 else line
    converged = True
    total = 0
    for i, m in enumerate(levels):
        if i > 0:
            curve = curve.refine(2)
        if m > 1 and descent_iters > 0:
            pts, ok, used = _descend(net, S, curve.vertices.copy(), descent_iters, step, reg, 1e-12)
            curve = Polyline(pts)
            converged &= ok
            total += used
        best = min(best, pseudolength(net, 0, curve, quad_points))
    return DistanceBound(max(best, 0.0), straight, converged, segments, total)
