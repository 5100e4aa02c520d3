"""Null curves in the first layer's parameter space.

With the input x held fixed, the network becomes a map from the flattened
first-layer parameters ``theta = (A[0, :], A[1, :], ..., A[d1-1, :], b)``
(row-major weights, then bias) to the output. Pulling the output metric
back through that map and tracing its kernel moves the first-layer
weights without changing the network's output at x. Every later layer is
frozen.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .leaftrace import CurveTrace, TraceConfig, trace_map
from .pullback import KernelBasis, kernel_from_factor
from .smoothnet import (
    NetworkSpec,
    activate,
    activation_derivative,
    composite_jacobian,
    forward,
)

__all__ = [
    "WeightPoint",
    "WeightMap",
    "weight_jacobian",
    "weight_kernel",
    "trace_weight_class",
]


@dataclass(frozen=True, eq=False)
class WeightPoint:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        b = np.array(self.bias, dtype=float)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionMismatch(f"weights {w.shape} and bias {b.shape} are inconsistent")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.bias])

    @classmethod
    def from_flat(cls, theta, out_dim: int, in_dim: int) -> "WeightPoint":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (out_dim * (in_dim + 1),):
            raise DimensionMismatch(
                f"flat parameter vector has shape {theta.shape}, expected ({out_dim * (in_dim + 1)},)"
            )
        k = out_dim * in_dim
        return cls(theta[:k].reshape(out_dim, in_dim), theta[k:])

    @classmethod
    def from_network(cls, net: NetworkSpec) -> "WeightPoint":
        first = net.layers[0]
        return cls(first.weights, first.bias)


class WeightMap:
    """``theta -> 𝒩{theta}(x)`` for a fixed input x (tracer map protocol)."""

    def __init__(self, net: NetworkSpec, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (net.input_dim,):
            raise DimensionMismatch(f"x has shape {x.shape}, expected ({net.input_dim},)")
        self.net = net
        self.x = x
        self.d0, self.d1 = net.dims[0], net.dims[1]
        self.dim = self.d1 * (self.d0 + 1)
        self.metric_sqrt = net.metric_sqrt()
        self._act = net.layers[0].activation

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta has shape {theta.shape}, expected ({self.dim},)")
        k = self.d1 * self.d0
        return theta[:k].reshape(self.d1, self.d0), theta[k:]

    def first_layer(self, theta):
        a, b = self._split(theta)
        return activate(self._act, a @ self.x + b)

    def value(self, theta):
        y = self.first_layer(theta)
        if self.net.n_layers == 1:
            return y
        return forward(self.net, 2, self.net.n_layers, y)

    def jacobian(self, theta):
        a, b = self._split(theta)
        z = a @ self.x + b
        # d z_alpha / d A_{alpha beta} = x_beta, d z_alpha / d b_alpha = 1
        dz = np.zeros((self.d1, self.dim))
        for alpha in range(self.d1):
            dz[alpha, alpha * self.d0 : (alpha + 1) * self.d0] = self.x
            dz[alpha, self.d1 * self.d0 + alpha] = 1.0
        inner = activation_derivative(self._act, z)[:, None] * dz
        if self.net.n_layers == 1:
            return inner
        y = activate(self._act, z)
        return composite_jacobian(self.net, 2, self.net.n_layers, y) @ inner


def weight_jacobian(net: NetworkSpec, x, w: WeightPoint) -> np.ndarray:
    """d𝒩(x)/dtheta, shape ``(d_n, d1 * (d0 + 1))``."""
    wm = WeightMap(net, x)
    _check_point(wm, w)
    return wm.jacobian(w.flatten())


def weight_kernel(net: NetworkSpec, x, w: WeightPoint, tol: float | None = None) -> KernelBasis:
    """Orthonormal kernel of the pulled-back metric on the first-layer parameters."""
    wm = WeightMap(net, x)
    _check_point(wm, w)
    theta = w.flatten()
    return kernel_from_factor(wm.metric_sqrt @ wm.jacobian(theta), theta, tol)


def trace_weight_class(
    net: NetworkSpec, x, w: WeightPoint, coeffs, cfg: TraceConfig
) -> CurveTrace:
    """Null-curve trace in parameter space; vertices are flattened WeightPoints.

    ``coeffs`` (one per kernel basis vector) overrides ``cfg.kernel_coeffs``.
    """
    wm = WeightMap(net, x)
    _check_point(wm, w)
    if coeffs is not None:
        cfg = TraceConfig(**{**cfg.to_dict(), "kernel_coeffs": coeffs})
    return trace_map(wm, w.flatten(), cfg)


def _check_point(wm: WeightMap, w: WeightPoint) -> None:
    if w.weights.shape != (wm.d1, wm.d0):
        raise DimensionMismatch(
            f"weights have shape {w.weights.shape}, the network's first layer is ({wm.d1}, {wm.d0})"
        )
