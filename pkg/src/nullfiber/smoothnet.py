"""Smooth fully-connected networks as sequences of maps between Euclidean manifolds.

A layer is ``x -> F(A x + b)`` where ``F`` acts componentwise and is a
diffeomorphism of the real line onto its image. Layers are indexed from 1,
so layer ``i`` maps ``M_{i-1}`` (dimension ``dims[i-1]``) into ``M_i``.

All array-valued functions accept either a single point of shape ``(d,)``
or a batch of shape ``(m, d)``; the batch form is used internally by the
quadrature routines.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InvalidRange, NonSPDOutputMetric, SpecError

__all__ = [
    "Activation",
    "SmoothLayer",
    "NetworkSpec",
    "LayerRankReport",
    "activate",
    "activation_derivative",
    "forward",
    "forward_all",
    "layer_jacobian",
    "composite_jacobian",
    "finite_diff_jacobian",
    "check_full_rank",
    "network_from_dict",
    "network_to_dict",
    "load_network",
    "random_network",
]


class Activation(str, enum.Enum):
    IDENTITY = "identity"
    SIGMOID = "sigmoid"
    SOFTPLUS = "softplus"
    TANH = "tanh"


def _sigmoid(z):
    # exp is only ever taken of a non-positive argument
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def activate(kind: Activation, z):
    """Apply the activation componentwise, overflow-free for large |z|."""
    kind = Activation(kind)
    z = np.asarray(z, dtype=float)
    if kind is Activation.IDENTITY:
        return z.copy()
    if kind is Activation.SIGMOID:
        return _sigmoid(z)
    if kind is Activation.SOFTPLUS:
        # ln(1 + e^z), positive-exponent convention
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    if kind is Activation.TANH:
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def activation_derivative(kind: Activation, z):
    """Componentwise derivative F'(z); strictly positive wherever it is representable."""
    kind = Activation(kind)
    z = np.asarray(z, dtype=float)
    if kind is Activation.IDENTITY:
        return np.ones_like(z)
    if kind is Activation.SIGMOID:
        return _sigmoid(z) * _sigmoid(-z)
    if kind is Activation.SOFTPLUS:
        return _sigmoid(z)
    if kind is Activation.TANH:
        # sech^2 written with e^{-2|z|} so it does not round to 0 like 1 - tanh^2
        e = np.exp(-2.0 * np.abs(z))
        return 4.0 * e / (1.0 + e) ** 2
    raise ValueError(f"unknown activation {kind!r}")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SmoothLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: Activation = Activation.IDENTITY

    def __post_init__(self):
        w = _frozen(self.weights)
        b = _frozen(self.bias)
        if w.ndim != 2:
            raise SpecError(f"weights must be a 2-D matrix, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise SpecError(
                f"bias has shape {b.shape}, expected ({w.shape[0]},) to match the weight rows"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise SpecError("weights and bias must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def preactivation(self, x):
        return x @ self.weights.T + self.bias

    def __call__(self, x):
        return activate(self.activation, self.preactivation(x))

    def is_full_rank(self, tol: float | None = None) -> bool:
        return check_full_rank_layer(self, tol).passed


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """Ordered smooth layers plus a constant SPD metric on the output space."""

    layers: tuple
    output_metric: np.ndarray | None = None
    dims: tuple = field(init=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise SpecError("a network needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise SpecError(
                    f"layers[{i}] expects input dimension {layers[i].in_dim} "
                    f"but layers[{i - 1}] produces {layers[i - 1].out_dim}"
                )
        d_out = layers[-1].out_dim
        g = np.eye(d_out) if self.output_metric is None else np.array(self.output_metric, dtype=float)
        if g.shape != (d_out, d_out):
            raise SpecError(f"output_metric has shape {g.shape}, expected ({d_out}, {d_out})")
        if not np.all(np.isfinite(g)):
            raise NonSPDOutputMetric("output_metric must be finite")
        if np.max(np.abs(g - g.T)) > 1e-12:
            raise NonSPDOutputMetric("output_metric is not symmetric within 1e-12")
        g = 0.5 * (g + g.T)
        eig = np.linalg.eigvalsh(g)
        if eig[0] <= 0:
            raise NonSPDOutputMetric(
                f"output_metric is not positive definite (smallest eigenvalue {eig[0]:.3g})"
            )
        g.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "output_metric", g)
        object.__setattr__(self, "dims", (layers[0].in_dim,) + tuple(l.out_dim for l in layers))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def output_dim(self) -> int:
        return self.dims[-1]

    def metric_sqrt(self) -> np.ndarray:
        """Symmetric square root S of the output metric (S @ S == output_metric)."""
        w, v = np.linalg.eigh(self.output_metric)
        return (v * np.sqrt(w)) @ v.T

    def __call__(self, x):
        return forward(self, 1, self.n_layers, x)


def _check_range(net: NetworkSpec, from_layer: int, to_layer: int) -> None:
    n = net.n_layers
    if not (1 <= from_layer <= n and 1 <= to_layer <= n):
        raise InvalidRange(f"layer indices must lie in 1..{n}, got {from_layer}..{to_layer}")
    if from_layer > to_layer:
        raise InvalidRange(f"from_layer {from_layer} is after to_layer {to_layer}")


def _as_input(x, dim: int, what: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim not in (1, 2) or x.shape[-1] != dim:
        raise DimensionMismatch(f"{what} has shape {x.shape}, expected last dimension {dim}")
    return x


def forward(net: NetworkSpec, from_layer: int, to_layer: int, x) -> np.ndarray:
    """Evaluate ``Λ_to ∘ ... ∘ Λ_from`` at ``x``."""
    _check_range(net, from_layer, to_layer)
    y = _as_input(x, net.dims[from_layer - 1])
    for layer in net.layers[from_layer - 1 : to_layer]:
        y = layer(y)
    return y


def forward_all(net: NetworkSpec, x) -> list[np.ndarray]:
    """Return ``[x, Λ_1(x), Λ_2(Λ_1(x)), ..., 𝒩(x)]``."""
    y = _as_input(x, net.input_dim)
    out = [y]
    for layer in net.layers:
        y = layer(y)
        out.append(y)
    return out


def layer_jacobian(layer: SmoothLayer, x) -> np.ndarray:
    """diag(F'(Ax + b)) A, evaluated at x (batched over leading axes)."""
    x = _as_input(x, layer.in_dim)
    dz = activation_derivative(layer.activation, layer.preactivation(x))
    return dz[..., :, None] * layer.weights


def composite_jacobian(net: NetworkSpec, from_layer: int, to_layer: int, x) -> np.ndarray:
    """Jacobian of ``Λ_to ∘ ... ∘ Λ_from`` at x: product of layer Jacobians
    evaluated along the forward trajectory."""
    _check_range(net, from_layer, to_layer)
    y = _as_input(x, net.dims[from_layer - 1])
    jac = None
    for layer in net.layers[from_layer - 1 : to_layer]:
        lj = layer_jacobian(layer, y)
        jac = lj if jac is None else lj @ jac
        y = layer(y)
    return jac


def finite_diff_jacobian(net: NetworkSpec, from_layer: int, to_layer: int, x, eps: float = 1e-5):
    """Central-difference Jacobian; truncation error is O(eps**2).

    Verification oracle only. Single point input.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    _check_range(net, from_layer, to_layer)
    x = _as_input(x, net.dims[from_layer - 1])
    if x.ndim != 1:
        raise DimensionMismatch("finite_diff_jacobian takes a single point")
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps
        hi = forward(net, from_layer, to_layer, x + e)
        lo = forward(net, from_layer, to_layer, x - e)
        cols.append((hi - lo) / (2 * eps))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class LayerRankReport:
    index: int
    rank: int
    expected_rank: int
    smallest_singular_value: float
    singular_values: tuple
    passed: bool


def check_full_rank_layer(layer: SmoothLayer, tol: float | None = None, index: int = 0):
    w = layer.weights
    s = np.linalg.svd(w, compute_uv=False)
    if tol is None:
        tol = max(w.shape) * np.finfo(float).eps
    if tol < 0:
        raise ValueError("tol must be non-negative")
    smax = s[0] if s.size else 0.0
    rank = int(np.sum(s > tol * smax)) if smax > 0 else 0
    expected = min(w.shape)
    return LayerRankReport(
        index=index,
        rank=rank,
        expected_rank=expected,
        smallest_singular_value=float(s[-1]) if s.size else 0.0,
        singular_values=tuple(float(v) for v in s),
        passed=rank == expected,
    )


def check_full_rank(net: NetworkSpec, tol: float | None = None) -> list[LayerRankReport]:
    """Per-layer weight-matrix rank report.

    A singular value counts toward the rank iff it exceeds ``tol * sigma_max``;
    the default ``tol`` is ``max(shape) * machine epsilon``.
    """
    return [check_full_rank_layer(layer, tol, i) for i, layer in enumerate(net.layers, start=1)]


# --- JSON ----------------------------------------------------------------------


def _number_matrix(obj, path: str) -> np.ndarray:
    if not isinstance(obj, list) or not obj:
        raise SpecError(f"{path}: expected a non-empty array of rows")
    width = None
    for r, row in enumerate(obj):
        if not isinstance(row, list) or not row:
            raise SpecError(f"{path}[{r}]: expected a non-empty array of numbers")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise SpecError(f"{path}[{r}]: row has {len(row)} entries, expected {width}")
        for c, v in enumerate(row):
            _check_number(v, f"{path}[{r}][{c}]")
    return np.array(obj, dtype=float)


def _number_vector(obj, path: str) -> np.ndarray:
    if not isinstance(obj, list):
        raise SpecError(f"{path}: expected an array of numbers")
    for i, v in enumerate(obj):
        _check_number(v, f"{path}[{i}]")
    return np.array(obj, dtype=float)


def _check_number(v, path: str) -> None:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SpecError(f"{path}: expected a number, got {type(v).__name__}")
    if not np.isfinite(v):
        raise SpecError(f"{path}: must be finite")


def network_from_dict(obj) -> NetworkSpec:
    """Build a NetworkSpec from the parsed JSON object; errors name the offending field."""
    if not isinstance(obj, dict):
        raise SpecError("top level: expected an object with a 'layers' array")
    unknown = set(obj) - {"layers", "output_metric"}
    if unknown:
        raise SpecError(f"top level: unknown field(s) {sorted(unknown)}")
    if "layers" not in obj:
        raise SpecError("top level: missing required field 'layers'")
    raw = obj["layers"]
    if not isinstance(raw, list) or not raw:
        raise SpecError("layers: expected a non-empty array")
    layers = []
    for i, entry in enumerate(raw):
        path = f"layers[{i}]"
        if not isinstance(entry, dict):
            raise SpecError(f"{path}: expected an object")
        for key in ("activation", "weights", "bias"):
            if key not in entry:
                raise SpecError(f"{path}: missing required field '{key}'")
        extra = set(entry) - {"activation", "weights", "bias"}
        if extra:
            raise SpecError(f"{path}: unknown field(s) {sorted(extra)}")
        try:
            act = Activation(entry["activation"])
        except ValueError:
            allowed = ", ".join(a.value for a in Activation)
            raise SpecError(
                f"{path}.activation: {entry['activation']!r} is not one of {allowed}"
            ) from None
        w = _number_matrix(entry["weights"], f"{path}.weights")
        b = _number_vector(entry["bias"], f"{path}.bias")
        if b.shape != (w.shape[0],):
            raise SpecError(f"{path}.bias: has {b.size} entries, expected {w.shape[0]} (weight rows)")
        if i > 0 and w.shape[1] != layers[-1].out_dim:
            raise SpecError(
                f"{path}.weights: has {w.shape[1]} columns, expected {layers[-1].out_dim} "
                f"(output dimension of layers[{i - 1}])"
            )
        layers.append(SmoothLayer(w, b, act))
    metric = None
    if obj.get("output_metric") is not None:
        metric = _number_matrix(obj["output_metric"], "output_metric")
        if metric.shape[0] != metric.shape[1]:
            raise SpecError(f"output_metric: must be square, got shape {metric.shape}")
    try:
        return NetworkSpec(layers, metric)
    except SpecError as exc:
        raise type(exc)(f"output_metric: {exc}") from None


def network_to_dict(net: NetworkSpec) -> dict:
    return {
        "layers": [
            {
                "activation": layer.activation.value,
                "weights": layer.weights.tolist(),
                "bias": layer.bias.tolist(),
            }
            for layer in net.layers
        ],
        "output_metric": net.output_metric.tolist(),
    }


def load_network(path) -> NetworkSpec:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return network_from_dict(obj)


def random_network(rng: np.random.Generator, dims, activations=None, scale: float = 1.0) -> NetworkSpec:
    """Gaussian weights/biases with N(0, scale^2 / fan_in) entries.

    ``activations`` defaults to a random draw from the smooth catalogue per layer.
    """
    dims = list(dims)
    kinds = list(Activation)
    layers = []
    for i in range(1, len(dims)):
        act = activations[i - 1] if activations is not None else kinds[rng.integers(len(kinds))]
        w = rng.normal(scale=scale / np.sqrt(dims[i - 1]), size=(dims[i], dims[i - 1]))
        b = rng.normal(scale=0.5 * scale, size=dims[i])
        layers.append(SmoothLayer(w, b, act))
    return NetworkSpec(layers)
