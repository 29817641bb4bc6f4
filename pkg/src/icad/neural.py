"""Dense feedforward networks with exact analytic gradients.

Deliberately small: affine layers with a fixed set of activations, batched
forward/backward passes, an Adam optimizer with decoupled weight decay, and
a finite-difference gradient checker. All math is float64; networks are
mutated only through ``Mlp.set_parameters`` so forward caches can detect
staleness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

ACTIVATIONS = ("identity", "relu", "elu", "sigmoid")


def _activate(name: str, z: Array) -> Array:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z >= 0.0, z, np.expm1(z))
    if name == "sigmoid":
        out = np.empty_like(z)
        pos = z >= 0.0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    raise ValueError(f"unknown activation {name!r}")


def _activate_prime(name: str, z: Array, post: Array) -> Array:
    # evaluated at the pre-activation; `post` is reused where it helps
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "elu":
        return np.where(z >= 0.0, 1.0, post + 1.0)
    if name == "sigmoid":
        return post * (1.0 - post)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class DenseLayer:
    """One affine map plus activation. ``bias is None`` marks a bias-free layer."""

    weights: Array
    bias: Array | None
    activation: str

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError(f"weights must be a matrix, got shape {self.weights.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weights.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match output size {self.weights.shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class Mlp:
    """A stack of dense layers with chained dimensions."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        self.layers = layers
        self._version = 0

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def version(self) -> int:
        return self._version

    def parameters(self) -> list[Array]:
        params: list[Array] = []
        for layer in self.layers:
            params.append(layer.weights)
            if layer.bias is not None:
                params.append(layer.bias)
        return params

    def parameter_names(self) -> list[str]:
        names: list[str] = []
        for i, layer in enumerate(self.layers):
            names.append(f"layer{i}.weights")
            if layer.bias is not None:
                names.append(f"layer{i}.bias")
        return names

    def set_parameters(self, new_params: Sequence[Array]) -> None:
        """Replace all parameters (same shapes, same bias structure)."""
        current = self.parameters()
        if len(new_params) != len(current):
            raise ValueError(
                f"expected {len(current)} parameter arrays, got {len(new_params)}"
            )
        it = iter(new_params)
        for layer in self.layers:
            w = np.asarray(next(it), dtype=np.float64)
            if w.shape != layer.weights.shape:
                raise ValueError(f"weight shape mismatch: {w.shape} vs {layer.weights.shape}")
            layer.weights = w
            if layer.bias is not None:
                b = np.asarray(next(it), dtype=np.float64)
                if b.shape != layer.bias.shape:
                    raise ValueError(f"bias shape mismatch: {b.shape} vs {layer.bias.shape}")
                layer.bias = b
        self._version += 1

    def has_bias(self) -> bool:
        return any(layer.bias is not None for layer in self.layers)


def init_mlp(
    dims: Sequence[int],
    activations: Sequence[str],
    bias: bool | Sequence[bool],
    rng: np.random.Generator,
) -> Mlp:
    """Build an Mlp with uniform(-a, a) weights, a = sqrt(6/(fan_in+fan_out))."""
    if len(dims) < 2:
        raise ValueError("need at least an input and an output dimension")
    n_layers = len(dims) - 1
    if len(activations) != n_layers:
        raise ValueError(f"expected {n_layers} activations, got {len(activations)}")
    if isinstance(bias, bool):
        bias_flags = [bias] * n_layers
    else:
        bias_flags = list(bias)
        if len(bias_flags) != n_layers:
            raise ValueError(f"expected {n_layers} bias flags, got {len(bias_flags)}")
    layers = []
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-a, a, size=(fan_out, fan_in))
        b = np.zeros(fan_out) if bias_flags[i] else None
        layers.append(DenseLayer(w, b, activations[i]))
    return Mlp(layers)


@dataclass
class ForwardCache:
    net: Mlp
    version: int
    x: Array
    pre: list[Array]
    post: list[Array]
    squeeze: bool


def forward(net: Mlp, x: Array) -> tuple[Array, ForwardCache]:
    """Run the network; the cache holds everything ``backward`` needs.

    Accepts a single example ``(D,)`` or a batch ``(B, D)``; the output shape
    matches the input convention.
    """
    x_arr = np.asarray(x, dtype=np.float64)
    squeeze = x_arr.ndim == 1
    x2 = np.atleast_2d(x_arr)
    if x2.ndim != 2 or x2.shape[1] != net.input_dim:
        raise ValueError(
            f"input of shape {x_arr.shape} does not match network input dim {net.input_dim}"
        )
    pre: list[Array] = []
    post: list[Array] = []
    a = x2
    for layer in net.layers:
        z = a @ layer.weights.T
        if layer.bias is not None:
            z = z + layer.bias
        a = _activate(layer.activation, z)
        pre.append(z)
        post.append(a)
    y = post[-1][0] if squeeze else post[-1]
    return y, ForwardCache(net, net.version, x2, pre, post, squeeze)


def backward(net: Mlp, cache: ForwardCache, loss_grad: Array) -> tuple[list[Array], Array]:
    """Backpropagate ``dLoss/dOutput`` through the cached forward pass.

    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``net.parameters()``. Gradients over a batch are summed, so scale
    ``loss_grad`` rows if a mean is wanted.
    """
    if cache.net is not net or cache.version != net.version:
        raise ValueError("forward cache is stale or belongs to a different network")
    g = np.atleast_2d(np.asarray(loss_grad, dtype=np.float64))
    if g.shape != cache.post[-1].shape:
        raise ValueError(
            f"loss gradient shape {g.shape} does not match output shape {cache.post[-1].shape}"
        )
    per_layer: list[list[Array]] = []
    delta = g
    for i in reversed(range(len(net.layers))):
        layer = net.layers[i]
        delta = delta * _activate_prime(layer.activation, cache.pre[i], cache.post[i])
        a_prev = cache.x if i == 0 else cache.post[i - 1]
        grads = [delta.T @ a_prev]
        if layer.bias is not None:
            grads.append(delta.sum(axis=0))
        per_layer.append(grads)
        delta = delta @ layer.weights
    flat: list[Array] = []
    for grads in reversed(per_layer):
        flat.extend(grads)
    input_grad = delta[0] if cache.squeeze else delta
    return flat, input_grad


@dataclass
class AdamState:
    """Adam with decoupled weight decay; moments are bound lazily to shapes."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] | None = field(default=None, repr=False)
    v: list[Array] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0.0:
            raise ValueError("weight decay must be nonnegative")


def adam_step(
    state: AdamState,
    params: Sequence[Array],
    grads: Sequence[Array],
    names: Sequence[str] | None = None,
    decay_mask: Sequence[bool] | None = None,
) -> list[Array]:
    """One optimizer step; returns the updated parameter arrays.

    ``decay_mask`` selects which parameters receive the decoupled weight
    decay (all by default). A non-finite gradient raises, naming the
    offending parameter.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    for i, (p, g, m, v) in enumerate(zip(params, grads, state.m, state.v)):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"parameter {i}"
            raise ValueError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out: list[Array] = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        update = m_hat / (np.sqrt(v_hat) + state.eps)
        decay = state.weight_decay
        if decay_mask is not None and not decay_mask[i]:
            decay = 0.0
        out.append(p - state.learning_rate * (update + decay * p))
    return out


def finite_difference_grads(
    params: Sequence[Array],
    loss_fn: Callable[[], float],
    step: float = 1e-5,
) -> list[Array]:
    """Central finite differences of ``loss_fn`` w.r.t. each parameter entry.

    The arrays in ``params`` are perturbed in place and restored, so they
    must be the live parameters the loss closure reads.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + step
            hi = loss_fn()
            flat_p[j] = orig - step
            lo = loss_fn()
            flat_p[j] = orig
            flat_g[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(
    analytic: Sequence[Array],
    numeric: Sequence[Array],
    denom_floor: float = 1e-3,
) -> tuple[float, int]:
    """Worst-case elementwise relative error between two gradient lists.

    The denominator is floored so that finite-difference roundoff on
    near-zero components does not register as disagreement. Returns
    ``(max_error, index_of_worst_array)``.
    """
    worst = 0.0
    worst_idx = 0
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), denom_floor)
        err = np.abs(a - n) / denom
        local = float(err.max()) if err.size else 0.0
        if local > worst:
            worst = local
            worst_idx = i
    return worst, worst_idx


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst_param: str


def grad_check_params(
    params: Sequence[Array],
    names: Sequence[str],
    loss_fn: Callable[[], float],
    analytic: Sequence[Array],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences."""
    numeric = finite_difference_grads(params, loss_fn, step=step)
    err, idx = max_relative_error(analytic, numeric)
    return GradCheckReport(err, tolerance, err < tolerance, names[idx])


def grad_check(
    net: Mlp,
    x: Array,
    loss: Callable[[Array], tuple[float, Array]],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Gradient check for an Mlp under ``loss(output) -> (value, dvalue/doutput)``."""
    y, cache = forward(net, x)
    _, gy = loss(y)
    analytic, _ = backward(net, cache, gy)

    def loss_value() -> float:
        out, _ = forward(net, x)
        return loss(out)[0]

    return grad_check_params(
        net.parameters(), net.parameter_names(), loss_value, analytic, tolerance, step
    )
