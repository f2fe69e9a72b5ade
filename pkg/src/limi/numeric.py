"""Float64 computation substrate: named parameter vectors, multilayer
perceptrons with hand-written backward passes, central-difference gradient
checking, and Adam.

Everything here is a pure function of its inputs. Gradients are computed by
explicit per-layer backward passes rather than a general tape; the model zoo
in this package is small and fixed, and explicit passes keep every gradient
checkable against finite differences.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, NumericError

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name: str, pre: np.ndarray) -> np.ndarray:
    """Derivative of the activation, evaluated at the pre-activation."""
    if name == "relu":
        return (pre > 0).astype(np.float64)
    if name == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    return np.ones_like(pre)


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

class ParamVector:
    """A flat float64 vector with named, shaped segments.

    layout maps segment name -> (offset, shape). Segments must tile the flat
    vector exactly: contiguous, non-overlapping, no gaps.
    """

    def __init__(self, values: np.ndarray, layout: dict):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1:
            raise DimensionMismatch("parameter values must be a flat vector", where="ParamVector")
        if not np.all(np.isfinite(values)):
            raise NumericError("non-finite parameter values")
        pos = 0
        for name, (offset, shape) in layout.items():
            if offset != pos:
                raise DimensionMismatch(
                    f"segment {name!r} at offset {offset}, expected {pos}", where="ParamVector")
            pos += int(np.prod(shape))
        if pos != values.size:
            raise DimensionMismatch(
                f"segments cover {pos} values, vector has {values.size}", where="ParamVector")
        self.values = values
        self.layout = dict(layout)

    @classmethod
    def from_segments(cls, segments: dict) -> "ParamVector":
        """Build from an ordered mapping of name -> array."""
        layout = {}
        chunks = []
        pos = 0
        for name, arr in segments.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout[name] = (pos, arr.shape)
            chunks.append(arr.ravel())
            pos += arr.size
        flat = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(flat, layout)

    def segment(self, name: str) -> np.ndarray:
        """Writable shaped view of one segment."""
        offset, shape = self.layout[name]
        return self.values[offset:offset + int(np.prod(shape))].reshape(shape)

    def names(self):
        return list(self.layout.keys())

    @property
    def size(self) -> int:
        return self.values.size

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def segment_slice(self, name: str) -> slice:
        offset, shape = self.layout[name]
        return slice(offset, offset + int(np.prod(shape)))


@dataclass
class GradRecord:
    """Gradient with the same layout as the parameters it differentiates."""

    gradient: ParamVector
    loss: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise NumericError(f"non-finite loss {self.loss}")


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    """Widths of every layer plus the hidden activation.

    `activation` applies to all hidden layers; the output layer is linear.
    A per-layer tuple is accepted for mixed stacks.
    """

    layer_widths: tuple
    activation: object = "relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise DimensionMismatch("need at least input and output widths", where="MlpSpec")
        if any(w < 1 for w in self.layer_widths):
            raise DimensionMismatch("all layer widths must be >= 1", where="MlpSpec")
        for a in self.hidden_activations():
            if a not in ACTIVATIONS:
                raise DimensionMismatch(f"unknown activation {a!r}", where="MlpSpec")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    def hidden_activations(self):
        n_hidden = self.n_layers - 1
        if isinstance(self.activation, str):
            return (self.activation,) * n_hidden
        acts = tuple(self.activation)
        if len(acts) != n_hidden:
            raise DimensionMismatch(
                f"{len(acts)} activations for {n_hidden} hidden layers", where="MlpSpec")
        return acts

    def layer_activation(self, l: int) -> str:
        """Activation applied after layer l (output layer is identity)."""
        if l == self.n_layers - 1:
            return "identity"
        return self.hidden_activations()[l]


def mlp_layout(spec: MlpSpec) -> dict:
    layout = {}
    pos = 0
    for l in range(spec.n_layers):
        n_in, n_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        layout[f"w{l}"] = (pos, (n_in, n_out))
        pos += n_in * n_out
        layout[f"b{l}"] = (pos, (n_out,))
        pos += n_out
    return layout


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_mlp_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    segments = {}
    for l in range(spec.n_layers):
        n_in, n_out = spec.layer_widths[l], spec.layer_widths[l + 1]
        segments[f"w{l}"] = glorot_uniform((n_in, n_out), n_in, n_out, rng)
        segments[f"b{l}"] = np.zeros(n_out)
    return ParamVector.from_segments(segments)


def _check_mlp_input(spec: MlpSpec, params: ParamVector, X: np.ndarray):
    if X.shape[-1] != spec.layer_widths[0]:
        raise DimensionMismatch(
            f"input width {X.shape[-1]} != layer 0 width {spec.layer_widths[0]}",
            where="mlp layer 0")
    for l in range(spec.n_layers):
        w = params.segment(f"w{l}")
        want = (spec.layer_widths[l], spec.layer_widths[l + 1])
        if w.shape != want:
            raise DimensionMismatch(
                f"weight shape {w.shape} != {want}", where=f"mlp layer {l}")


def mlp_forward_cache(spec: MlpSpec, params: ParamVector, X: np.ndarray):
    """Batched forward pass. X is (N, in) or (in,). Returns (Y, cache).

    cache holds per-layer (input, pre-activation) pairs for the backward pass.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    _check_mlp_input(spec, params, X)
    cache = []
    h = X
    for l in range(spec.n_layers):
        with np.errstate(over="ignore", invalid="ignore"):
            pre = h @ params.segment(f"w{l}") + params.segment(f"b{l}")
        if not np.all(np.isfinite(pre)):
            raise NumericError("non-finite pre-activation", layer=l)
        cache.append((h, pre))
        h = _act(spec.layer_activation(l), pre)
    return (h[0] if single else h), cache


def mlp_forward(spec: MlpSpec, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Deterministic forward evaluation; x may be a vector or an (N, in) batch."""
    y, _ = mlp_forward_cache(spec, params, x)
    return y


def mlp_backward_from_cache(spec: MlpSpec, params: ParamVector, cache, upstream: np.ndarray):
    """Backward pass given the forward cache.

    upstream has the output's shape. Returns (param_grad: ParamVector, dX)
    where the gradients are of sum(upstream * output).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    single = upstream.ndim == 1
    if single:
        upstream = upstream[None, :]
    if upstream.shape[-1] != spec.layer_widths[-1]:
        raise DimensionMismatch(
            f"upstream width {upstream.shape[-1]} != output width {spec.layer_widths[-1]}",
            where=f"mlp layer {spec.n_layers - 1}")
    grad = {}
    d = upstream
    for l in reversed(range(spec.n_layers)):
        h, pre = cache[l]
        dpre = d * _act_grad(spec.layer_activation(l), pre)
        if not np.all(np.isfinite(dpre)):
            raise NumericError("non-finite gradient", layer=l)
        grad[f"w{l}"] = h.T @ dpre
        grad[f"b{l}"] = dpre.sum(axis=0)
        d = dpre @ params.segment(f"w{l}").T
    ordered = {name: grad[name] for name in params.names()}
    dX = d[0] if single else d
    return ParamVector.from_segments(ordered), dX


def mlp_backward(spec: MlpSpec, params: ParamVector, x: np.ndarray, upstream: np.ndarray):
    """Gradient of (upstream . output) w.r.t. parameters and input.

    Returns (GradRecord, input_gradient).
    """
    y, cache = mlp_forward_cache(spec, params, x)
    pgrad, dx = mlp_backward_from_cache(spec, params, cache, upstream)
    loss = float(np.sum(np.asarray(upstream) * y))
    return GradRecord(pgrad, loss), dx


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def grad_check(fn, point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between fn's analytic gradient and central differences.

    fn(point) must return (scalar, gradient). The error in coordinate i is
    |analytic_i - numeric_i| / max(1, |analytic_i|); non-finite values count
    as infinite error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    _, analytic = fn(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    worst = 0.0
    for i in range(point.size):
        shifted = point.copy()
        shifted[i] = point[i] + step
        up, _ = fn(shifted)
        shifted[i] = point[i] - step
        down, _ = fn(shifted)
        numeric = (up - down) / (2.0 * step)
        if not (np.isfinite(numeric) and np.isfinite(analytic[i])):
            return float("inf")
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if self.learning_rate < 0 or self.epsilon <= 0:
            raise ValueError("learning_rate must be >= 0 and epsilon > 0")
        if np.any(self.second_moment < 0):
            raise ValueError("second moment must be elementwise nonnegative")


def init_adam(params: ParamVector, learning_rate: float = 5e-4,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=np.zeros_like(params.values),
        second_moment=np.zeros_like(params.values),
        step_count=0,
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState):
    """One Adam update with bias correction. Returns (new params, new state).

    `grads` points in the direction of descent steps, i.e. parameters move
    against it: p <- p - lr * mhat / (sqrt(vhat) + eps).
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape:
        raise DimensionMismatch(
            f"gradient shape {g.shape} != parameter shape {params.values.shape}", where="adam")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, t, state.learning_rate, state.beta1, state.beta2, state.epsilon)
    return ParamVector(new_values, params.layout), new_state
