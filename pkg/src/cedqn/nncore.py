"""Small dense network engine: forward, exact backprop, SGD/Adam, checkpoints.

All parameters of an :class:`Mlp` live in one flat float64 vector; the
per-layer ``weights`` and ``biases`` are views into it.  That keeps the
optimizer, weight copies and serialization to single array operations.

Inputs may be a single vector ``(n_in,)`` or a batch ``(batch, n_in)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, DivergenceError, ShapeError

FORMAT_VERSION = 1
HIDDEN_ACTIVATIONS = ("relu",)
OUTPUT_ACTIVATIONS = ("identity", "sigmoid")
DEFAULT_CLIP_NORM = 10.0


def sigmoid(x):
    """Logistic function, stable for large ``|x|``; works on scalars and arrays."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def _param_layout(layer_sizes):
    """Yield (w_slice, w_shape, b_slice) per layer in storage order."""
    offset = 0
    for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        w = slice(offset, offset + n_out * n_in)
        offset = w.stop
        b = slice(offset, offset + n_out)
        offset = b.stop
        yield w, (n_out, n_in), b


def _param_count(layer_sizes):
    return sum(n_out * (n_in + 1) for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))


def _check_layer_sizes(layer_sizes):
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ShapeError(f"layer_sizes needs at least 2 entries, got {sizes}")
    if any(s < 1 for s in sizes):
        raise ShapeError(f"layer widths must be >= 1, got {sizes}")
    return tuple(sizes)


class Mlp:
    """Feed-forward network with ReLU hidden layers."""

    def __init__(self, layer_sizes, output_activation="identity", hidden_activation="relu",
                 params=None):
        self.layer_sizes = _check_layer_sizes(layer_sizes)
        if hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ShapeError(f"unknown hidden activation {hidden_activation!r}")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ShapeError(f"unknown output activation {output_activation!r}")
        self.hidden_activation = hidden_activation
        self.output_activation = output_activation
        n = _param_count(self.layer_sizes)
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.ascontiguousarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ShapeError(f"expected {n} parameters, got shape {params.shape}")
            self.params = params.copy()
        self._bind_views()

    def _bind_views(self):
        self.weights = []
        self.biases = []
        for w, shape, b in _param_layout(self.layer_sizes):
            self.weights.append(self.params[w].reshape(shape))
            self.biases.append(self.params[b])

    @property
    def architecture(self):
        return (self.layer_sizes, self.hidden_activation, self.output_activation)

    @property
    def n_inputs(self):
        return self.layer_sizes[0]

    @property
    def n_outputs(self):
        return self.layer_sizes[-1]

    def attach(self, storage):
        """Move parameters into ``storage`` (a flat float64 view) and keep using it."""
        if storage.shape != self.params.shape:
            raise ShapeError(f"storage shape {storage.shape} != {self.params.shape}")
        storage[...] = self.params
        self.params = storage
        self._bind_views()

    def clone(self):
        return Mlp(self.layer_sizes, self.output_activation, self.hidden_activation, self.params)

    def __call__(self, x):
        return forward(self, x)[0]

    def __repr__(self):
        return (f"Mlp({list(self.layer_sizes)}, hidden={self.hidden_activation}, "
                f"output={self.output_activation})")


@dataclass
class Gradients:
    """Flat gradient vector shaped like the owning network's parameters."""

    layer_sizes: tuple
    flat: np.ndarray

    @property
    def weights(self):
        return [self.flat[w].reshape(shape) for w, shape, _ in _param_layout(self.layer_sizes)]

    @property
    def biases(self):
        return [self.flat[b] for _, _, b in _param_layout(self.layer_sizes)]

    def norm(self):
        return float(np.sqrt(np.dot(self.flat, self.flat)))


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def mlp_init(layer_sizes, output_activation="identity", seed=0):
    """He-uniform weights in +-sqrt(6/fan_in), zero biases.

    ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    net = Mlp(layer_sizes, output_activation)
    rng = np.random.default_rng(seed)
    for w in net.weights:
        limit = math.sqrt(6.0 / w.shape[1])
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return net


def forward(mlp, x):
    """Return ``(output, trace)``; the trace holds every layer's input and pre-activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mlp.n_inputs or x.ndim not in (1, 2):
        raise ShapeError(f"input shape {x.shape} does not match input width {mlp.n_inputs}")
    inputs, pre = [], []
    a = x
    last = len(mlp.weights) - 1
    for k, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        if k < last:
            a = np.maximum(z, 0.0)
        elif mlp.output_activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
    return a, (inputs, pre)


def backward(mlp, trace, output_gradient, *, preactivation=False):
    """Gradient of ``sum(output * output_gradient)`` with respect to all parameters.

    With ``preactivation=True`` the incoming gradient is taken with respect to
    the last layer's pre-activation, skipping the output nonlinearity.  That is
    how the logistic loss reaches the sigmoid head without dividing by p(1-p).
    """
    inputs, pre = trace
    if len(inputs) != len(mlp.weights) or any(
        a.shape[-1] != w.shape[1] for a, w in zip(inputs, mlp.weights)
    ):
        raise ShapeError("trace was not produced by this network")
    g = np.asarray(output_gradient, dtype=np.float64)
    if g.shape != pre[-1].shape:
        raise ShapeError(f"output gradient shape {g.shape} != output shape {pre[-1].shape}")
    if mlp.output_activation == "sigmoid" and not preactivation:
        s = sigmoid(pre[-1])
        g = g * s * (1.0 - s)

    flat = np.empty_like(mlp.params)
    layout = list(_param_layout(mlp.layer_sizes))
    batched = g.ndim == 2
    for k in range(len(mlp.weights) - 1, -1, -1):
        w_sl, shape, b_sl = layout[k]
        a = inputs[k]
        if batched:
            flat[w_sl] = (g.T @ a).ravel()
            flat[b_sl] = g.sum(axis=0)
        else:
            flat[w_sl] = np.outer(g, a).ravel()
            flat[b_sl] = g
        if k:
            g = (g @ mlp.weights[k]) * (pre[k - 1] > 0.0)
    return Gradients(mlp.layer_sizes, flat)


def clip_by_global_norm(grads, max_norm=DEFAULT_CLIP_NORM):
    norm = grads.norm()
    if norm > max_norm:
        grads.flat *= max_norm / norm
    return grads


_TINY = np.finfo(np.float64).tiny


def _adam_inplace(params, g, m, v, state):
    # bias corrections folded into scalars; one scratch array instead of five temporaries
    b1, b2 = state.beta1, state.beta2
    tmp = np.empty_like(params)
    m *= b1
    np.multiply(g, 1.0 - b1, out=tmp)
    m += tmp
    v *= b2
    np.multiply(g, g, out=tmp)
    tmp *= 1.0 - b2
    v += tmp
    # moments of parameters whose gradient went to zero decay geometrically into
    # subnormal range, where float arithmetic is an order of magnitude slower
    for moment in (m, v):
        np.abs(moment, out=tmp)
        np.putmask(moment, tmp < _TINY, 0.0)
    np.sqrt(v, out=tmp)
    tmp *= 1.0 / np.sqrt(1.0 - b2**state.step)
    tmp += state.eps
    np.divide(m, tmp, out=tmp)
    tmp *= state.learning_rate / (1.0 - b1**state.step)
    params -= tmp


def apply_update(mlp, grads, state):
    """One in-place optimizer step; returns ``(mlp, state)``."""
    if grads.layer_sizes != mlp.layer_sizes:
        raise ShapeError("gradients do not match network shape")
    g = grads.flat
    if not np.all(np.isfinite(g)):
        raise DivergenceError("non-finite gradient")
    state.step += 1
    if state.algorithm == "sgd":
        mlp.params -= state.learning_rate * g
    else:
        if state.m is None:
            state.m = np.zeros_like(mlp.params)
            state.v = np.zeros_like(mlp.params)
        _adam_inplace(mlp.params, g, state.m, state.v, state)
    if not np.all(np.isfinite(mlp.params)):
        raise DivergenceError("parameters became non-finite")
    return mlp, state


def copy_weights(source, target):
    if source.architecture != target.architecture:
        raise ShapeError(
            f"architecture mismatch: {source.architecture} vs {target.architecture}")
    target.params[...] = source.params


class MlpStack:
    """``k`` networks of one architecture evaluated together with batched matmuls.

    Each member :class:`Mlp` keeps working on its own; its ``params`` is a view
    of one row of ``self.params``.
    """

    def __init__(self, nets):
        nets = list(nets)
        if not nets:
            raise ShapeError("empty network stack")
        arch = nets[0].architecture
        if any(n.architecture != arch for n in nets):
            raise ShapeError("all stacked networks must share one architecture")
        self.layer_sizes, self.hidden_activation, self.output_activation = arch
        self.params = np.zeros((len(nets), nets[0].params.size))
        for i, net in enumerate(nets):
            net.attach(self.params[i])
        self.nets = nets
        self.weights, self.biases = [], []
        for w, (n_out, n_in), b in _param_layout(self.layer_sizes):
            self.weights.append(self.params[:, w].reshape(len(nets), n_out, n_in))
            self.biases.append(self.params[:, b])

    def __len__(self):
        return len(self.nets)

    def forward(self, x):
        """``x`` has shape ``(k, batch, n_in)``; returns ``(output, trace)``."""
        inputs, pre = [], []
        a = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(a)
            z = np.matmul(a, w.transpose(0, 2, 1))
            z += b[:, None, :]
            pre.append(z)
            if k < last:
                a = np.maximum(z, 0.0)
            elif self.output_activation == "sigmoid":
                a = sigmoid(z)
            else:
                a = z
        return a, (inputs, pre)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, trace, output_gradient):
        """Per-member parameter gradients, shape ``(k, n_params)``."""
        inputs, pre = trace
        g = output_gradient
        if self.output_activation == "sigmoid":
            s = sigmoid(pre[-1])
            g = g * s * (1.0 - s)
        flat = np.empty_like(self.params)
        layout = list(_param_layout(self.layer_sizes))
        for k in range(len(self.weights) - 1, -1, -1):
            w_sl, shape, b_sl = layout[k]
            flat[:, w_sl] = np.matmul(g.transpose(0, 2, 1), inputs[k]).reshape(len(self), -1)
            flat[:, b_sl] = g.sum(axis=1)
            if k:
                g = np.matmul(g, self.weights[k]) * (pre[k - 1] > 0.0)
        return flat


def clip_rows_by_norm(flat, max_norm=DEFAULT_CLIP_NORM):
    norms = np.sqrt(np.einsum("ij,ij->i", flat, flat))
    over = norms > max_norm
    if over.any():
        flat[over] *= (max_norm / norms[over])[:, None]
    return flat


def apply_update_stacked(stack, flat_grads, states, m, v):
    """Adam step for every member at once.

    ``states`` are the members' :class:`OptimizerState` objects, which must
    share hyperparameters and step count; ``m``/``v`` are the stacked moment
    arrays their ``m``/``v`` fields view.
    """
    if not np.all(np.isfinite(flat_grads)):
        raise DivergenceError("non-finite gradient")
    lead = states[0]
    for st in states:
        st.step += 1
    if any(st.step != lead.step for st in states):
        raise ShapeError("stacked optimizer states are out of step")
    _adam_inplace(stack.params, flat_grads, m, v, lead)
    if not np.all(np.isfinite(stack.params)):
        raise DivergenceError("parameters became non-finite")


# -- checkpoints ----------------------------------------------------------------

def save_mlp(mlp, path):
    """JSON header line, then the flat parameter block as little-endian float64."""
    block = mlp.params.astype("<f8").tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "layer_sizes": list(mlp.layer_sizes),
        "hidden_activation": mlp.hidden_activation,
        "output_activation": mlp.output_activation,
        "dtype": "float64-le",
        "byte_length": len(block),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(block)


def load_mlp(path):
    raw = Path(path).read_bytes()
    head, sep, block = raw.partition(b"\n")
    if not sep:
        raise CheckpointError(f"malformed checkpoint {path}: missing header line")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: bad header ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"malformed checkpoint {path}: header is not an object")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"version mismatch in {path}: format_version={version}, expected {FORMAT_VERSION}",
            kind="version")
    try:
        sizes = [int(s) for s in header["layer_sizes"]]
        n_bytes = int(header["byte_length"])
        hidden, output = header["hidden_activation"], header["output_activation"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint {path}: header field {exc}") from None
    if len(block) != n_bytes or n_bytes % 8:
        raise CheckpointError(
            f"malformed checkpoint {path}: expected {n_bytes} parameter bytes, found {len(block)}")
    params = np.frombuffer(block, dtype="<f8").astype(np.float64)
    try:
        expected = _param_count(_check_layer_sizes(sizes))
    except ShapeError as exc:
        raise CheckpointError(f"shape inconsistency in {path}: {exc}", kind="shape") from None
    if params.size != expected:
        raise CheckpointError(
            f"shape inconsistency in {path}: layer_sizes {sizes} need {expected} "
            f"parameters, block holds {params.size}", kind="shape")
    try:
        return Mlp(sizes, output, hidden, params)
    except ShapeError as exc:
        raise CheckpointError(f"shape inconsistency in {path}: {exc}", kind="shape") from None
