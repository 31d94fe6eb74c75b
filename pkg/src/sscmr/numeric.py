"""Fully-connected layers with hand-written backpropagation.

Batches are laid out column-wise: an input of shape ``(d_in, n)`` holds
``n`` samples.  Everything is float64.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, LoadError, NumericError, StateError

ACTIVATIONS = ("none", "sigmoid", "softmax", "tanh")
CHECKPOINT_HEADER = "sscmr-layerstack 1"


def sigmoid(z):
    return expit(z)


def softmax(z):
    """Column-wise softmax with max subtraction."""
    shifted = z - z.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def sigmoid_backward(a, grad_a):
    return grad_a * a * (1.0 - a)


def softmax_backward(a, grad_a):
    """Vector-Jacobian product of a column-wise softmax with output ``a``."""
    return a * (grad_a - (grad_a * a).sum(axis=0, keepdims=True))


def activate(z, activation):
    if activation == "none":
        return z
    if activation == "sigmoid":
        return sigmoid(z)
    if activation == "softmax":
        return softmax(z)
    if activation == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {activation!r}")


def activation_backward(a, grad_a, activation):
    if activation == "none":
        return grad_a
    if activation == "sigmoid":
        return sigmoid_backward(a, grad_a)
    if activation == "softmax":
        return softmax_backward(a, grad_a)
    if activation == "tanh":
        return grad_a * (1.0 - a * a)
    raise ConfigError(f"unknown activation {activation!r}")


def glorot_uniform(d_out, d_in, rng):
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


@dataclass
class FcLayer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.weight.ndim != 2:
            raise ConfigError("weight must be a matrix")
        if self.bias.shape[0] != self.weight.shape[0]:
            raise ConfigError(
                f"bias length {self.bias.shape[0]} does not match "
                f"weight rows {self.weight.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def d_in(self):
        return self.weight.shape[1]

    @property
    def d_out(self):
        return self.weight.shape[0]

    @classmethod
    def init(cls, d_in, d_out, activation, rng, zero=False):
        if zero:
            return cls(np.zeros((d_out, d_in)), np.zeros(d_out), activation)
        return cls(glorot_uniform(d_out, d_in, rng), np.zeros(d_out), activation)


@dataclass
class LayerStack:
    """An ordered chain of :class:`FcLayer` that remembers its last forward pass."""

    layers: list
    _inputs: list = field(default=None, init=False, repr=False)
    _outputs: list = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a LayerStack needs at least one layer")
        for k, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.d_out != b.d_in:
                raise ConfigError(
                    f"layer {k} outputs {a.d_out} but layer {k + 1} expects {b.d_in}"
                )
        for layer in self.layers[:-1]:
            if layer.activation == "softmax":
                raise ConfigError("softmax is only allowed on the last layer")

    @classmethod
    def build(cls, sizes, activations, rng, zero_last=False):
        """Create a stack with layer widths ``sizes`` (input first)."""
        if len(activations) != len(sizes) - 1:
            raise ConfigError("need one activation per layer")
        n = len(activations)
        layers = [
            FcLayer.init(sizes[k], sizes[k + 1], activations[k], rng,
                         zero=zero_last and k == n - 1)
            for k in range(n)
        ]
        return cls(layers)

    @property
    def d_in(self):
        return self.layers[0].d_in

    @property
    def d_out(self):
        return self.layers[-1].d_out

    def parameters(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the live parameter arrays."""
        params = []
        for layer in self.layers:
            params.extend((layer.weight, layer.bias))
        return params

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != self.d_in:
            raise ConfigError(f"input has {x.shape[0]} rows, stack expects {self.d_in}")
        inputs, outputs = [], []
        a = x
        for layer in self.layers:
            inputs.append(a)
            z = layer.weight @ a + layer.bias[:, None]
            a = activate(z, layer.activation)
            outputs.append(a)
        self._inputs, self._outputs = inputs, outputs
        return a

    def predict(self, x):
        """Forward pass that leaves the backprop cache untouched."""
        a = np.asarray(x, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        if a.shape[0] != self.d_in:
            raise ConfigError(f"input has {a.shape[0]} rows, stack expects {self.d_in}")
        for layer in self.layers:
            a = activate(layer.weight @ a + layer.bias[:, None], layer.activation)
        return a

    def backward(self, grad_output):
        """Backpropagate ``grad_output`` (gradient w.r.t. the last activation).

        Returns ``(grads, grad_input)`` with ``grads`` aligned to
        :meth:`parameters`.
        """
        if self._inputs is None:
            raise StateError("backward called before forward")
        grad = np.asarray(grad_output, dtype=np.float64)
        if grad.ndim == 1:
            grad = grad[:, None]
        if grad.shape != self._outputs[-1].shape:
            raise ConfigError(
                f"grad_output shape {grad.shape} does not match the last "
                f"forward output {self._outputs[-1].shape}"
            )
        grads = [None] * (2 * len(self.layers))
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            dz = activation_backward(self._outputs[k], grad, layer.activation)
            grads[2 * k] = dz @ self._inputs[k].T
            grads[2 * k + 1] = dz.sum(axis=1)
            grad = layer.weight.T @ dz
        return grads, grad


@dataclass
class Sgd:
    """Plain stochastic gradient descent over a list of parameter arrays."""

    params: list
    learning_rate: float

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ConfigError(f"got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if np.shape(g) != p.shape:
                raise ConfigError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        for p, g in zip(self.params, grads):
            p -= self.learning_rate * g


def clip_grad_norm(grads, max_norm):
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return [g * scale for g in grads]


def finite_diff_grad(loss_fn, params, step=1e-5):
    """Central-difference gradient of ``loss_fn()`` w.r.t. each array in ``params``.

    The arrays are perturbed in place and restored afterwards, so
    ``loss_fn`` should close over them.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(loss_fn())
            flat[i] = orig - step
            f_minus = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while perturbing coordinate {i}")
            gflat[i] = (f_plus - f_minus) / (2.0 * step)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise ``|a - n| / max(|a| + |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def save_stack(stack, path):
    lines = [CHECKPOINT_HEADER, f"layers {len(stack.layers)}"]
    for layer in stack.layers:
        lines.append(f"{layer.d_out} {layer.d_in} {layer.activation}")
        lines.append(" ".join(repr(float(v)) for v in layer.weight.reshape(-1)))
        lines.append(" ".join(repr(float(v)) for v in layer.bias))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_stack(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise LoadError(f"{path}: missing or unsupported checkpoint header")
    try:
        n_layers = int(lines[1].split()[1])
        layers = []
        pos = 2
        for _ in range(n_layers):
            d_out, d_in, activation = lines[pos].split()
            d_out, d_in = int(d_out), int(d_in)
            weight = np.array([float(v) for v in lines[pos + 1].split()], dtype=np.float64)
            bias = np.array([float(v) for v in lines[pos + 2].split()], dtype=np.float64)
            if weight.size != d_out * d_in or bias.size != d_out:
                raise LoadError(f"{path}: layer size does not match its header")
            layers.append(FcLayer(weight.reshape(d_out, d_in), bias, activation))
            pos += 3
    except (IndexError, ValueError) as exc:
        if isinstance(exc, LoadError):
            raise
        raise LoadError(f"{path}: malformed checkpoint ({exc})") from exc
    return LayerStack(layers)
