"""Dense MLP with parameter-only reverse mode and an Adam optimizer.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it, so optimizers and finite-difference checks can work on the
flat array directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "sin", "softplus")


class ShapeError(ValueError):
    pass


class InputError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def _act(name):
    if name == "tanh":
        return np.tanh, lambda z, a: 1.0 - a * a
    if name == "sin":
        return np.sin, lambda z, a: np.cos(z)
    if name == "softplus":
        return (lambda z: np.logaddexp(0.0, z)), (lambda z, a: 0.5 * (1.0 + np.tanh(0.5 * z)))
    raise ValueError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


def _layout(layer_dims):
    offsets = []
    pos = 0
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        w = (pos, pos + fan_out * fan_in, (fan_out, fan_in))
        pos += fan_out * fan_in
        b = (pos, pos + fan_out)
        pos += fan_out
        offsets.append((w, b))
    return offsets, pos


def _views(flat, layout):
    ws, bs = [], []
    for (w0, w1, shape), (b0, b1) in layout:
        ws.append(flat[w0:w1].reshape(shape))
        bs.append(flat[b0:b1])
    return ws, bs


class ParamGradient:
    """Gradient with the same layout as an :class:`MlpModel`'s parameters."""

    def __init__(self, layer_dims, flat):
        self.layer_dims = tuple(layer_dims)
        self.flat = flat
        layout, size = _layout(self.layer_dims)
        if flat.shape[-1] != size:
            raise ShapeError(f"gradient has {flat.shape[-1]} entries, layout needs {size}")
        self.weights, self.biases = _views(flat, layout)

    @classmethod
    def zeros(cls, layer_dims):
        return cls(layer_dims, np.zeros(_layout(layer_dims)[1]))

    def __add__(self, other):
        return ParamGradient(self.layer_dims, self.flat + other.flat)

    def __sub__(self, other):
        return ParamGradient(self.layer_dims, self.flat - other.flat)

    def __mul__(self, c):
        return ParamGradient(self.layer_dims, self.flat * c)

    __rmul__ = __mul__

    def __repr__(self):
        return f"ParamGradient(layer_dims={self.layer_dims}, norm={np.linalg.norm(self.flat):.3e})"


class MlpModel:
    """Feed-forward network x -> R with ``activation`` on hidden layers only."""

    def __init__(self, layer_dims, activation="tanh", params=None):
        layer_dims = tuple(int(n) for n in layer_dims)
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ShapeError(f"layer_dims must hold >= 2 positive sizes, got {layer_dims}")
        if layer_dims[-1] != 1:
            raise ShapeError("output dimension must be 1")
        self.layer_dims = layer_dims
        self.activation = activation
        self._act, self._dact = _act(activation)
        self._layout, size = _layout(layer_dims)
        if params is None:
            params = np.zeros(size)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ShapeError(f"expected {size} parameters, got shape {params.shape}")
        if not np.all(np.isfinite(params)):
            raise InputError("parameters must be finite")
        self.params = params
        self.weights, self.biases = _views(self.params, self._layout)

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def n_params(self):
        return self.params.size

    @classmethod
    def glorot(cls, layer_dims, rng, activation="tanh"):
        """Uniform Glorot init; ``rng`` is any object with ``uniform(shape)`` on [0, 1)."""
        model = cls(layer_dims, activation)
        u = rng.uniform((sum(w.size for w in model.weights),))
        pos = 0
        for w in model.weights:
            fan_out, fan_in = w.shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w[...] = limit * (2.0 * u[pos:pos + w.size].reshape(w.shape) - 1.0)
            pos += w.size
        return model

    def copy(self):
        return MlpModel(self.layer_dims, self.activation, self.params.copy())

    def with_params(self, params):
        return MlpModel(self.layer_dims, self.activation, params)

    def _check_inputs(self, inputs):
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.input_dim:
            raise ShapeError(f"inputs must be [n x {self.input_dim}], got {inputs.shape}")
        if not np.all(np.isfinite(inputs)):
            raise InputError("non-finite input")
        return inputs

    def _forward(self, inputs, keep):
        acts = [inputs]
        pre = []
        a = inputs
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            z = a @ w.T
            z += b
            if self.activation == "tanh":
                a = np.tanh(z, out=z)
                pre.append(None)
            else:
                a = self._act(z)
                pre.append(z)
            if keep:
                acts.append(a)
        out = a @ self.weights[-1][0] + self.biases[-1][0]
        return out, acts, pre

    def __call__(self, inputs):
        """Network output for each row of ``inputs``."""
        inputs = self._check_inputs(inputs)
        n = inputs.shape[0]
        if n <= CHUNK_ROWS:
            return self._forward(inputs, False)[0]
        out = np.empty(n)
        for s in range(0, n, CHUNK_ROWS):
            out[s:s + CHUNK_ROWS] = self._forward(inputs[s:s + CHUNK_ROWS], False)[0]
        return out

    def _backward_chunk(self, acts, pre, c, flat):
        layout = self._layout
        (w0, w1, _), (b0, b1) = layout[-1]
        flat[w0:w1] += c @ acts[-1]
        flat[b0] += c.sum()
        if len(self.weights) == 1:
            return
        ga = np.multiply.outer(c, self.weights[-1][0])
        for k in range(len(self.weights) - 2, -1, -1):
            ga *= self._dact(pre[k], acts[k + 1])
            (w0, w1, shape), (b0, b1) = layout[k]
            flat[w0:w1] += (ga.T @ acts[k]).ravel()
            flat[b0:b1] += ga.sum(axis=0)
            if k:
                ga = ga @ self.weights[k]

    def _backward_segments(self, acts, pre, c, m):
        per = c.shape[0] // m
        layout = self._layout
        flat = np.empty((m, self.n_params))
        g = c.reshape(m, per)
        (w0, w1, _), (b0, b1) = layout[-1]
        flat[:, w0:w1] = np.einsum("sp,spi->si", g, acts[-1].reshape(m, per, -1))
        flat[:, b0] = g.sum(axis=1)
        if len(self.weights) == 1:
            return flat
        ga = np.multiply.outer(c, self.weights[-1][0])
        for k in range(len(self.weights) - 2, -1, -1):
            ga *= self._dact(pre[k], acts[k + 1])
            (w0, w1, _), (b0, b1) = layout[k]
            gs = ga.reshape(m, per, -1)
            flat[:, w0:w1] = np.einsum("spo,spi->soi", gs, acts[k].reshape(m, per, -1)).reshape(m, -1)
            flat[:, b0:b1] = gs.sum(axis=1)
            if k:
                ga = ga @ self.weights[k]
        return flat

    def forward_taped(self, inputs):
        """Outputs plus the chunked activations, so a following backward skips the recompute.

        The tape is None when keeping it would exceed ``TAPE_BUDGET_BYTES``.
        """
        inputs = self._check_inputs(inputs)
        n = inputs.shape[0]
        if n * (self.input_dim + sum(self.layer_dims[1:-1])) * 8 > TAPE_BUDGET_BYTES:
            return self(inputs), None
        out = np.empty(n)
        tape = []
        for s in range(0, n, CHUNK_ROWS):
            out[s:s + CHUNK_ROWS], acts, pre = self._forward(inputs[s:s + CHUNK_ROWS], True)
            tape.append((acts, pre))
        return out, tape

    def backward(self, inputs, cotangents, segments=None, tape=None):
        return backward_params(self, inputs, cotangents, segments, tape)

    def __repr__(self):
        return f"MlpModel(layer_dims={self.layer_dims}, activation={self.activation!r})"


# Rows per forward/backward block; keeps activations cache resident.
CHUNK_ROWS = 2048
# Largest activation tape kept between a forward and its backward.
TAPE_BUDGET_BYTES = 96 * 2**20


def forward_batch(model, inputs):
    """f(x_j; theta) for every row x_j of ``inputs``."""
    return model(inputs)


def backward_params(model, inputs, output_cotangents, segments=None, tape=None):
    """Parameter gradient of ``sum_j c_j f(x_j)``; input gradients are never formed.

    The forward pass is recomputed block by block. With ``segments=m`` the rows
    are split into m equal contiguous blocks and an [m x n_params] array of
    per-block gradients is returned instead of a :class:`ParamGradient`.
    ``tape`` is the second result of :meth:`MlpModel.forward_taped` on the same
    inputs and parameters.
    """
    inputs = model._check_inputs(inputs)
    c = np.asarray(output_cotangents, dtype=np.float64)
    n = inputs.shape[0]
    if c.shape != (n,):
        raise ShapeError(f"output_cotangents must have shape ({n},), got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InputError("non-finite cotangent")
    if segments is not None:
        m = int(segments)
        if m < 1 or n % m:
            raise ShapeError(f"{n} rows do not split into {m} equal segments")
        per = n // m
        step = per * max(1, CHUNK_ROWS // per)
        blocks = []
        for s in range(0, n, step):
            _, acts, pre = model._forward(inputs[s:s + step], True)
            blocks.append(model._backward_segments(acts, pre, c[s:s + step], (min(n, s + step) - s) // per))
        return np.concatenate(blocks)
    flat = np.zeros(model.n_params)
    for i, s in enumerate(range(0, n, CHUNK_ROWS)):
        if tape is not None:
            acts, pre = tape[i]
        else:
            _, acts, pre = model._forward(inputs[s:s + CHUNK_ROWS], True)
        model._backward_chunk(acts, pre, c[s:s + CHUNK_ROWS], flat)
    return ParamGradient(model.layer_dims, flat)


LR_SCHEDULES = ("exponential", "linear")


@dataclass
class AdamState:
    n_params: int
    base_lr: float = 1e-3
    decay_coefficient: float = 0.9995
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    schedule: str = "exponential"
    total_steps: int = None
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0.0 < self.decay_coefficient <= 1.0:
            raise ValueError("decay_coefficient must lie in (0, 1]")
        if self.schedule not in LR_SCHEDULES:
            raise ValueError(f"unknown lr schedule {self.schedule!r}; choose from {', '.join(LR_SCHEDULES)}")
        if self.schedule == "linear" and not (self.total_steps and self.total_steps > 0):
            raise ValueError("the linear schedule needs total_steps > 0")
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)

    @property
    def lr(self):
        """Learning rate applied by the next update.

        ``exponential`` multiplies by ``decay_coefficient`` per step; ``linear``
        falls from ``base_lr`` to zero over ``total_steps``.
        """
        if self.schedule == "linear":
            return self.base_lr * max(0.0, 1.0 - self.step / self.total_steps)
        return self.base_lr * self.decay_coefficient**self.step


def adam_step(state, model, grad):
    """Bias-corrected Adam update, in place; returns ``(state, model)``."""
    g = grad.flat if isinstance(grad, ParamGradient) else np.asarray(grad)
    if g.shape != model.params.shape or state.m.shape != g.shape:
        raise ShapeError("gradient, model and optimizer state disagree in size")
    if not np.all(np.isfinite(g)):
        bad = np.flatnonzero(~np.isfinite(g))
        raise NonFiniteGradientError(
            f"update rejected at step {state.step}: {bad.size} non-finite gradient entries "
            f"(first at flat index {bad[0]})"
        )
    lr = state.lr
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    model.params -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state, model
