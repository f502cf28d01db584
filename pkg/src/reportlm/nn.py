"""Parameterised layers built from :mod:`reportlm.tensor` primitives."""

from __future__ import annotations

import hashlib

import numpy as np

from . import tensor as T
from .exceptions import ShapeError

GATES = ("input", "forget", "cell", "output")


def parameter(data, name):
    return T.Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def params_hash(named_params) -> str:
    """Digest of parameter values at 32-bit storage precision, in name order."""
    h = hashlib.sha256()
    for name in sorted(named_params):
        arr = np.ascontiguousarray(np.asarray(named_params[name].data, dtype="<f4"))
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


class MLP:
    """Feedforward stack: ReLU hidden layers, linear output (logits)."""

    def __init__(self, sizes, rng, zero_output=True, prefix="mlp"):
        if len(sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = i == len(self.sizes) - 2
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                # He initialisation for ReLU layers
                w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
            self.params[f"{prefix}.{i}.weight"] = parameter(w, f"{prefix}.{i}.weight")
            self.params[f"{prefix}.{i}.bias"] = parameter(np.zeros(fan_out), f"{prefix}.{i}.bias")
        self.prefix = prefix

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def layer(self, i):
        return self.params[f"{self.prefix}.{i}.weight"], self.params[f"{self.prefix}.{i}.bias"]

    def forward(self, x, dropout=0.0, training=False, rng=None):
        x = x if isinstance(x, T.Tensor) else T.Tensor(x)
        if x.shape[1] != self.sizes[0]:
            raise ShapeError(f"expected {self.sizes[0]} input features, got {x.shape[1]}")
        for i in range(self.n_layers):
            w, b = self.layer(i)
            x = T.add_bias(T.matmul(x, w), b)
            if i < self.n_layers - 1:
                x = T.relu(x)
                x = T.dropout(x, dropout, training, rng)
        return x

    def n_parameters(self):
        return int(sum(p.size for p in self.params.values()))


class LSTMLayer:
    """One LSTM layer over time-major batches.

    Gate pre-activations are ``x W_x + h W_h + b`` with the four gates packed
    column-wise in the order input, forget, cell, output.
    """

    def __init__(self, input_size, hidden_size, rng, name):
        h = int(hidden_size)
        bound = 1.0 / np.sqrt(h)
        self.input_size = int(input_size)
        self.hidden_size = h
        self.name = name
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget-gate bias starts open
        self.w_x = parameter(rng.uniform(-bound, bound, (self.input_size, 4 * h)), f"{name}.w_x")
        self.w_h = parameter(rng.uniform(-bound, bound, (h, 4 * h)), f"{name}.w_h")
        self.b = parameter(b, f"{name}.b")

    @property
    def params(self):
        return {p.name: p for p in (self.w_x, self.w_h, self.b)}

    def n_parameters(self):
        # 4 gates x (H x (in + H) weights + H biases)
        return 4 * (self.hidden_size * (self.input_size + self.hidden_size) + self.hidden_size)

    def step(self, x_proj, h_prev, c_prev):
        """One cell update given the precomputed input projection ``x W_x + b``."""
        return T.lstm_cell(T.add(x_proj, T.matmul(h_prev, self.w_h)), c_prev)

    def forward(self, x_flat, n_steps, batch, state=None):
        """Run over ``n_steps`` time-major rows of ``x_flat`` (shape ``(n_steps*batch, in)``).

        Returns the stacked hidden states ``(n_steps*batch, H)`` and the final
        ``(h, c)`` state.
        """
        if x_flat.shape != (n_steps * batch, self.input_size):
            raise ShapeError(f"{self.name}: expected input {(n_steps * batch, self.input_size)}, got {x_flat.shape}")
        proj = T.add_bias(T.matmul(x_flat, self.w_x), self.b)
        if state is None:
            h = T.Tensor(np.zeros((batch, self.hidden_size)))
            c = T.Tensor(np.zeros((batch, self.hidden_size)))
        else:
            h, c = state
        outs = []
        for t in range(n_steps):
            h, c = self.step(proj[t * batch:(t + 1) * batch], h, c)
            outs.append(h)
        return T.concat(outs, axis=0), (h, c)


def lstm_step(w_x, w_h, b, x, h_prev, c_prev):
    """Single LSTM update on plain parameters; returns ``(h, c)`` tensors.

    ``i, f, o = sigmoid(.)``, ``g = tanh(.)``, ``c = f*c_prev + i*g``,
    ``h = o*tanh(c)``.
    """
    w_x, w_h, b = (p if isinstance(p, T.Tensor) else T.Tensor(p) for p in (w_x, w_h, b))
    x, h_prev, c_prev = (v if isinstance(v, T.Tensor) else T.Tensor(np.atleast_2d(v)) for v in (x, h_prev, c_prev))
    H = h_prev.shape[1]
    if w_x.shape != (x.shape[1], 4 * H) or w_h.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm_step: w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape} incompatible with "
            f"input width {x.shape[1]} and hidden size {H}"
        )
    if c_prev.shape != h_prev.shape or x.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"lstm_step: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}")
    z = T.add_bias(T.add(T.matmul(x, w_x), T.matmul(h_prev, w_h)), b)
    gates = T.sigmoid(z)
    c = T.add(T.mul(gates[:, H:2 * H], c_prev), T.mul(gates[:, 0:H], T.tanh(z[:, 2 * H:3 * H])))
    h = T.mul(gates[:, 3 * H:4 * H], T.tanh(c))
    return h, c
