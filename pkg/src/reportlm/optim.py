"""First-order optimizers over registered :class:`~reportlm.tensor.Tensor` parameters.

L2 regularisation is applied as weight decay inside :meth:`Optimizer.step`
rather than as a loss term, so reported losses do not depend on the penalty.
"""

from __future__ import annotations

import numpy as np

from .exceptions import StateError, ValidationError

__all__ = ["Optimizer", "SGD", "Adam", "make_optimizer"]


class Optimizer:
    kind = "base"

    def __init__(self, params, learning_rate, l2_penalty=0.0):
        if learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {learning_rate}")
        if l2_penalty < 0:
            raise ValidationError(f"l2_penalty must be non-negative, got {l2_penalty}")
        self.params = list(params)
        self.learning_rate = float(learning_rate)
        self.l2_penalty = float(l2_penalty)
        self.step_count = 0
        # per-parameter multipliers on the learning rate (discriminative rates)
        self.lr_scale = [1.0] * len(self.params)

    def add_params(self, params, lr_scale=1.0):
        params = list(params)
        self.params.extend(params)
        self.lr_scale.extend([float(lr_scale)] * len(params))
        self._grow_state(len(params))

    def _grow_state(self, n):
        pass

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                label = p.name or f"#{i}"
                raise StateError(f"parameter {label} has no gradient; call backward() before step()")
        self.step_count += 1
        for i, p in enumerate(self.params):
            self._update(i, p, self.learning_rate * self.lr_scale[i])
        self.zero_grad()

    def _update(self, i, p, lr):
        raise NotImplementedError

    def state_arrays(self):
        """Optimizer state as named arrays, for checkpointing."""
        return {}

    def load_state_arrays(self, arrays, step_count):
        self.step_count = int(step_count)


class SGD(Optimizer):
    kind = "sgd"

    def _update(self, i, p, lr):
        p.data -= lr * (p.grad + self.l2_penalty * p.data)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, learning_rate=3e-4, l2_penalty=0.0, beta1=0.9, beta2=0.999, epsilon=1e-8):
        super().__init__(params, learning_rate, l2_penalty)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _grow_state(self, n):
        for p in self.params[-n:]:
            self.m.append(np.zeros_like(p.data))
            self.v.append(np.zeros_like(p.data))

    def _update(self, i, p, lr):
        g = p.grad
        self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
        self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
        m_hat = self.m[i] / (1.0 - self.beta1 ** self.step_count)
        v_hat = self.v[i] / (1.0 - self.beta2 ** self.step_count)
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.epsilon) + self.l2_penalty * p.data)

    def state_arrays(self):
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, arrays, step_count):
        super().load_state_arrays(arrays, step_count)
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"adam.m.{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"adam.v.{i}"], dtype=np.float64)


def make_optimizer(kind, params, learning_rate, l2_penalty=0.0, **kwargs) -> Optimizer:
    if kind == "adam":
        return Adam(params, learning_rate, l2_penalty, **kwargs)
    if kind == "sgd":
        return SGD(params, learning_rate, l2_penalty)
    raise ValidationError(f"unknown optimizer kind {kind!r}; expected 'adam' or 'sgd'")
