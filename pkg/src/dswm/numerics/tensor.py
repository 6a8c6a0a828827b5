"""Dense float64 tensors and a tape recording primitive applications."""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _stack():
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape():
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """A float64 array with an optional gradient.

    Only tensors created while a :class:`GradientTape` is active (or leaves with
    ``requires_grad=True``) take part in backward passes.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class GradientTape:
    """Ordered record of primitive applications.

    Recording order is a topological order of the computation, so backward is a
    single reverse sweep. Gradients accumulate additively into ``Tensor.grad``.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, out, inputs, backward):
        self.nodes.append((out, inputs, backward))

    def backward(self, loss: Tensor, grad=None):
        if grad is None:
            if loss.data.size != 1:
                raise ValueError("backward() without grad needs a scalar loss")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=np.float64)
        for out, inputs, fn in reversed(self.nodes):
            g = out.grad
            if g is None:
                continue
            for t, gt in zip(inputs, fn(g)):
                if gt is None or not t.requires_grad:
                    continue
                t.grad = gt if t.grad is None else t.grad + gt

    def reset(self):
        """Drop recorded nodes and the gradients of non-leaf tensors."""
        for out, _, _ in self.nodes:
            out.grad = None
        self.nodes = []


def record(data, inputs, backward) -> Tensor:
    """Wrap ``data`` as the output of a primitive over ``inputs``."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.record(out, inputs, backward)
    return out
