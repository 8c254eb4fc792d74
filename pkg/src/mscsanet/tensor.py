"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays. Every differentiable operation records its input
tensors and a backward closure on the output node; the set of nodes reachable
from a loss, visited in reverse topological order, is the gradient tape.
Tensors are never mutated in place once they participate in a graph.

Two numeric modes are supported by convention rather than by a mode switch:
float64 arrays for verification and gradient checking, float32 for training.
Operations preserve the dtype of their inputs.
"""

from __future__ import annotations

import contextlib

import numpy as np


class NumericError(RuntimeError):
    """Raised when NaN/Inf values are produced while debug checks are on."""


class DimensionError(ValueError):
    """Raised on shape/axis mismatches between operands."""


_grad_enabled = True
_nan_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_nan_checks(enabled):
    """Toggle NaN/Inf detection on every op output (debug mode)."""
    global _nan_checks
    _nan_checks = bool(enabled)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense N-dimensional array of reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    # -- construction of op outputs ---------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        if _nan_checks and not np.all(np.isfinite(data)):
            raise NumericError("non-finite values produced")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- backward pass -----------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every requires_grad leaf."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar loss")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic -------------------------------------------

    @staticmethod
    def _coerce(other, like):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=like.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g, other.shape))

        return Tensor._result(data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g, other.shape))

        return Tensor._result(data, (self, other), backward)

    def __rsub__(self, other):
        return Tensor._coerce(other, self) - self

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(g * self.data, other.shape))

        return Tensor._result(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._coerce(other, self)
        data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accum(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-g * self.data / other.data**2, other.shape))

        return Tensor._result(data, (self, other), backward)

    def __rtruediv__(self, other):
        return Tensor._coerce(other, self) / self

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accum(-g)

        return Tensor._result(-self.data, (self,), backward)

    def __pow__(self, p):
        p = float(p)
        data = self.data**p

        def backward(g):
            if self.requires_grad:
                self._accum(g * p * self.data ** (p - 1))

        return Tensor._result(data, (self,), backward)

    def exp(self):
        data = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accum(g * data)

        return Tensor._result(data, (self,), backward)

    def log(self):
        def backward(g):
            if self.requires_grad:
                self._accum(g / self.data)

        return Tensor._result(np.log(self.data), (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accum(g * 0.5 / data)

        return Tensor._result(data, (self,), backward)

    # -- activations -------------------------------------------------------

    def leaky_relu(self, slope=0.01):
        mask = self.data > 0
        data = np.where(mask, self.data, self.data * slope)

        def backward(g):
            if self.requires_grad:
                self._accum(np.where(mask, g, g * slope))

        return Tensor._result(data, (self,), backward)

    def silu(self):
        x = self.data
        # exp only of non-positive values so large |x| cannot overflow
        ex = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
        data = self.data * sig

        def backward(g):
            if self.requires_grad:
                self._accum(g * (sig + self.data * sig * (1.0 - sig)))

        return Tensor._result(data, (self,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        return Tensor._result(data, (self,), backward)

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- shape manipulation ------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accum(g.reshape(old))

        return Tensor._result(data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def backward(g):
            if self.requires_grad:
                self._accum(g.transpose(inv))

        return Tensor._result(self.data.transpose(axes), (self,), backward)

    def swap_last(self):
        """Transpose the trailing two axes (matrix transpose of each batch)."""
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.transpose(axes)

    def take_flat(self, indices):
        """Gather flat elements; gradient scatters back to the picked slots."""
        indices = np.asarray(indices)
        flat = self.data.reshape(-1)
        data = flat[indices]

        def backward(g):
            if self.requires_grad:
                buf = np.zeros(self.size, dtype=self.data.dtype)
                np.add.at(buf, indices, g)
                self._accum(buf.reshape(self.shape))

        return Tensor._result(data, (self,), backward)

    # -- contractions ------------------------------------------------------

    def matmul(self, other):
        if self.shape[-1] != other.shape[-2]:
            raise DimensionError(
                f"matmul inner dims disagree: {self.shape} vs {other.shape}"
            )
        data = np.matmul(self.data, other.data)

        def backward(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accum(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accum(_unbroadcast(gb, other.shape))

        return Tensor._result(data, (self, other), backward)

    __matmul__ = matmul

    # -- softmax family ----------------------------------------------------

    def softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        data = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            if self.requires_grad:
                inner = (g * data).sum(axis=axis, keepdims=True)
                self._accum(data * (g - inner))

        return Tensor._result(data, (self,), backward)

    def log_softmax(self, axis=-1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        data = shifted - lse
        soft = np.exp(data)

        def backward(g):
            if self.requires_grad:
                self._accum(g - soft * g.sum(axis=axis, keepdims=True))

        return Tensor._result(data, (self,), backward)


# -- concat / split --------------------------------------------------------


def concat(tensors, axis):
    """Concatenate along `axis`; gradients route back to each segment."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != axis % len(ref) and a != b
            for i, (a, b) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError("concat extents disagree off the concat axis")
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def backward(g):
        offset = 0
        for t, s in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + s)
                t._accum(g[tuple(idx)])
            offset += s

    return Tensor._result(data, tuple(tensors), backward)


def split(x, sizes, axis):
    """Split into segments of the given sizes along `axis`."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(
            f"split sizes {sizes} do not sum to extent {x.shape[axis]}"
        )
    outs = []
    offset = 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(offset, offset + s)
        idx = tuple(idx)
        seg = x.data[idx]

        def backward(g, idx=idx):
            if x.requires_grad:
                if x.grad is None:
                    x.grad = np.zeros_like(x.data)
                x.grad[idx] += g

        outs.append(Tensor._result(seg.copy(), (x,), backward))
        offset += s
    return outs


def stack_params(values, dtype=np.float32, requires_grad=True):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=requires_grad)


# -- gradient checking -----------------------------------------------------


def gradcheck(fn, inputs, h=1e-5, rtol=1e-4):
    """Compare analytic gradients of scalar fn(*inputs) to central differences.

    Inputs must be float64 tensors with requires_grad. Returns the max
    relative error over all elements of all inputs.
    """
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        for t in inputs
    ]
    max_err = 0.0
    for t, ana in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(fn(*inputs).data)
            flat[i] = orig - h
            lo = float(fn(*inputs).data)
            flat[i] = orig
            fd = (hi - lo) / (2 * h)
            err = abs(ana.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            max_err = max(max_err, err)
    if max_err > rtol:
        raise AssertionError(f"gradcheck failed: max relative error {max_err:.3e}")
    return max_err
