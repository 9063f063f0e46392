"""Dense float64 tensors with reverse-mode automatic differentiation.

Small on purpose: 2-D (plus 0-/1-D) row-major arrays, the handful of ops an
MLP classifier with two linear heads needs, and a closure-based backward pass.
No broadcasting beyond adding a length-K row vector to a B x K matrix.
"""
from __future__ import annotations

import contextlib

import numpy as np

# Finite-value guard after every op. On by default; stripped under `python -O`
# like an assert, since it exists to catch construction mistakes early.
GUARD_FINITE = __debug__

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class TargetError(ValueError):
    """A soft-target row is not a probability vector."""


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, opname):
    if GUARD_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{opname}: non-finite values in result")


class Tensor:
    """N-d float64 array with optional gradient tracking.

    `data` is always a C-contiguous float64 ndarray. `grad` is allocated
    lazily by the backward pass and accumulates until `zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad = None
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate grads of every tracked leaf with d(self)/d(leaf).

        Only valid on scalars (size-1 tensors). Leaf grads accumulate across
        repeated calls; intermediate grads are recomputed fresh each call.
        """
        if self.data.size != 1:
            raise RuntimeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        visited = {id(self)}
        stack = [(self, iter(self._prev))]
        while stack:
            node, children = stack[-1]
            nxt = next((c for c in children if id(c) not in visited), None)
            if nxt is None:
                stack.pop()
                topo.append(node)
            else:
                visited.add(id(nxt))
                stack.append((nxt, iter(nxt._prev)))
        # Interior nodes get fresh buffers; leaves keep accumulating.
        for node in topo:
            if node._prev and node is not self:
                node.grad = np.zeros_like(node.data)
        if self._prev:
            self.grad = np.ones_like(self.data)
        else:
            self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        row_bias = (
            self.data.ndim == 2
            and other.data.ndim == 1
            and self.data.shape[1] == other.data.shape[0]
        )
        if not row_bias and self.data.shape != other.data.shape:
            raise ShapeError(f"add: shapes {self.data.shape} and {other.data.shape}")
        out = _track(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def _bwd():
                if self.requires_grad:
                    self._accumulate(out.grad)
                if other.requires_grad:
                    g = out.grad.sum(axis=0) if row_bias else out.grad
                    other._accumulate(g)
            out._backward = _bwd
        return out

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            c = float(other)
            out = _track(self.data * c, (self,), "mul")
            if out.requires_grad:
                def _bwd():
                    self._accumulate(c * out.grad)
                out._backward = _bwd
            return out
        if self.data.shape != other.data.shape:
            raise ShapeError(f"mul: shapes {self.data.shape} and {other.data.shape}")
        out = _track(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def _bwd():
                if self.requires_grad:
                    self._accumulate(other.data * out.grad)
                if other.requires_grad:
                    other._accumulate(self.data * out.grad)
            out._backward = _bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        out = _track(self.data.sum(), (self,), "sum")
        if out.requires_grad:
            def _bwd():
                self._accumulate(np.full_like(self.data, float(out.grad)))
            out._backward = _bwd
        return out

    def transpose(self):
        if self.data.ndim != 2:
            raise ShapeError(f"transpose: expected 2-d tensor, got {self.data.shape}")
        out = _track(self.data.T, (self,), "transpose")
        if out.requires_grad:
            def _bwd():
                self._accumulate(out.grad.T)
            out._backward = _bwd
        return out

    @property
    def T(self):
        return self.transpose()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _track(data, prev, opname):
    """Wrap an op result, wiring graph edges when tracking is on."""
    _check_finite(data, opname)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = tuple(prev)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-d matrix product with gradient accumulation into both sides."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for {a.data.shape} @ {b.data.shape}"
        )
    out = _track(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                a._accumulate(out.grad @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ out.grad)
        out._backward = _bwd
    return out


def relu(x: Tensor) -> Tensor:
    out = _track(np.maximum(x.data, 0.0), (x,), "relu")
    if out.requires_grad:
        mask = x.data > 0.0
        def _bwd():
            x._accumulate(mask * out.grad)
        out._backward = _bwd
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)), computed branch-wise so neither tail overflows."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = _track(s, (x,), "sigmoid")
    if out.requires_grad:
        def _bwd():
            x._accumulate(s * (1.0 - s) * out.grad)
        out._backward = _bwd
    return out


def _softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if z.data.ndim != 2 or z.data.shape[1] < 2:
        raise ShapeError(f"softmax_rows: expected B x K with K >= 2, got {z.data.shape}")
    p = _softmax(z.data)
    out = _track(p, (z,), "softmax_rows")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            z._accumulate(p * (g - (g * p).sum(axis=1, keepdims=True)))
        out._backward = _bwd
    return out


def log_softmax_rows(z: Tensor) -> Tensor:
    """Row-wise log-softmax; the numerically safe path into cross-entropy."""
    if z.data.ndim != 2 or z.data.shape[1] < 2:
        raise ShapeError(
            f"log_softmax_rows: expected B x K with K >= 2, got {z.data.shape}"
        )
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = _track(logp, (z,), "log_softmax_rows")
    if out.requires_grad:
        p = np.exp(logp)
        def _bwd():
            g = out.grad
            z._accumulate(g - p * g.sum(axis=1, keepdims=True))
        out._backward = _bwd
    return out


def soft_cross_entropy(targets, log_probs: Tensor) -> Tensor:
    """Batch-mean cross-entropy -sum(q * log p) against soft targets.

    Differentiable with respect to both arguments: gradients flow into the
    targets when they are a tracked tensor (a learned smoothing distribution),
    and into the predictions always.
    """
    q = targets if isinstance(targets, Tensor) else Tensor(targets)
    if q.data.shape != log_probs.data.shape or q.data.ndim != 2:
        raise ShapeError(
            f"soft_cross_entropy: targets {q.data.shape} vs log_probs {log_probs.data.shape}"
        )
    sums = q.data.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
    if bad.size:
        i = int(bad[0])
        raise TargetError(f"target row {i} sums to {float(sums[i])!r}, expected 1")
    if np.any(q.data < -1e-12):
        i = int(np.argmin(q.data.min(axis=1)))
        raise TargetError(f"target row {i} has a negative entry")
    batch = q.data.shape[0]
    out = _track(-(q.data * log_probs.data).sum() / batch, (q, log_probs), "soft_ce")
    if out.requires_grad:
        def _bwd():
            g = float(out.grad) / batch
            if q.requires_grad:
                q._accumulate(-g * log_probs.data)
            if log_probs.requires_grad:
                log_probs._accumulate(-g * q.data)
        out._backward = _bwd
    return out
