"""Minimal reverse-mode differentiation on dense float64 arrays.

A ``Tape`` records operations in execution order; ``backward`` replays the
record in reverse. The engine covers exactly the operations the MIL network,
the graph attention layers and the two self-supervised losses need. No
broadcasting rules beyond numpy's, no higher-order derivatives, no GPU.
"""

from __future__ import annotations

import numpy as np


class Tape:
    """Ordered record of differentiable operations.

    Each entry is ``(output_tensor, pull_fn)`` where ``pull_fn(grad, pending)``
    distributes the output gradient to the operation's inputs. Reverse
    traversal of the append order is a valid reverse topological order because
    every input of a recorded op was created before the op ran.
    """

    def __init__(self):
        self._entries = []

    def record(self, out, pull_fn):
        self._entries.append((out, pull_fn))

    def __len__(self):
        return len(self._entries)


class Tensor:
    """Dense float64 array, optionally participating in a tape.

    ``grad`` accumulates across repeated ``backward`` calls until reset to
    ``None``. A tensor whose ``tape`` is ``None`` never receives gradients.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, tape={self.tape is not None})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*tensors):
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _accum(pending, tensor, grad):
    """Queue a gradient contribution for this backward traversal."""
    if not isinstance(tensor, Tensor) or tensor.tape is None:
        return
    key = id(tensor)
    if key in pending:
        pending[key] = (tensor, pending[key][1] + grad)
    else:
        pending[key] = (tensor, np.array(grad, dtype=np.float64, copy=True))


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    grad = np.asarray(grad, dtype=np.float64)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(loss):
    """Propagate d(loss)/d(x) to every tape-registered tensor.

    Gradients accumulate into ``.grad``; call sites reset ``.grad`` between
    optimization steps. Repeated calls without reset sum their contributions.
    """
    if not isinstance(loss, Tensor) or loss.tape is None:
        raise ValueError("backward requires a tape-registered Tensor loss")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    pending = {}
    pending[id(loss)] = (loss, np.ones_like(loss.data))
    for out, pull in reversed(loss.tape._entries):
        item = pending.pop(id(out), None)
        if item is None:
            continue
        _, g = item
        out.grad = g if out.grad is None else out.grad + g
        pull(g, pending)
    for _, (t, g) in pending.items():
        t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data + b.data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, _unbroadcast(g, a.data.shape))
            _accum(pending, b, _unbroadcast(g, b.data.shape))
        tape.record(out, pull)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data - b.data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, _unbroadcast(g, a.data.shape))
            _accum(pending, b, _unbroadcast(-g, b.data.shape))
        tape.record(out, pull)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data * b.data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, _unbroadcast(g * b.data, a.data.shape))
            _accum(pending, b, _unbroadcast(g * a.data, b.data.shape))
        tape.record(out, pull)
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _tape_of(a, b)
    out = Tensor(a.data / b.data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, _unbroadcast(g / b.data, a.data.shape))
            _accum(pending, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
        tape.record(out, pull)
    return out


def neg(a):
    return mul(a, -1.0)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    tape = _tape_of(a, b)
    out = Tensor(a.data @ b.data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g @ b.data.T)
            _accum(pending, b, a.data.T @ g)
        tape.record(out, pull)
    return out


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected a 2-D tensor, got shape {a.data.shape}")
    tape = _tape_of(a)
    out = Tensor(a.data.T.copy(), tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g.T)
        tape.record(out, pull)
    return out


def reshape(a, shape):
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.reshape(shape), tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g.reshape(a.data.shape))
        tape.record(out, pull)
    return out


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    tape = _tape_of(*tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tape)
    if tape is not None:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def pull(g, pending):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(pending, t, piece)
        tape.record(out, pull)
    return out


def gather_rows(a, idx):
    """Select rows ``a[idx]``; the adjoint scatter-adds back."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    tape = _tape_of(a)
    out = Tensor(a.data[idx], tape)
    if tape is not None:
        def pull(g, pending):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(pending, a, ga)
        tape.record(out, pull)
    return out


def scatter_sum(a, idx, num_rows):
    """Sum rows of ``a`` into ``num_rows`` buckets given by ``idx``."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    tape = _tape_of(a)
    data = np.zeros((num_rows,) + a.data.shape[1:], dtype=np.float64)
    np.add.at(data, idx, a.data)
    out = Tensor(data, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g[idx])
        tape.record(out, pull)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def relu(a):
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.maximum(a.data, 0.0), tape)
    if tape is not None:
        mask = (a.data > 0).astype(np.float64)
        def pull(g, pending):
            _accum(pending, a, g * mask)
        tape.record(out, pull)
    return out


def leaky_relu(a, slope=0.2):
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.where(a.data > 0, a.data, slope * a.data), tape)
    if tape is not None:
        deriv = np.where(a.data > 0, 1.0, slope)
        def pull(g, pending):
            _accum(pending, a, g * deriv)
        tape.record(out, pull)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    tape = _tape_of(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(s, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g * s * (1.0 - s))
        tape.record(out, pull)
    return out


def exp(a):
    a = _as_tensor(a)
    tape = _tape_of(a)
    e = np.exp(a.data)
    out = Tensor(e, tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g * e)
        tape.record(out, pull)
    return out


def log(a):
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.log(a.data), tape)
    if tape is not None:
        def pull(g, pending):
            _accum(pending, a, g / a.data)
        tape.record(out, pull)
    return out


def clip(a, lo, hi):
    """Clamp values; gradient passes through the interior, zero outside."""
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(np.clip(a.data, lo, hi), tape)
    if tape is not None:
        mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
        def pull(g, pending):
            _accum(pending, a, g * mask)
        tape.record(out, pull)
    return out


def softmax(a, axis=-1):
    """Numerically stable softmax; subtracts the per-axis max before exp."""
    a = _as_tensor(a)
    if a.data.shape[axis] < 1:
        raise ValueError(f"softmax: axis length must be >= 1, got shape {a.data.shape}")
    tape = _tape_of(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, tape)
    if tape is not None:
        def pull(g, pending):
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(pending, a, s * (g - dot))
        tape.record(out, pull)
    return out


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    tape = _tape_of(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), tape)
    if tape is not None:
        def pull(g, pending):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(pending, a, np.broadcast_to(g, a.data.shape).copy())
        tape.record(out, pull)
    return out


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return div(tsum(a, axis=axis, keepdims=keepdims), float(n))


def l2_normalize(a, axis=-1, eps=1e-12):
    """Divide by the L2 norm along ``axis`` (norm floored at ``eps``)."""
    a = _as_tensor(a)
    tape = _tape_of(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    y = a.data / norm
    out = Tensor(y, tape)
    if tape is not None:
        def pull(g, pending):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(pending, a, (g - y * dot) / norm)
        tape.record(out, pull)
    return out


def affine(x, w, b):
    """x @ w + b for 2-D x, the ubiquitous dense-layer building block."""
    return add(matmul(x, w), b)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable closing over ``params`` (a list of
    Tensors); it must build its computation on the tape each parameter is
    attached to at call time and return a scalar Tensor.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    tape = Tape()
    for p in params:
        p.tape = tape
        p.grad = None
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise FloatingPointError("grad_check: non-finite loss in analytic pass")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.tape = None
        p.grad = None

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = float(f().data)
            flat[j] = orig - step
            lo = float(f().data)
            flat[j] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(
                    f"grad_check: non-finite evaluation at parameter {pi}, element {j}")
            numeric = (hi - lo) / (2.0 * step)
            exact = analytic[pi].reshape(-1)[j]
            denom = max(abs(exact), abs(numeric), 1e-12)
            worst = max(worst, abs(exact - numeric) / denom)
    return worst
