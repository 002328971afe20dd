"""Reverse-mode automatic differentiation over dense numpy tensors.

A Tensor wraps a float32/float64 numpy array of up to 4 dims (N, C, H, W
convention for images). Differentiable operations record themselves on a
thread-local Tape in execution order; ``backward`` replays the tape in
reverse, accumulating gradients into every tensor that requires them, and
frees the tape. One tape per forward pass; tapes never cross threads.

Shape discipline is strict: no implicit broadcasting except a scalar
(size-1) operand against a tensor.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ValueError(f"tensors support at most 4 dims, got {arr.ndim}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self):
        return tensor_sum(self)


def _as_tensor(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Tape:
    """Execution-ordered record of differentiable ops for one forward pass.

    Each entry holds the output tensor, the input tensors, and a rule that
    maps the output gradient to per-input gradients. Entries are appended
    in execution order, so inputs always precede their consumers.
    """

    __slots__ = ("entries", "output_ids")

    def __init__(self):
        self.entries = []
        self.output_ids = set()

    def record(self, out, inputs, backward_fn):
        self.entries.append((out, inputs, backward_fn))
        self.output_ids.add(id(out))

    def __len__(self):
        return len(self.entries)


_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.grad_enabled = True
    return _state


def active_tape():
    """Return the tape recording in this thread, or None."""
    return _tls().tape


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation)."""
    st = _tls()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


def record(out_data, inputs, backward_fn):
    """Wrap ``out_data`` in a Tensor, recording ``backward_fn`` if any input
    requires a gradient and recording is enabled.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    input, in order. This is the extension point layer ops use to register
    fused backward rules.
    """
    st = _tls()
    track = st.grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        if st.tape is None:
            st.tape = Tape()
        st.tape.record(out, tuple(inputs), backward_fn)
    return out


def backward(root):
    """Populate ``grad`` on every requires-grad tensor reachable from ``root``.

    ``root`` must be a scalar produced on the active tape. Gradients from
    multiple consumers accumulate. The tape is freed afterwards.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor root")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    st = _tls()
    tape = st.tape
    if tape is None or id(root) not in tape.output_ids:
        raise RuntimeError("root is not attached to the active tape (detached graph or already freed)")

    grads = {id(root): np.ones_like(root.data)}
    holders = {id(root): root}
    for out, inputs, backward_fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        holders.pop(id(out), None)
        input_grads = backward_fn(g)
        for t, gt in zip(inputs, input_grads):
            if gt is None or not t.requires_grad:
                continue
            tid = id(t)
            if tid in grads:
                # out-of-place: backward rules may return shared arrays
                grads[tid] = grads[tid] + gt
            else:
                grads[tid] = gt
                holders[tid] = t

    # holders now contains only leaves: every on-tape output was popped
    # when its producing entry was replayed
    for tid, t in holders.items():
        g = grads.get(tid)
        if g is None:
            continue
        if t.grad is None:
            t.grad = g
        else:
            t.grad = t.grad + g
    if root.grad is None:
        root.grad = np.ones_like(root.data)

    st.tape = None


def _check_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(t):
    return t.data.size == 1


def add(a, b):
    """Elementwise sum. Shapes must match exactly, or one side is a scalar."""
    scalar_a, scalar_b = _is_scalar(a), _is_scalar(b)
    if a.data.shape != b.data.shape and not (scalar_a or scalar_b):
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward_fn(g):
        ga = g.sum().reshape(a.data.shape) if (scalar_a and g.shape != a.data.shape) else g
        gb = g.sum().reshape(b.data.shape) if (scalar_b and g.shape != b.data.shape) else g
        return ga, gb

    return record(out, (a, b), backward_fn)


def mul(a, b):
    """Elementwise product with the same shape rules as ``add``."""
    scalar_a, scalar_b = _is_scalar(a), _is_scalar(b)
    if a.data.shape != b.data.shape and not (scalar_a or scalar_b):
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad * bd

    def backward_fn(g):
        ga = g * bd
        gb = g * ad
        if scalar_a and ga.shape != ad.shape:
            ga = ga.sum().reshape(ad.shape)
        if scalar_b and gb.shape != bd.shape:
            gb = gb.sum().reshape(bd.shape)
        return ga, gb

    return record(out, (a, b), backward_fn)


def tensor_sum(x):
    """Sum of all elements, as a scalar tensor."""
    xd = x.data
    out = np.asarray(xd.sum(dtype=xd.dtype))

    def backward_fn(g):
        return (np.full_like(xd, g.item()),)

    return record(out, (x,), backward_fn)


def matmul(a, b):
    """Matrix product of 2-D tensors [m,k] x [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims disagree {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward_fn)


def reshape(x, shape):
    """Same data, new shape; element counts must agree."""
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ValueError(f"reshape: cannot view {x.shape} as {shape}")
    old_shape = x.data.shape
    out = x.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(old_shape),)

    return record(out, (x,), backward_fn)


def permute(x, axes):
    """Reorder dims (differentiable transpose); returns a contiguous copy."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ValueError(f"permute: invalid axes {axes} for ndim {x.data.ndim}")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))

    def backward_fn(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return record(out, (x,), backward_fn)


def concat_channels(a, b, axis=1):
    """Stack two tensors along the channel axis; all other dims must agree."""
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    axis = axis % a.data.ndim
    for d in range(a.data.ndim):
        if d != axis and a.data.shape[d] != b.data.shape[d]:
            raise ValueError(f"concat: non-channel dims disagree {a.shape} vs {b.shape}")
    na = a.data.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def backward_fn(g):
        ga, gb = np.split(g, [na], axis=axis)
        return np.ascontiguousarray(ga), np.ascontiguousarray(gb)

    return record(out, (a, b), backward_fn)


def leaky_relu(x, slope):
    """y = x for x >= 0 else slope * x, with slope in (0, 1)."""
    slope = float(slope)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    xd = x.data
    one = xd.dtype.type(1)
    s = xd.dtype.type(slope)
    # derivative at exactly 0 takes the positive branch; the multiplier
    # doubles as forward scale and backward mask
    mult = np.where(xd >= 0, one, s)
    out = xd * mult

    def backward_fn(g):
        return (g * mult,)

    return record(out, (x,), backward_fn)


def sigmoid(x):
    """Logistic function, numerically stable, output clamped into (0, 1)."""
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    np.exp(-np.abs(xd), out=out)
    out_pos = 1.0 / (1.0 + out)
    out = np.where(pos, out_pos, 1.0 - out_pos)
    # keep the open interval even where float rounding saturates
    fi = np.finfo(xd.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)
    y = out

    def backward_fn(g):
        return (g * (y * (1.0 - y)),)

    return record(out, (x,), backward_fn)


def mse_loss(pred, target):
    """Mean over all elements of squared difference, as a scalar."""
    _check_same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    flat = diff.reshape(-1)
    out = np.asarray(np.einsum("i,i->", flat, flat, dtype=np.float64) / n, dtype=diff.dtype)

    def backward_fn(g):
        scale = g.item() * 2.0 / n
        gp = (scale * diff).astype(diff.dtype) if pred.requires_grad else None
        gt = (-scale * diff).astype(diff.dtype) if target.requires_grad else None
        return gp, gt

    return record(out, (pred, target), backward_fn)


def grad_check(fn, inputs, eps=1e-5, sample=None, rng=None):
    """Compare analytic gradients of ``fn(*inputs)`` against central
    finite differences.

    ``fn`` must return a scalar tensor. Inputs should be float64 for tight
    tolerances. ``sample`` limits the probed coordinates per input to a
    random subset (for large parameter sets). Returns the max relative
    error with denominator max(|analytic|, |numeric|, 1e-12).
    """
    eps = float(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued fn")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t in inputs:
        t.grad = None

    if rng is None:
        rng = np.random.default_rng(0)

    def eval_scalar():
        with no_grad():
            return float(fn(*inputs).data)

    max_rel = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        gflat = ga.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = eval_scalar()
            flat[i] = orig - eps
            f_minus = eval_scalar()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(gflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            max_rel = max(max_rel, rel)
    return max_rel
