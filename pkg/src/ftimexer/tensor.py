"""A small reverse-mode autodiff engine over float64 numpy arrays.

Operations on tensors that require gradients are recorded on a
:class:`GraphTape`. A tape is created lazily by the first recorded operation
of a forward pass and shared by everything derived from it; when results of
two tapes meet (e.g. a clean and a masked forward pass combined in one loss)
the tapes are merged. ``backward`` consumes the tape, so running it twice on
the same graph raises instead of silently reusing stale intermediates.

Broadcasting is deliberately narrow: elementwise binary operations require
equal shapes, except that a 1-D tensor may be added to the last axis of
another tensor (bias rows). Anything else goes through :func:`expand`.
"""
import math
import threading
from contextlib import contextmanager

import numpy as np

from . import spectral

__all__ = [
    "Tensor",
    "GraphTape",
    "TapeError",
    "tensor",
    "no_grad",
    "grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "relu",
    "gelu",
    "sigmoid",
    "tanh",
    "softmax",
    "layernorm",
    "concat",
    "transpose",
    "swapaxes",
    "reshape",
    "expand",
    "mean",
    "sum",
    "mse",
    "mae",
    "sum_squares",
    "dft",
    "idft_real",
    "modulus",
    "phasor",
]

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608...


class TapeError(RuntimeError):
    pass


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class GraphTape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._merged_into = None

    def root(self):
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        return tape

    def record(self, t):
        if self.consumed:
            raise TapeError("cannot extend a graph that has already been differentiated")
        self.nodes.append(t)

    def absorb(self, other):
        if other.consumed:
            raise TapeError("cannot combine with a graph that has already been differentiated")
        # Both lists are topologically ordered and independent, so appending keeps the order valid.
        self.nodes.extend(other.nodes)
        other.nodes = []
        other._merged_into = self

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "_parents", "_vjp")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None
        self._parents = ()
        self._vjp = None

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
    def is_leaf(self):
        return self._tape is None

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self):
        return backward(self)

    # Operator sugar. Python scalars are treated as constants.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return _add_const(self, -float(other))

    def __rsub__(self, other):
        return _add_const(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    """Create the result of an operation and record it when gradients are needed."""
    out = Tensor(data)
    if not grad_enabled():
        return out
    tracked = [p for p in parents if p.requires_grad]
    if not tracked:
        return out
    tape = None
    for p in tracked:
        if p._tape is None:
            continue
        other = p._tape.root()
        if tape is None:
            tape = other
        elif other is not tape:
            tape.absorb(other)
    if tape is None:
        tape = GraphTape()
    out.requires_grad = True
    out._parents = parents
    out._vjp = vjp
    out._tape = tape
    tape.record(out)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a dict mapping ``id(leaf)`` to the gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any tensor that requires gradients")
    if loss._tape is None:
        raise TapeError("loss is a leaf; nothing to differentiate")
    tape = loss._tape.root()
    if tape.consumed:
        raise TapeError("backward called twice on the same graph; run a new forward pass")
    if not tape.nodes:
        raise TapeError("empty tape")
    tape.consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    contributed = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is None:
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=np.float64)
                else:
                    parent.grad = parent.grad + pg
                key = id(parent)
                contributed[key] = contributed[key] + pg if key in contributed else np.array(pg)
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        node._parents = ()
        node._vjp = None
    tape.nodes = []
    return contributed


# ------------------------------------------------------------------ elementwise


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not match")


def _is_bias_row(a, b):
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.shape != b.shape


def _reduce_to_row(g, n):
    return g.reshape(-1, n).sum(axis=0)


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    if _is_bias_row(a, b):
        n = b.shape[0]
        return _make(a.data + b.data, (a, b), lambda g: (g, _reduce_to_row(g, n)))
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    if _is_bias_row(a, b):
        n = b.shape[0]
        return _make(a.data - b.data, (a, b), lambda g: (g, -_reduce_to_row(g, n)))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float):
    a = _wrap(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def neg(a):
    return scale(a, -1.0)


def _add_const(a, c: float):
    return _make(a.data + c, (a,), lambda g: (g,))


def relu(x):
    x = _wrap(x)
    on = x.data > 0
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def gelu(x):
    """Tanh approximation of GELU."""
    x = _wrap(x)
    xd = x.data
    x2 = xd * xd
    inner = GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def vjp(g):
        d_inner = GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * d_inner),)

    return _make(out, (x,), vjp)


def sigmoid(x):
    x = _wrap(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = _wrap(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out**2),))


def _abs(x):
    x = _wrap(x)
    sgn = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sgn,))


# ---------------------------------------------------------------------- linear


def matmul(a, b):
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k = ad.shape[-1]

        def vjp(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(ad @ bd, (a, b), vjp)
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")

    def vjp_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), vjp_batched)


# ------------------------------------------------------------------ reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-D tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def sum(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))

    def vjp(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)

    return _make(x.data.sum(axis=axes, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    x = _wrap(x)
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    if count == 0:
        raise ValueError("mean over an empty axis")
    return scale(sum(x, axis, keepdims), 1.0 / count)


def sum_squares(x):
    x = _wrap(x)
    xd = x.data
    return _make(np.sum(xd * xd), (x,), lambda g: (2.0 * g * xd,))


def mse(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mse")
    if a.size == 0:
        raise ValueError("mse of empty tensors")
    diff = a.data - b.data
    n = diff.size
    return _make(np.mean(diff * diff), (a, b), lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


def mae(a, b):
    a, b = _wrap(a), _wrap(b)
    _check_same(a, b, "mae")
    if a.size == 0:
        raise ValueError("mae of empty tensors")
    return mean(_abs(sub(a, b)))


# ------------------------------------------------------------------- structure


def reshape(x, shape):
    x = _wrap(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = _wrap(x)
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x, a1, a2):
    x = _wrap(x)
    return _make(np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def expand(x, shape):
    """Explicit broadcast (numpy rules); the gradient sums over the broadcast axes."""
    x = _wrap(x)
    shape = tuple(shape)
    src = x.shape
    lead = len(shape) - len(src)
    if lead < 0:
        raise ValueError(f"cannot expand {src} to fewer dimensions {shape}")
    for s, t in zip(src, shape[lead:]):
        if s != t and s != 1:
            raise ValueError(f"cannot expand {src} to {shape}")

    def vjp(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(np.broadcast_to(x.data, shape).copy(), (x,), vjp)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of nothing")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), vjp)


def _getitem(x, idx):
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(x.data[idx]), (x,), vjp)


# --------------------------------------------------------------- normalisation


def softmax(x, axis=-1):
    x = _wrap(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis (population variance), then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("layernorm over an empty last axis")
    if eps <= 0:
        raise ValueError("eps must be positive")
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ValueError(f"gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _reduce_to_row(g * xhat, n), _reduce_to_row(g, n)

    return _make(xhat * gd + bias.data, (x, gain, bias), vjp)


# -------------------------------------------------------------------- spectral
#
# Complex arrays are carried as real tensors with an extra axis of size 2 just
# before the transform axis: ``z[..., 0, :]`` is the real part and
# ``z[..., 1, :]`` the imaginary part.


def dft(x):
    """Unnormalised DFT along the last axis: ``(..., n) -> (..., 2, n)``."""
    x = _wrap(x)
    shape = x.shape
    n = shape[-1]
    re, im = spectral.dft_rows(x.data.reshape(-1, n))
    out = np.stack([re, im], axis=1).reshape(shape[:-1] + (2, n))

    def vjp(g):
        g = g.reshape(-1, 2, n)
        # re_k = sum x cos, im_k = -sum x sin, so the adjoint is Re(sum_k (g_re + i g_im) e^{+i theta}).
        back, _ = spectral.dft_rows(g[:, 0], g[:, 1], inverse=True)
        return (back.reshape(shape),)

    return _make(out, (x,), vjp)


def idft_real(z):
    """Real part of the 1/n-normalised inverse DFT: ``(..., 2, n) -> (..., n)``."""
    z = _wrap(z)
    if z.ndim < 2 or z.shape[-2] != 2:
        raise ValueError(f"expected a (..., 2, n) complex tensor, got {z.shape}")
    shape = z.shape
    n = shape[-1]
    flat = z.data.reshape(-1, 2, n)
    re, _ = spectral.dft_rows(flat[:, 0], flat[:, 1], inverse=True)
    out = (re / n).reshape(shape[:-2] + (n,))

    def vjp(g):
        g_re, g_im = spectral.dft_rows(g.reshape(-1, n))
        return (np.stack([g_re, g_im], axis=1).reshape(shape) / n,)

    return _make(out, (z,), vjp)


def modulus(z):
    """Per-bin amplitude of a ``(..., 2, n)`` complex tensor.

    The gradient is taken as zero where the amplitude is below
    ``spectral.AMPLITUDE_FLOOR``.
    """
    z = _wrap(z)
    re, im = z.data[..., 0, :], z.data[..., 1, :]
    amp = np.hypot(re, im)
    safe = amp >= spectral.AMPLITUDE_FLOOR
    inv = np.where(safe, 1.0 / np.where(safe, amp, 1.0), 0.0)

    def vjp(g):
        return (np.stack([g * re * inv, g * im * inv], axis=-2),)

    return _make(amp, (z,), vjp)


def phasor(z):
    """Unit phasor ``z / |z|`` (i.e. ``cos(phase), sin(phase)``), ``(1, 0)`` at the origin."""
    z = _wrap(z)
    re, im = z.data[..., 0, :], z.data[..., 1, :]
    amp = np.hypot(re, im)
    safe = amp >= spectral.AMPLITUDE_FLOOR
    inv = np.where(safe, 1.0 / np.where(safe, amp, 1.0), 0.0)
    u_re = np.where(safe, re * inv, 1.0)
    u_im = im * inv
    out = np.stack([u_re, u_im], axis=-2)

    def vjp(g):
        g_re, g_im = g[..., 0, :], g[..., 1, :]
        # d(z/|z|) removes the radial component and scales by 1/|z|.
        radial = g_re * u_re + g_im * u_im
        return (np.stack([(g_re - radial * u_re) * inv, (g_im - radial * u_im) * inv], axis=-2),)

    return _make(out, (z,), vjp)
