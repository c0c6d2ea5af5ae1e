"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous numpy array.  Operations on tensors
that require gradients record a :class:`Node` holding the op tag, the input
tensors and a closure that maps the output gradient to input gradients.
:meth:`Tensor.backward` replays the recorded nodes in reverse recording
order, which is a valid reverse topological order because a node can only
consume tensors that already existed when it was recorded.

float32 is the working precision; float64 arrays are kept as float64 so the
finite-difference checker can run the very same ops at double precision.
"""

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GraphError, NonFiniteError, ShapeError

_seq = itertools.count()
_local = threading.local()


def is_grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Run the enclosed ops without recording a graph (thread-local)."""
    prev = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq")

    def __init__(self, op, inputs, backward_fn):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


def _contiguous(arr):
    # np.ascontiguousarray promotes 0-d arrays to 1-d
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _float_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return _contiguous(arr)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = _float_array(data, dtype)
        if any(d == 0 for d in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t.node = None
        return t

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor._wrap(self.data)

    def zero_grad(self):
        self.grad = None

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------
    def backward(self):
        """Populate ``.grad`` of every requires-grad tensor reachable from this scalar."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that does not require grad")
        order, seen, stack = [], set(), [self]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            order.append(t)
            stack.extend(t.node.inputs)
        order.sort(key=lambda t: t.node.seq, reverse=True)

        pending = {id(self): np.ones_like(self.data)}
        for t in order:
            g = pending.pop(id(t), None)
            if g is None:
                continue
            t.grad = g
            for inp, gi in zip(t.node.inputs, t.node.backward_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    gi = np.asarray(gi, dtype=inp.dtype)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    pending[key] = gi if key not in pending else pending[key] + gi
        if self.node is None:
            self.grad = np.ones_like(self.data)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _make(op, data, inputs, backward_fn):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(_contiguous(np.asarray(data)))
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor._wrap(_float_array(x, dtype))


def _pair(a, b, broadcast=True):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    if broadcast:
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _make("div", data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        data = a.data ** p
    return _make("pow", data, (a,), lambda g: (g * p * a.data ** (p - 1),))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def matmul(a, b):
    """Matrix product; leading axes of ``a`` (and of ``b`` when it has them) are batch axes."""
    a, b = _pair(a, b, broadcast=False)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        db = None
        if b.requires_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                db = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return da, db

    return _make("matmul", np.matmul(a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x):
    return _make("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x, alpha=0.2):
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make("leaky_relu", x.data * slope, (x,), lambda g: (g * slope,))


def _sigmoid(v):
    # tanh form: no overflow, sigmoid(0) == 0.5 exactly
    return 0.5 * (np.tanh(0.5 * v) + 1.0)


def sigmoid(x):
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def tanh(x):
    t = np.tanh(x.data)
    return _make("tanh", t, (x,), lambda g: (g * (1 - t * t),))


def softmax(x):
    """Softmax over the last axis, with the row max subtracted first."""
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", s, (x,),
                 lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


ACTIVATIONS = {
    None: lambda x: x,
    "linear": lambda x: x,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
}


def activation(x, kind):
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# convolution and pooling (channel-last layout)
# ---------------------------------------------------------------------------

def _pad_hw(arr, pad):
    if not pad:
        return arr
    return np.pad(arr, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """Cross-correlation of ``x[N,H,W,Cin]`` with ``kernel[Kh,Kw,Cin,Cout]`` plus bias.

    ``pad`` zero-pads both spatial borders; the default 0 is valid padding.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(f"conv2d kernel {kernel.shape[:2]} larger than input {(hp, wp)}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({cout},)")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    cols = _kernels.im2col(_pad_hw(x.data, pad), kh, kw, stride, ho, wo).reshape(-1, kh * kw * cin)
    kmat = kernel.data.reshape(-1, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out += bias.data

    def bw(g):
        g2 = g.reshape(-1, cout)
        dx = dk = db = None
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            dx = _kernels.col2im(dcols, hp, wp, stride)
            if pad:
                dx = dx[:, pad:pad + h, pad:pad + w]
        if kernel.requires_grad:
            dk = (cols.T @ g2).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            db = g2.sum(axis=0)
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d", out, inputs, bw)


def conv2d_transpose(x, kernel, bias=None, stride=1, pad=0):
    """Adjoint of :func:`conv2d`: ``x[N,H,W,Cin]``, ``kernel[Kh,Kw,Cout,Cin]``.

    Output extent is ``(H - 1) * stride - 2 * pad + Kh``.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    n, h, w, cin = x.shape
    kh, kw, cout, kcin = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d_transpose channel mismatch: input {x.shape}, kernel {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be >= 1 and pad >= 0")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    ho, wo = hf - 2 * pad, wf - 2 * pad
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d_transpose output extent ({ho}, {wo}) is not positive")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d_transpose bias shape {bias.shape} != ({cout},)")

    kmat = kernel.data.reshape(kh * kw * cout, cin)
    xflat = x.data.reshape(-1, cin)
    cols = (xflat @ kmat.T).reshape(n, h, w, kh, kw, cout)
    out = _kernels.col2im(cols, hf, wf, stride)
    if pad:
        out = out[:, pad:pad + ho, pad:pad + wo]
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data

    def bw(g):
        gfull = g
        if pad:
            gfull = np.zeros((n, hf, wf, cout), dtype=g.dtype)
            gfull[:, pad:pad + ho, pad:pad + wo] = g
        gcols = _kernels.im2col(np.ascontiguousarray(gfull), kh, kw, stride, h, w).reshape(-1, kh * kw * cout)
        dx = (gcols @ kmat).reshape(x.shape) if x.requires_grad else None
        dk = (gcols.T @ xflat).reshape(kernel.shape) if kernel.requires_grad else None
        db = g.sum(axis=(0, 1, 2)) if bias is not None and bias.requires_grad else None
        return dx, dk, db

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make("conv2d_transpose", out, inputs, bw)


def maxpool2d(x):
    """2x2 max pooling, stride 2; a trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs spatial extent >= 2, got {(h, w)}")
    out, idx = _kernels.maxpool_fwd(x.data)
    return _make("maxpool2d", out, (x,),
                 lambda g: (_kernels.maxpool_bwd(np.ascontiguousarray(g), idx, h, w),))


# ---------------------------------------------------------------------------
# normalization, dropout, loss
# ---------------------------------------------------------------------------

def _normalize_bw(g, xhat, inv, gamma, axes):
    dxhat = g * gamma
    m1 = dxhat.mean(axis=axes, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=axes, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each vector along the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    red = tuple(range(x.ndim - 1))

    def bw(g):
        dx = _normalize_bw(g, xhat, inv, gamma.data, -1) if x.requires_grad else None
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _make("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def batch_norm(x, gamma, beta, eps=1e-5, stats=None):
    """Normalize over every axis but the last.

    With ``stats=None`` the batch statistics are used (and returned so the
    caller can update running averages); otherwise ``stats=(mean, var)`` is
    treated as a constant.  Returns ``(out, mean, var)``.
    """
    red = tuple(range(x.ndim - 1))
    if stats is None:
        mu = x.data.mean(axis=red)
        var = x.data.var(axis=red)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv

        def bw(g):
            dx = _normalize_bw(g, xhat, inv, gamma.data, red) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=red), g.sum(axis=red)
    else:
        mu, var = stats
        inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        xhat = (x.data - mu.astype(x.dtype)) * inv

        def bw(g):
            return g * gamma.data * inv, (g * xhat).sum(axis=red), g.sum(axis=red)

    out = _make("batch_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bw)
    return out, mu, var


def dropout(x, rate, rng, training=True):
    """Inverted dropout: keep with probability ``1 - rate`` and rescale by ``1 / (1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    mask = (keep / (1.0 - rate)).astype(x.dtype)
    return _make("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def bce(pred, labels, eps=1e-7):
    """Mean binary cross-entropy with predictions clipped to ``[eps, 1 - eps]``.

    The clip is treated as straight-through in the backward pass so a
    saturated wrong prediction still receives a gradient.
    """
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if pred.size == 0 or y.size != pred.size:
        raise ShapeError(f"bce needs matching non-empty inputs, got {pred.shape} and {y.shape}")
    y = y.reshape(pred.shape)
    p = np.clip(pred.data.astype(np.float64), eps, 1.0 - eps)
    n = p.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p))

    def bw(g):
        return ((g * (p - y) / (p * (1 - p)) / n).astype(pred.dtype),)

    return _make("bce", np.asarray(loss, dtype=pred.dtype), (pred,), bw)


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def grad_check(fn, inputs, tol=1e-4, h=1e-4, floor=1e-3, seed=0):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``inputs`` is an array or a sequence of arrays; they are promoted to
    float64.  A non-scalar output is reduced with fixed random weights so the
    whole Jacobian is exercised.  The error of each element is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    if isinstance(inputs, (np.ndarray, Tensor)) or np.isscalar(inputs):
        inputs = [inputs]
    arrays = [np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    weights = None

    def scalar(arrs, track):
        nonlocal weights
        ts = [Tensor(a, requires_grad=track, dtype=np.float64) for a in arrs]
        out = fn(*ts)
        if weights is None:
            weights = rng.uniform(0.5, 1.5, size=out.shape)
        return ts, tsum(mul(out, weights))

    ts, loss = scalar(arrays, True)
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    errors = []
    with no_grad():
        for a, ga in zip(arrays, analytic):
            num = np.zeros_like(a)
            flat, nflat = a.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = scalar(arrays, False)[1].item()
                flat[i] = orig - h
                fm = scalar(arrays, False)[1].item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(num)), floor)
            errors.append(float(np.max(np.abs(ga - num) / denom)))
    return GradCheckReport(max(errors) if errors else 0.0, errors, tol)
