"""Dense tensors with a reverse-mode differentiation tape.

Operations record themselves on the tape that is active in the current thread
(see :class:`Tape`); with no active tape they are plain numpy evaluations.
Broadcasting is restricted to identical shapes or scalar-vs-tensor.
"""
import math
import threading

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, DomainError, NumericError

LEAKY_SLOPE = 0.2

_local = threading.local()


def _active_tape():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional real array that can take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_produced", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        if dtype is None and arr.dtype != np.float64 and arr.dtype != np.float32:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._produced = False

    # -- introspection -------------------------------------------------
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

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, wrt=None):
        backward(self, wrt)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations for one thread.

    Use as a context manager; every op evaluated inside the block whose inputs
    require gradients is appended. :meth:`backward` replays the record in
    reverse, which is a valid reverse topological order because an op can
    only consume tensors that already exist.
    """

    def __init__(self):
        self.ops = []
        self.params = {}
        self.consumed = False

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def watch(self, name, tensor):
        """Register a named trainable tensor."""
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def record(self, out, parents, backward_fn):
        out.requires_grad = True
        out._tape = self
        out._produced = True
        self.ops.append((out, parents, backward_fn))

    def backward(self, loss, wrt=None):
        if self.consumed:
            raise ContractError("tape already consumed; record a new one before calling backward again")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, parents, fn in reversed(self.ops):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    if not p._produced:
                        leaves[key] = p
        for key, leaf in leaves.items():
            g = grads[key]
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {leaf!r}")
            leaf.grad = g.astype(leaf.data.dtype, copy=False) if leaf.grad is None else leaf.grad + g
        if wrt is not None:
            for t in wrt:
                if t.grad is None:
                    t.zero_grad()
        self.ops.clear()
        self.consumed = True


def backward(loss, wrt=None):
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    ``wrt`` lists tensors that must end up with a gradient buffer; those with
    no path to the loss receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad and not loss._produced:
            loss.grad = np.ones_like(loss.data)
            return
        raise ContractError("loss was not produced on a tape")
    tape.backward(loss, wrt)


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{opname} produced non-finite values")
    return arr


def _make(data, parents, backward_fn, opname):
    out = Tensor(_finite(data, opname), dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def custom(data, parents, backward_fn, opname="custom"):
    """Wrap a fused forward result; ``backward_fn(g)`` returns one grad per parent."""
    return _make(np.asarray(data), tuple(parents), backward_fn, opname)


def _needs(*ts):
    return _active_tape() is not None and any(isinstance(t, Tensor) and t.requires_grad for t in ts)


def _check_binary(a, b, opname):
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match (no broadcasting)")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("division by exact zero")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def log2(x):
    return mul(log(x), 1.0 / math.log(2.0))


def square(x):
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative input")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def clamp(x, lo=None, hi=None):
    """Clamp values; gradient is stopped wherever the bound is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    keep = out == x.data
    return _make(out, (x,), lambda g: (g * keep,), "clamp")


def lower_bound(x, bound):
    """max(x, bound) whose gradient still flows when it would raise x above the bound."""
    x = as_tensor(x)
    xd = x.data
    out = np.maximum(xd, bound)
    return _make(out, (x,), lambda g: (g * ((xd >= bound) | (g < 0)),), "lower_bound")


def leaky_relu(x, slope=LEAKY_SLOPE):
    x = as_tensor(x)
    pos = x.data >= 0
    return _make(np.where(pos, x.data, slope * x.data), (x,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def sigmoid(x):
    x = as_tensor(x)
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x):
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _make(out, (x,), lambda g: (g * special.expit(xd),), "softplus")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softmax(x, axis):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def maximum_scalar(x, floor):
    """max(x, floor) for a scalar x; ties pass the gradient through."""
    x = as_tensor(x)
    if x.data.size != 1:
        raise DimensionError("maximum_scalar expects a scalar tensor")
    passes = bool(x.data.reshape(-1)[0] >= floor)
    out = np.maximum(x.data, floor)
    return _make(out, (x,), lambda g: (g * (1.0 if passes else 0.0),), "maximum_scalar")


def matmul(a, b):
    """Batched matrix product over the leading axis (numpy ``@`` semantics, equal batch dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b),
                 lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g), "matmul")


def astype(x, dtype):
    x = as_tensor(x)
    if x.data.dtype == dtype:
        return x
    src = x.data.dtype
    return _make(x.data.astype(dtype), (x,), lambda g: (g.astype(src),), "astype")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def expand(x, shape):
    """Explicit broadcast of size-1 axes to ``shape`` (same rank required)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.ndim != len(shape) or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}")
    axes = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)
    return _make(np.broadcast_to(x.data, shape), (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


def getitem(x, idx):
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g) if _fancy(idx) else full.__setitem__(idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "slice")


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _im2col(xp, kh, kw, stride, oh, ow):
    # [B, C, H, W] -> [C*kh*kw, B*oh*ow]; rows ordered (C, kh, kw) row-major
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, oh, ow), dtype=xp.dtype)
    xt = xp.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i: i + (oh - 1) * stride + 1: stride, j: j + (ow - 1) * stride + 1: stride]
    return cols.reshape(C * kh * kw, B * oh * ow)


def _col2im(cols, shape, kh, kw, stride, oh, ow):
    # [C*kh*kw, B*oh*ow] -> [B, C, H, W], accumulated in kernel-row-major order
    B, C = shape[:2]
    out = np.zeros((C, B) + tuple(shape[2:]), dtype=cols.dtype)
    d = cols.reshape(C, kh, kw, B, oh, ow)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i: i + (oh - 1) * stride + 1: stride, j: j + (ow - 1) * stride + 1: stride] += d[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x, kernel, bias=None, stride=1, pad=0):
    """2-D cross-correlation, NCHW layout, kernel [Cout, Cin, kh, kw]."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    B, C, H, W = x.shape
    co, ci, kh, kw = kernel.shape
    if ci != C:
        raise DimensionError(f"conv2d: input has {C} channels, kernel expects {ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    oh = (H + 2 * pad - kh) // stride + 1
    ow = (W + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = kernel.data.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, B, oh, ow).transpose(1, 0, 2, 3)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if not _needs(*parents):
        return Tensor(_finite(out, "conv2d"), dtype=out.dtype)
    xshape, pshape = x.shape, xp.shape

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(co, B * oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gxp = _col2im(wmat.T @ gm, pshape, kh, kw, stride, oh, ow)
            gx = gxp[:, :, pad: pad + xshape[2], pad: pad + xshape[3]] if pad else gxp
        if kernel.requires_grad:
            gw = (gm @ cols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gm.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv2d")


def transpose_output_padding(k, stride, pad):
    opad = stride + 2 * pad - k
    if opad < 0 or opad >= max(stride, 1):
        raise DimensionError(f"conv_transpose2d: k={k}, stride={stride}, pad={pad} cannot scale extents by {stride}")
    return opad


def conv_transpose2d(x, kernel, bias=None, stride=1, pad=0):
    """Adjoint of :func:`conv2d`; kernel [Cin, Cout, kh, kw].

    Output extent is ``(in-1)*stride - 2*pad + k + opad`` with
    ``opad = stride + 2*pad - k``, so every layer scales extents by exactly
    ``stride``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv_transpose2d expects 4-D input and kernel")
    B, C, H, W = x.shape
    ci, co, kh, kw = kernel.shape
    if ci != C:
        raise DimensionError(f"conv_transpose2d: input has {C} channels, kernel expects {ci}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"conv_transpose2d: bias shape {bias.shape} != ({co},)")
    oph = transpose_output_padding(kh, stride, pad)
    opw = transpose_output_padding(kw, stride, pad)
    OH = (H - 1) * stride - 2 * pad + kh + oph
    OW = (W - 1) * stride - 2 * pad + kw + opw
    full = (B, co, (H - 1) * stride + kh + oph, (W - 1) * stride + kw + opw)
    xm = x.data.transpose(1, 0, 2, 3).reshape(C, B * H * W)
    wmat = kernel.data.reshape(C, co * kh * kw)
    outf = _col2im(wmat.T @ xm, full, kh, kw, stride, H, W)
    out = outf[:, :, pad: pad + OH, pad: pad + OW]
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    if not _needs(*parents):
        return Tensor(_finite(out, "conv_transpose2d"), dtype=out.dtype)

    def bw(g):
        gf = np.zeros(full, dtype=g.dtype)
        gf[:, :, pad: pad + OH, pad: pad + OW] = g
        gcols = _im2col(gf, kh, kw, stride, H, W)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (wmat @ gcols).reshape(C, B, H, W).transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            gw = (xm @ gcols.T).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, bw, "conv_transpose2d")


# ---------------------------------------------------------------------------
# Gaussian CDF
# ---------------------------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def std_normal_cdf(t):
    return special.ndtr(t)


def std_normal_pdf(t):
    return _INV_SQRT2PI * np.exp(-0.5 * t * t)


def gaussian_cdf(x, mu, sigma):
    """Phi((x - mu) / sigma), differentiable in all three arguments."""
    x, mu, sigma = as_tensor(x), as_tensor(mu), as_tensor(sigma)
    _check_binary(x, mu, "gaussian_cdf")
    _check_binary(x, sigma, "gaussian_cdf")
    if np.any(sigma.data <= 0):
        raise DomainError("gaussian_cdf needs sigma > 0")
    t = (x.data - mu.data) / sigma.data
    out = 0.5 * special.erfc(-t * _INV_SQRT2)

    def bw(g):
        d = g * std_normal_pdf(t) / sigma.data
        return (_unbroadcast(d, x.shape), _unbroadcast(-d, mu.shape), _unbroadcast(-d * t, sigma.shape))

    return _make(np.asarray(out), (x, mu, sigma), bw, "gaussian_cdf")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f, point, eps=1e-4, coords=None):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` optionally restricts the
    check to a subset of flat indices (useful for large inputs). NaN anywhere
    is reported as ``inf``.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    try:
        with Tape():
            loss = f(x)
            backward(loss, wrt=[x])
    except NumericError:
        return math.inf
    analytic = x.grad.reshape(-1)
    flat = point.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(point)).item()
        flat[i] = orig - eps
        fm = f(Tensor(point)).item()
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        err = abs(analytic[i] - num) / max(1e-8, abs(num))
        if not math.isfinite(err):
            return math.inf
        worst = max(worst, err)
    return worst
