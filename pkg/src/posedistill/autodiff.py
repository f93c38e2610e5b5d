"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable op appends its output to a thread-confined tape.
``backward`` replays the tape in reverse, so gradients are a deterministic
function of the executed op sequence.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64
_DTYPES = (np.dtype(FLOAT32), np.dtype(FLOAT64))


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was used outside its contract (e.g. backward on a non-scalar)."""


class _TapeState(threading.local):
    def __init__(self):
        self.nodes = []
        self.enabled = True


_state = _TapeState()


@contextmanager
def no_grad():
    """Run ops without recording them; results never require grad."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled():
    return _state.enabled


def tape_length():
    return len(_state.nodes)


def clear_tape():
    _state.nodes.clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPES:
            arr = arr.astype(FLOAT32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # --- basic properties -------------------------------------------------
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
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # --- operators --------------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        backward(self)


def _not_scalar(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad=False, dtype=FLOAT32, name=None):
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _coerce(a, b):
    """Promote a Python/numpy constant operand to a tensor of the other's dtype."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _result(data, parents, backward_fn):
    """Wrap ``data``; record it on the tape when any parent needs a grad."""
    out = Tensor(data, dtype=data.dtype)
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _state.nodes.append(out)
    return out


def _check_dtypes(*ts):
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise ShapeError(f"dtype mismatch: {dt} vs {t.dtype}")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary ----------------------------------------------------
def add(a, b):
    a, b = _coerce(a, b)
    _check_dtypes(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _coerce(a, b)
    _check_dtypes(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _coerce(a, b)
    _check_dtypes(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _coerce(a, b)
    _check_dtypes(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a Python constant (no tensor allocated for ``c``)."""
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# --- elementwise unary -----------------------------------------------------
def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return _result(a.data * a.data, (a,), lambda g: (2 * g * a.data,))


def abs_(a):
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = 0.5 * (np.tanh(0.5 * a.data) + 1)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def softplus(a):
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        return (g * (0.5 * (np.tanh(0.5 * x) + 1)),)

    return _result(out, (a,), bw)


_GELU_C = np.sqrt(2.0 / np.pi)
_CHUNK = 1 << 15  # elements per pass; keeps elementwise temporaries cache resident


def _gelu_forward(x, out, t):
    c = x.dtype.type(_GELU_C)
    np.multiply(x, x, out=t)
    t *= x.dtype.type(0.044715)
    t += 1
    t *= x
    t *= c
    np.tanh(t, out=t)
    np.multiply(x, x.dtype.type(0.5), out=out)
    out *= t
    out += x * x.dtype.type(0.5)


def _gelu_backward(x, t, g, d):
    # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
    c = x.dtype.type(_GELU_C)
    np.multiply(x, x, out=d)
    d *= x.dtype.type(3 * 0.044715)
    d += 1
    d *= c
    d *= 1 - t * t
    d *= x
    d += t
    d += 1
    d *= x.dtype.type(0.5)
    d *= g


def gelu(a):
    """Tanh approximation of GELU."""
    x = a.data.reshape(-1)
    out = np.empty_like(x)
    t = np.empty_like(x)
    for i in range(0, x.size, _CHUNK):
        sl = slice(i, i + _CHUNK)
        _gelu_forward(x[sl], out[sl], t[sl])

    def bw(g):
        g = g.reshape(-1)
        d = np.empty_like(x)
        for i in range(0, x.size, _CHUNK):
            sl = slice(i, i + _CHUNK)
            _gelu_backward(x[sl], t[sl], g[sl], d[sl])
        return (d.reshape(a.shape),)

    return _result(out.reshape(a.shape), (a,), bw)


# --- reductions ------------------------------------------------------------
def sum_(a, axis=None, keepdims=False):
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    inv = a.dtype.type(1.0 / n)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, a.shape),)

    return _result(out, (a,), bw)


# --- shape ops -------------------------------------------------------------
def reshape(a, shape):
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a):
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, index):
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g) if _needs_add_at(index) else full.__setitem__(index, g)
        return (full,)

    return _result(np.array(out), (a,), bw)


def _needs_add_at(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = list(tensors)
    _check_dtypes(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), bw)


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (leading axes may be added)."""
    out = np.broadcast_to(a.data, shape)
    return _result(np.ascontiguousarray(out), (a,), lambda g: (_unbroadcast(g, a.shape),))


# --- linear algebra --------------------------------------------------------
def matmul(a, b):
    """Matrix product; batched over leading axes, or ``(..., k) @ (k, n)``."""
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        out = a.data @ b.data

        def bw(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _result(out, (a, b), bw)


def linear(x, weight, bias=None):
    """``x @ weight + bias`` as one tape node; x: (..., k), weight: (k, n), bias: (n,)."""
    if bias is None:
        return matmul(x, weight)
    _check_dtypes(x, weight, bias)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise ShapeError(f"linear shape mismatch: {x.shape} @ {weight.shape} + {bias.shape}")
    k, n = weight.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ weight.data
    out += bias.data

    def bw(g):
        g2 = g.reshape(-1, n)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _result(out.reshape(x.shape[:-1] + (n,)), (x, weight, bias), bw)


# --- neural-net primitives -------------------------------------------------
def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw)


def multi_head_attention(qkv, heads, record=None):
    """Scaled dot-product self-attention from packed projections.

    qkv: (B, N, 3*D) laid out as [q | k | v], each split into ``heads`` chunks.
    Returns (B, N, D). If ``record`` is a dict it receives q, k and the weights.
    """
    B, N, D3 = qkv.shape
    D = D3 // 3
    if D3 != 3 * D or D % heads:
        raise ShapeError(f"packed qkv width {D3} incompatible with {heads} heads")
    dh = D // heads
    scale = qkv.dtype.type(dh**-0.5)
    parts = qkv.data.reshape(B, N, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = parts[0], parts[1], parts[2]
    s = (q @ np.swapaxes(k, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    o = a @ v  # (B, h, N, dh)
    out = o.transpose(0, 2, 1, 3).reshape(B, N, D)
    if record is not None:
        record.update(q=q.copy(), k=k.copy(), attn=a.copy())

    def bw(g):
        go = g.reshape(B, N, heads, dh).transpose(0, 2, 1, 3)
        gv = np.swapaxes(a, -1, -2) @ go
        ga = go @ np.swapaxes(v, -1, -2)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * scale
        gq = gs @ k
        gk = np.swapaxes(gs, -1, -2) @ q
        packed = np.empty((B, N, 3, heads, dh), dtype=qkv.dtype)
        for i, gp in enumerate((gq, gk, gv)):
            packed[:, :, i] = gp.transpose(0, 2, 1, 3)
        return (packed.reshape(B, N, D3),)

    return _result(out, (qkv,), bw)


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shape {gain.shape}/{bias.shape} vs last axis {d}")
    _check_dtypes(x, gain, bias)
    xc = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", xc, xc)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data
    out += bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            proj = np.einsum("...i,...i->...", gh, xhat)[..., None] / d
            gx = gh - gh.mean(axis=-1, keepdims=True)
            gx -= xhat * proj
            gx *= inv
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), bw)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D convolution on channels-last input.

    x: (B, H, W, C); weight: (kh, kw, C, O); bias: (O,). Returns (B, Ho, Wo, O).
    """
    _check_dtypes(x, weight)
    B, H, W, C = x.shape
    kh, kw, wc, O = weight.shape
    if wc != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    p, s = padding, stride
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # (B, Ho, Wo, C, kh, kw) -> (B, Ho, Wo, kh, kw, C)
    cols = win[:, ::s, ::s][:, :Ho, :Wo].transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = weight.data.reshape(kh * kw * C, O)
    out = (cols @ wmat).reshape(B, Ho, Wo, O)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, O)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + s * Ho:s, j:j + s * Wo:s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p:p + H, p:p + W, :] if p else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bw)


# --- losses ----------------------------------------------------------------
def mse(a, b):
    """Mean of squared element differences."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    _check_dtypes(a, b)
    d = a.data - b.data
    inv = a.dtype.type(2.0 / d.size)
    out = np.asarray((d * d).mean())

    def bw(g):
        gd = g * inv * d
        return (gd if a.requires_grad else None), (-gd if b.requires_grad else None)

    return _result(out, (a, b), bw)


def smooth_l1(pred, target, beta=1.0, mask=None):
    """Smooth-L1 averaged over retained elements; 0 when nothing is retained."""
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {pred.shape} vs {target.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    _check_dtypes(pred, target)
    d = pred.data - target.data
    ad = np.abs(d)
    small = ad < beta
    elem = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    keep = np.ones(d.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, bool), d.shape)
    n = int(keep.sum())
    dt = pred.dtype.type
    if n == 0:
        out = np.asarray(dt(0))
        grad_elem = np.zeros_like(d)
    else:
        out = np.asarray((elem * keep).sum() / dt(n))
        grad_elem = np.where(small, d / dt(beta), np.sign(d)) * keep / dt(n)

    def bw(g):
        gd = g * grad_elem
        return (gd if pred.requires_grad else None), (-gd if target.requires_grad else None)

    return _result(out.astype(pred.dtype), (pred, target), bw)


# --- backward --------------------------------------------------------------
def backward(loss):
    """Populate ``.grad`` on every tape tensor reachable from scalar ``loss``.

    Leaf gradients accumulate into an existing ``.grad``; the tape is cleared.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    nodes = _state.nodes
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves = {}
    try:
        for node in reversed(nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent._backward is None:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for key, leaf in leaves.items():
            g = np.asarray(grads[key], dtype=leaf.dtype)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    finally:
        for node in nodes:
            node._backward = None
            node._parents = ()
        nodes.clear()
