"""Dense tensors with reverse-mode automatic differentiation.

Every operation records a closure that pushes the output gradient back to its
inputs; :func:`backward` walks the recorded graph in reverse topological
order.  Recurrent layers are exposed as fused operations with hand-written
backpropagation through time so that a 100-step rollout is one graph node
rather than a few thousand.
"""
from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericFault(FloatingPointError):
    """Raised when a non-finite value shows up where it must not."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self):
        return backward(self)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward_fn):
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


def backward(loss):
    """Backpropagate from a scalar ``loss``.

    Gradients are accumulated into ``.grad`` of every tensor that requires
    them; the returned dict maps each reachable leaf to its gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    leaves = {}
    if not loss.requires_grad:
        return leaves
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            _accumulate(node, np.zeros_like(node.data) if g is None else g)
            leaves[node] = node.grad
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate(parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _operands(a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _operands(a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _operands(a, b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _operands(a, b)
    out = a.data / b.data
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    return _result(a.data ** exponent, (a,),
                   lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _check_axis(x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {x.ndim}")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), _bw)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), _bw)


def activation(x, kind, axis=-1):
    """Apply ``relu``, ``tanh``, ``sigmoid`` or ``softmax`` (along ``axis``)."""
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis)
    raise ValueError(f"unknown activation {kind!r}")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is True by the constant ``value``."""
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _result(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------- reductions / shapes

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _result(np.asarray(out), (a,), _bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def reshape(a, shape):
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(a.data[idx]), (a,), _bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _result(out, tuple(tensors),
                   lambda g: tuple(np.squeeze(s, axis=axis) for s in np.split(g, n, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """Matrix product; leading batch dimensions of ``a`` broadcast against a 2-D ``b``."""
    a, b = _operands(a, b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw(g):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), _bw)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- convolution

def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    s0, s1, s2, s3 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(n, c, k, k, oh, ow),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride))
    # (n, oh, ow, c*k*k)
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n, oh, ow, c * k * k), oh, ow


def _col2im(cols, x_shape, k, stride, pad):
    n, c, h, w = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, c, k, k)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return xp[:, :, pad:pad + h, pad:pad + w]


def conv2d(x, weight, bias, stride=2, pad=1):
    """2-D cross-correlation. ``x``: (n, c, h, w); ``weight``: (out, c, k, k)."""
    x, weight = _operands(x, weight)
    bias = as_tensor(bias)
    co, ci, k, _ = weight.shape
    if x.shape[1] != ci:
        raise DimensionError(f"conv2d expects {ci} input channels, got {x.shape[1]}")
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = weight.data.reshape(co, -1)
    out = (cols @ wmat.T + bias.data).transpose(0, 3, 1, 2)

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1)  # n, oh, ow, co
        gw = (g2.reshape(-1, co).T @ cols.reshape(-1, cols.shape[-1])).reshape(weight.shape)
        gb = g2.sum(axis=(0, 1, 2))
        gx = _col2im(g2 @ wmat, x.shape, k, stride, pad) if x.requires_grad else None
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, weight, bias), _bw)


def conv_transpose2d(x, weight, bias, stride=2, pad=1):
    """Transposed convolution (adjoint of :func:`conv2d`). ``weight``: (in, out, k, k)."""
    x, weight = _operands(x, weight)
    bias = as_tensor(bias)
    ci, co, k, _ = weight.shape
    n, _, h, w = x.shape
    oh = (h - 1) * stride - 2 * pad + k
    ow = (w - 1) * stride - 2 * pad + k
    wmat = weight.data.reshape(ci, -1)
    xin = x.data.transpose(0, 2, 3, 1)  # n, h, w, ci
    cols = xin @ wmat
    out = _col2im(cols, (n, co, oh, ow), k, stride, pad) + bias.data[None, :, None, None]

    def _bw(g):
        gcols, _, _ = _im2col(g, k, stride, pad)  # n, h, w, co*k*k
        gx = (gcols @ wmat.T).transpose(0, 3, 1, 2)
        gw = (xin.reshape(-1, ci).T @ gcols.reshape(-1, gcols.shape[-1])).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, weight, bias), _bw)


# ---------------------------------------------------------------- recurrent kernels
# Gate order in the packed weight matrix: input, forget, cell, output.

def _lstm_cell(z, c_prev):
    hd = c_prev.shape[-1]
    i = _sigmoid(z[:, :hd])
    f = _sigmoid(z[:, hd:2 * hd])
    g = np.tanh(z[:, 2 * hd:3 * hd])
    o = _sigmoid(z[:, 3 * hd:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return o * tc, c, (i, f, g, o, tc)


def _lstm_cell_backward(dh, dc, c_prev, cache):
    i, f, g, o, tc = cache
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dc * i * (1.0 - g * g),
        dh * tc * o * (1.0 - o),
    ], axis=1)
    return dz, dc * f


def lstm_sequence(x, h0, c0, weight, bias):
    """Run an LSTM over ``x`` (batch, time, in) and return all hidden states.

    ``weight`` has shape (in + hidden, 4 * hidden) with the input rows first.
    """
    x, h0, c0, weight, bias = (as_tensor(t) for t in (x, h0, c0, weight, bias))
    n, steps, nin = x.shape
    hd = h0.shape[-1]
    if weight.shape != (nin + hd, 4 * hd):
        raise DimensionError(f"lstm weight {weight.shape} incompatible with input {nin}, hidden {hd}")
    wx, wh = weight.data[:nin], weight.data[nin:]
    zx = x.data @ wx + bias.data
    hs = np.empty((n, steps, hd), dtype=x.dtype)
    cs = np.empty((n, steps, hd), dtype=x.dtype)
    caches = []
    h, c = h0.data, c0.data
    for t in range(steps):
        h, c, cache = _lstm_cell(zx[:, t] + h @ wh, c)
        hs[:, t], cs[:, t] = h, c
        caches.append(cache)

    def _bw(gh):
        dz_all = np.empty((n, steps, 4 * hd), dtype=x.dtype)
        dh_next = np.zeros((n, hd), dtype=x.dtype)
        dc_next = np.zeros((n, hd), dtype=x.dtype)
        for t in reversed(range(steps)):
            c_prev = cs[:, t - 1] if t > 0 else c0.data
            dz, dc_next = _lstm_cell_backward(gh[:, t] + dh_next, dc_next, c_prev, caches[t])
            dz_all[:, t] = dz
            dh_next = dz @ wh.T
        h_prev = np.concatenate([h0.data[:, None], hs[:, :-1]], axis=1)
        flat = dz_all.reshape(-1, 4 * hd)
        gw = np.concatenate([x.data.reshape(-1, nin).T @ flat, h_prev.reshape(-1, hd).T @ flat])
        gx = dz_all @ wx.T if x.requires_grad else None
        return gx, dh_next, dc_next, gw, flat.sum(axis=0)

    return _result(hs, (x, h0, c0, weight, bias), _bw)


def lstm_rollout(drive, first, h0, c0, weight, bias, w_out, b_out):
    """Autoregressive LSTM whose own tanh output is fed back as input.

    At step ``t`` the cell consumes ``[drive[:, t]; y_t]`` where ``y_1 = first``
    and ``y_{t+1} = tanh(h_t @ w_out + b_out)``.  ``drive`` is treated as
    constant data (teacher-forced context).  Returns ``y_2 .. y_{T+1}`` with
    shape (batch, T, out).
    """
    drive, first, h0, c0, weight, bias, w_out, b_out = (
        as_tensor(t) for t in (drive, first, h0, c0, weight, bias, w_out, b_out))
    n, steps, nd = drive.shape
    ny = first.shape[-1]
    hd = h0.shape[-1]
    if weight.shape != (nd + ny + hd, 4 * hd):
        raise DimensionError(f"rollout weight {weight.shape} incompatible with {nd}+{ny}+{hd}")
    wd, wy, wh = weight.data[:nd], weight.data[nd:nd + ny], weight.data[nd + ny:]
    zd = drive.data @ wd + bias.data
    ys = np.empty((n, steps + 1, ny), dtype=drive.dtype)
    ys[:, 0] = first.data
    hs = np.empty((n, steps + 1, hd), dtype=drive.dtype)
    cs = np.empty((n, steps + 1, hd), dtype=drive.dtype)
    hs[:, 0], cs[:, 0] = h0.data, c0.data
    caches = []
    h, c = h0.data, c0.data
    for t in range(steps):
        h, c, cache = _lstm_cell(zd[:, t] + ys[:, t] @ wy + h @ wh, c)
        hs[:, t + 1], cs[:, t + 1] = h, c
        caches.append(cache)
        ys[:, t + 1] = np.tanh(h @ w_out.data + b_out.data)

    def _bw(g):
        dw = np.zeros_like(weight.data)
        db = np.zeros_like(bias.data)
        dwo = np.zeros_like(w_out.data)
        dbo = np.zeros_like(b_out.data)
        dh_next = np.zeros((n, hd), dtype=drive.dtype)
        dc_next = np.zeros((n, hd), dtype=drive.dtype)
        dy_fb = np.zeros((n, ny), dtype=drive.dtype)
        dz_all = np.empty((n, steps, 4 * hd), dtype=drive.dtype)
        for t in reversed(range(steps)):
            y = ys[:, t + 1]
            dpre = (g[:, t] + dy_fb) * (1.0 - y * y)
            h_t = hs[:, t + 1]
            dwo += h_t.T @ dpre
            dbo += dpre.sum(axis=0)
            dz, dc_next = _lstm_cell_backward(dh_next + dpre @ w_out.data.T, dc_next, cs[:, t], caches[t])
            dz_all[:, t] = dz
            dh_next = dz @ wh.T
            dy_fb = dz @ wy.T
        flat = dz_all.reshape(-1, 4 * hd)
        dw[:nd] = drive.data.reshape(-1, nd).T @ flat
        dw[nd:nd + ny] = ys[:, :-1].reshape(-1, ny).T @ flat
        dw[nd + ny:] = hs[:, :-1].reshape(-1, hd).T @ flat
        db += flat.sum(axis=0)
        gdrive = dz_all @ wd.T if drive.requires_grad else None
        return gdrive, dy_fb, dh_next, dc_next, dw, db, dwo, dbo

    return _result(np.ascontiguousarray(ys[:, 1:]), (drive, first, h0, c0, weight, bias, w_out, b_out), _bw)


# ---------------------------------------------------------------- initialisation / rng

def glorot_uniform(rng, shape, fan_in=None, fan_out=None, dtype=DEFAULT_DTYPE):
    if fan_in is None:
        fan_in, fan_out = shape[0], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def spawn_rngs(seed, names):
    """Deterministically split one master seed into named generator streams."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor).

    ``grads`` maps the same names to arrays; missing entries count as zero.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericFault(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        v = state.second_moment[name]
        m *= beta1
        v *= beta2
        if g is None:
            continue
        m += (1.0 - beta1) * g
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- gradient checking

def finite_diff_check(fn, point, epsilon=1e-5, max_coords=None, rng=None):
    """Compare autodiff gradients against central differences.

    ``point`` is a tensor or a sequence of tensors that ``fn`` reads (it is
    called as ``fn(*points)`` and must return a scalar tensor).  Returns the
    largest ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`` over
    all checked coordinates.  ``max_coords`` limits the number of coordinates
    per tensor, drawn with ``rng``.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    saved = [p.requires_grad for p in points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    backward(fn(*points))
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]
    worst = 0.0
    for p, ga in zip(points, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(fn(*points).data)
            flat[i] = orig - epsilon
            fm = float(fn(*points).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * epsilon)
            ana = ga.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    for p, s in zip(points, saved):
        p.requires_grad = s
        p.grad = None
    return worst
