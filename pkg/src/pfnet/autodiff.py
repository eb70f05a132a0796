"""Dense tensors with reverse-mode automatic differentiation.

Everything here operates on plain numpy arrays wrapped in :class:`Tensor`
nodes. Ops record their inputs and a local gradient rule on the output node;
:func:`backward` replays the recording in reverse topological order. Only
the ops the image networks and losses need are provided: elementwise
arithmetic, matmul, reductions, slicing, padding, convolution (strided and
fractionally strided), batch normalization and 2x2 max pooling.

Gradients accumulate additively on fan-out. Float64 is the default dtype;
float32 inputs stay float32 (used for runtime-speed training).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A dense n-d array node in the autodiff graph.

    ``requires_grad`` on a leaf marks it as a differentiation target;
    interior nodes inherit it from their parents. ``grad`` is populated
    by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_rule")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _as_array(data, dtype)
        if requires_grad and not np.all(np.isfinite(self.data)):
            raise ValueError("tensor construction rejects non-finite values")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._grad_rule = None

    @classmethod
    def _from_op(cls, data, parents, grad_rule):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._grad_rule = grad_rule
        else:
            out._parents = ()
            out._grad_rule = None
        return out

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
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        return backward(self)

    # -- operator sugar; scalars are promoted to constant tensors --

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0, self.dtype))

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor that collects gradients during backward."""

    __slots__ = ("name",)

    def __init__(self, data, name, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class Tape:
    """Reverse topological record of the ops reaching one output node.

    Built lazily from the output; node order guarantees every node's
    inputs appear before it. One backward pass replays each recorded op
    exactly once.
    """

    def __init__(self, output):
        self.output = output
        order = []
        visited = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.nodes = order  # topological: inputs before consumers


def backward(output):
    """Propagate d(output)/d(node) to every requires_grad leaf.

    Returns a map from leaf tensor to its gradient array; the same arrays
    are accumulated into each leaf's ``.grad``.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.data.shape}")
    tape = Tape(output)
    grads = {id(output): np.ones_like(output.data)}
    leaf_grads = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_rule is not None:
            parent_grads = node._grad_rule(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        elif node.requires_grad:
            # leaf
            node.grad = g if node.grad is None else node.grad + g
            leaf_grads[node] = node.grad
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    _check_same_shape("add", a, b, allow_scalar=True)
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (_shrink(g, a.data.shape), _shrink(g, b.data.shape)))


def sub(a, b):
    _check_same_shape("sub", a, b, allow_scalar=True)
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (_shrink(g, a.data.shape), _shrink(-g, b.data.shape)))


def mul(a, b):
    _check_same_shape("mul", a, b, allow_scalar=True)
    return Tensor._from_op(a.data * b.data, (a, b),
                           lambda g: (_shrink(g * b.data, a.data.shape),
                                      _shrink(g * a.data, b.data.shape)))


def _shrink(g, shape):
    # inverse of scalar broadcasting; only scalars broadcast in this engine
    if g.shape == shape:
        return g
    return g.sum().reshape(shape) if shape in ((), (1,)) else g.reshape(shape)


def _check_same_shape(name, a, b, allow_scalar=False):
    if a.data.shape == b.data.shape:
        return
    if allow_scalar and (a.data.size == 1 or b.data.size == 1):
        return
    raise ValueError(f"{name}: shape mismatch {a.data.shape} vs {b.data.shape}")


def tsum(a):
    shape = a.data.shape
    return Tensor._from_op(np.asarray(a.data.sum()), (a,),
                           lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a):
    n = a.data.size
    shape = a.data.shape
    return Tensor._from_op(np.asarray(a.data.mean()), (a,),
                           lambda g: (np.broadcast_to(g / n, shape).copy(),))


def reshape(a, shape):
    old = a.data.shape
    return Tensor._from_op(a.data.reshape(shape), (a,),
                           lambda g: (g.reshape(old),))


def transpose2d(a):
    if a.data.ndim != 2:
        raise ValueError(f"transpose2d expects a matrix, got shape {a.data.shape}")
    return Tensor._from_op(np.ascontiguousarray(a.data.T), (a,),
                           lambda g: (np.ascontiguousarray(g.T),))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects matrices, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dims differ, {a.data.shape[1]} vs {b.data.shape[0]}")
    return Tensor._from_op(a.data @ b.data, (a, b),
                           lambda g: (g @ b.data.T, a.data.T @ g))


def narrow(a, key):
    """Basic slicing with gradient scatter back into the source region."""
    out = a.data[key]
    shape = a.data.shape

    def rule(g):
        dx = np.zeros(shape, dtype=g.dtype)
        dx[key] = g
        return (dx,)

    return Tensor._from_op(np.ascontiguousarray(out), (a,), rule)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(a):
    mask = a.data > 0
    return Tensor._from_op(np.where(mask, a.data, 0), (a,),
                           lambda g: (g * mask,))


def scaled_tanh(a):
    """255 * (tanh(u) + 1) / 2, maps the reals onto (0, 255)."""
    t = np.tanh(a.data)
    out = 127.5 * (t + 1.0)
    return Tensor._from_op(out.astype(a.data.dtype, copy=False), (a,),
                           lambda g: (g * (127.5 * (1.0 - t * t)),))


# ---------------------------------------------------------------------------
# padding
# ---------------------------------------------------------------------------

def _reflect_indices(n, pad):
    # whole-sample mirror: ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def _fold_axis(g, idx, n, axis):
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros((n,) + gm.shape[1:], dtype=g.dtype)
    np.add.at(out, idx, gm)
    return np.moveaxis(out, 0, axis)


def pad2d(a, pad, mode="zero"):
    """Pad the two trailing (spatial) axes by ``pad`` on each side."""
    if pad == 0:
        return a
    if a.data.ndim != 4:
        raise ValueError(f"pad2d expects NCHW input, got shape {a.data.shape}")
    n, c, h, w = a.data.shape
    if mode == "zero":
        out = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        rule = lambda g: (g[:, :, pad:pad + h, pad:pad + w],)
    elif mode == "reflect":
        if pad >= h or pad >= w:
            raise ValueError(f"reflect pad {pad} needs spatial extent > pad, got {h}x{w}")
        ih = _reflect_indices(h, pad)
        iw = _reflect_indices(w, pad)
        out = a.data[:, :, ih[:, None], iw[None, :]]

        def rule(g):
            folded = _fold_axis(g, ih, h, 2)
            return (_fold_axis(folded, iw, w, 3),)
    else:
        raise ValueError(f"unknown padding mode {mode!r}")
    return Tensor._from_op(out, (a,), rule)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _corr2d(x, w, stride):
    """Plain cross-correlation of NCHW input with OIKK kernel (no padding)."""
    o, i, k, _ = w.shape
    cols, ho, wo = _im2col(x, k, stride)
    out = np.matmul(w.reshape(o, i * k * k)[None], cols)
    return out.reshape(x.shape[0], o, ho, wo), cols


def _corr2d_input_grad(g, w, stride, h_in, w_in):
    """Gradient of _corr2d w.r.t. its (already padded) input."""
    n, o, ho, wo = g.shape
    k = w.shape[2]
    if stride > 1:
        gd = np.zeros((n, o, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
        gd[:, :, ::stride, ::stride] = g
    else:
        gd = g
    gd = np.pad(gd, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    w_fs = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _corr2d(gd, w_fs, 1)
    # trailing rows/cols the strided forward never touched get zero gradient
    pad_h = h_in - dx.shape[2]
    pad_w = w_in - dx.shape[3]
    if pad_h or pad_w:
        dx = np.pad(dx, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)))
    return dx


def conv2d(x, w, b=None, *, stride=1, pad=0, pad_mode="zero"):
    """2-d convolution (cross-correlation) of NCHW input with OIKK kernel.

    Differentiable w.r.t. input, kernel and bias. ``pad`` pixels of zero or
    reflect padding are applied to both spatial axes before the strided
    correlation.
    """
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be NCHW, got shape {x.data.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be OIKK, got shape {w.data.shape}")
    o, i, k, k2 = w.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel spatial dims must be odd and square, got {k}x{k2}")
    if x.data.shape[1] != i:
        raise ValueError(f"conv2d input has {x.data.shape[1]} channels but kernel expects {i}")
    if b is not None and b.data.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {b.data.shape}")
    xp = pad2d(x, pad, pad_mode)
    h_in, w_in = xp.data.shape[2], xp.data.shape[3]
    if h_in < k or w_in < k:
        raise ValueError(f"conv2d spatial extent {h_in}x{w_in} smaller than kernel {k}")
    out, cols = _corr2d(xp.data, w.data, stride)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def rule(g):
        n = g.shape[0]
        dw = np.matmul(g.reshape(n, o, -1), cols.transpose(0, 2, 1)).sum(axis=0)
        dw = dw.reshape(w.data.shape)
        dx = _corr2d_input_grad(g, w.data, stride, h_in, w_in)
        if b is not None:
            return dx, dw, g.sum(axis=(0, 2, 3))
        return dx, dw

    parents = (xp, w) if b is None else (xp, w, b)
    return Tensor._from_op(out, parents, rule)


def zero_insert2(x):
    """Upsample NCHW by 2 with zeros: input pixel (i,j) lands at (2i,2j)."""
    n, c, h, w = x.data.shape
    out = np.zeros((n, c, 2 * h, 2 * w), dtype=x.data.dtype)
    out[:, :, ::2, ::2] = x.data
    return Tensor._from_op(out, (x,), lambda g: (g[:, :, ::2, ::2].copy(),))


def flip_swap_kernel(w):
    """Spatially flip an OIKK kernel and swap its channel axes (self-inverse)."""
    data = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return Tensor._from_op(
        data, (w,),
        lambda g: (np.ascontiguousarray(g[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)),))


def conv2d_transpose(x, w, b=None):
    """Fractionally strided convolution doubling the spatial extent.

    Implemented as zero-insertion upsampling followed by a stride-1
    convolution, which makes it exactly the adjoint of a stride-2 zero-pad
    conv2d with the same kernel. The kernel keeps the forward conv's OIKK
    layout, so the transpose maps O input channels to I output channels.
    """
    if w.data.ndim != 4:
        raise ValueError(f"conv2d_transpose kernel must be OIKK, got shape {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"conv2d_transpose input has {x.data.shape[1]} channels but kernel expects {w.data.shape[0]}")
    k = w.data.shape[2]
    up = zero_insert2(x)
    return conv2d(up, flip_swap_kernel(w), b, stride=1, pad=k // 2, pad_mode="zero")


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class BatchNormState:
    """Per-channel running statistics for one batch_norm layer."""
    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels, dtype=np.float64):
        return cls(mean=np.zeros(channels, dtype=dtype),
                   var=np.ones(channels, dtype=dtype))


def batch_norm(x, gamma, beta, state, mode="train"):
    """Spatial batch normalization over the N, H, W axes of NCHW input.

    Train mode normalizes by batch statistics and folds them into the
    running state; eval mode normalizes by the running state only and
    requires it to have been initialized.
    """
    if x.data.ndim != 4:
        raise ValueError(f"batch_norm input must be NCHW, got shape {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"batch_norm affine params must have shape ({c},), "
                         f"got gamma {gamma.data.shape} beta {beta.data.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")

    if mode == "eval":
        if not state.initialized:
            raise RuntimeError("batch_norm eval mode before any running statistics exist")
        inv = 1.0 / np.sqrt(state.var + BN_EPS)
        xc = x.data - state.mean[None, :, None, None]
        out = gamma.data[None, :, None, None] * xc * inv[None, :, None, None] \
            + beta.data[None, :, None, None]
        out = out.astype(x.data.dtype, copy=False)

        def rule(g):
            dx = g * (gamma.data * inv)[None, :, None, None]
            dgamma = (g * xc * inv[None, :, None, None]).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

        return Tensor._from_op(out, (x, gamma, beta), rule)

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))  # biased, matches the normalizer
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]
    out = out.astype(x.data.dtype, copy=False)

    mom = state.momentum
    if state.initialized:
        state.mean = ((1.0 - mom) * state.mean + mom * mean).astype(state.mean.dtype)
        state.var = ((1.0 - mom) * state.var + mom * var).astype(state.var.dtype)
    else:
        state.mean = mean.astype(state.mean.dtype)
        state.var = var.astype(state.var.dtype)
        state.initialized = True

    def rule(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        gi = g * gamma.data[None, :, None, None]
        dx = (inv[None, :, None, None] / m) * (
            m * gi
            - gi.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gi * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
        )
        return dx.astype(x.data.dtype, copy=False), dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def max_pool2d(x, window=2, stride=2):
    """2x2/stride-2 max pooling; ties route the gradient to the first max."""
    if window != 2 or stride != 2:
        raise ValueError("max_pool2d supports only window=2, stride=2")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    flat = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, arg[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), rule)
