"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything in this package (networks, distillation losses, supervised
losses) is expressed through the operations defined here.  Values are
immutable once constructed; an operation returns a fresh Tensor that
remembers its parents and how to push gradients back to them.  Calling
``backward`` on a scalar walks the graph once in reverse topological
order and accumulates gradients on the leaves.

Feature maps follow the (batch, channel, height, width) layout.  Scalars
and vectors (biases, norm parameters) are plain lower-rank tensors.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "conv2d",
    "layer_norm",
    "softmax",
    "pool",
    "channel_avg",
    "channel_max",
    "maxpool2x2",
    "upsample_bilinear_x2",
    "relu",
    "clamp",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "concat",
    "pad2d",
]


class Tensor:
    """A numpy-backed value node in the autodiff graph.

    ``requires_grad`` tensors with no parents are leaves (parameters);
    their ``grad`` holds the accumulated gradient after ``backward``.
    Intermediate nodes carry a ``_bw`` closure mapping the output
    gradient to per-parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _bw=None, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if not _parents and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entries in tensor {name or '<anonymous>'}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._bw = _bw
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def detach(self):
        """A constant view of this value, cut loose from the graph."""
        return Tensor(self.data, _parents=(self,), _bw=None)

    def is_leaf(self):
        return self._bw is None and not self._parents

    # -- graph plumbing -----------------------------------------------------

    def backward(self):
        backward(self)

    def grad_array(self):
        """Accumulated gradient, or zeros if this leaf was unreachable."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return _add(self, _coerce(other))

    def __radd__(self, other):
        return _add(_coerce(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_coerce(other)))

    def __rsub__(self, other):
        return _add(_coerce(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _coerce(other))

    def __rmul__(self, other):
        return _mul(_coerce(other), self)

    def __truediv__(self, other):
        return _div(self, _coerce(other))

    def __rtruediv__(self, other):
        return _div(_coerce(other), self)

    def __neg__(self):
        return _neg(self)

    def __pow__(self, p):
        return _pow(self, p)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, idx):
        return _slice(self, idx)

    def sum(self, axis=None, keepdims=False):
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else _axis_count(self.shape, axis)
        return _sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return _reshape(self, shape if len(shape) > 1 else shape[0])


def tensor(data, name=None):
    """A constant tensor (no gradient tracking)."""
    return Tensor(data, name=name)


def parameter(data, name=None):
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _axis_count(shape, axis):
    if isinstance(axis, int):
        axis = (axis,)
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def _node(data, parents, bw):
    """Wrap an op result; constant-fold when no parent needs gradients."""
    if not any(p.requires_grad for p in parents):
        return Tensor(data, _parents=parents, _bw=None)
    return Tensor(data, requires_grad=True, _parents=parents, _bw=bw)


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss):
    """Reverse-accumulate gradients from a scalar loss into the leaves.

    Unreachable leaves keep ``grad=None`` (read as zeros).  Traversal
    order is a deterministic function of graph construction order, so
    repeated runs on the same graph are bitwise identical.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bw is None:
            continue
        gout = node.grad
        if gout is None:
            continue
        for p, g in zip(node._parents, node._bw(gout)):
            if g is None or not p.requires_grad:
                continue
            if p.grad is None:
                p.grad = g
            else:
                p.grad = p.grad + g
        node.grad = None  # free intermediate storage


# -- elementwise arithmetic ------------------------------------------------


def _add(a, b):
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(out, (a, b), bw)


def _neg(a):
    return _node(-a.data, (a,), lambda g: (-g,))


def _mul(a, b):
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw)


def _div(a, b):
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(out, (a, b), bw)


def _pow(a, p):
    p = float(p)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), bw)


def relu(x):
    """max(x, 0); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0.0)

    def bw(g):
        return (g * (x.data > 0.0),)

    return _node(out, (x,), bw)


def clamp(x, lo, hi):
    """Hard clamp; subgradient is 1 strictly inside (lo, hi), else 0."""
    out = np.clip(x.data, lo, hi)

    def bw(g):
        return (g * ((x.data > lo) & (x.data < hi)),)

    return _node(out, (x,), bw)


def exp(x):
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _node(out, (x,), bw)


def log(x):
    """Natural log; caller must keep the argument strictly positive."""
    out = np.log(x.data)

    def bw(g):
        return (g / x.data,)

    return _node(out, (x,), bw)


def sqrt(x):
    out = np.sqrt(x.data)

    def bw(g):
        return (g * (0.5 / out),)

    return _node(out, (x,), bw)


def absolute(x):
    """|x|; subgradient at 0 is 0 (sign convention)."""
    out = np.abs(x.data)

    def bw(g):
        return (g * np.sign(x.data),)

    return _node(out, (x,), bw)


# -- shape ops ---------------------------------------------------------------


def _sum(x, axis, keepdims):
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g
        if not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = np.expand_dims(g, ax)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _node(out, (x,), bw)


def _reshape(x, shape):
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _node(out, (x,), bw)


def _slice(x, idx):
    out = x.data[idx]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _node(out, (x,), bw)


def concat(parts, axis=1):
    """Concatenate tensors along an axis (channel axis by default)."""
    datas = [p.data for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _node(out, tuple(parts), bw)


def pad2d(x, p, mode="zero"):
    """Pad the two spatial axes of an NCHW tensor by ``p`` on each side."""
    if x.data.ndim != 4:
        raise ValueError(f"pad2d expects an NCHW tensor, got shape {x.shape}")
    if p < 0:
        raise ValueError("pad width must be nonnegative")
    if p == 0:
        return x
    width = ((0, 0), (0, 0), (p, p), (p, p))
    if mode == "zero":
        out = np.pad(x.data, width)

        def bw(g):
            return (g[:, :, p:-p, p:-p],)

    elif mode == "replicate":
        out = np.pad(x.data, width, mode="edge")

        def bw(g):
            gx = g[:, :, p:-p, p:-p].copy()
            # fold each replicated strip back onto the edge it copied
            gx[:, :, 0, :] += g[:, :, :p, p:-p].sum(axis=2)
            gx[:, :, -1, :] += g[:, :, -p:, p:-p].sum(axis=2)
            gx[:, :, :, 0] += g[:, :, p:-p, :p].sum(axis=3)
            gx[:, :, :, -1] += g[:, :, p:-p, -p:].sum(axis=3)
            gx[:, :, 0, 0] += g[:, :, :p, :p].sum(axis=(2, 3))
            gx[:, :, 0, -1] += g[:, :, :p, -p:].sum(axis=(2, 3))
            gx[:, :, -1, 0] += g[:, :, -p:, :p].sum(axis=(2, 3))
            gx[:, :, -1, -1] += g[:, :, -p:, -p:].sum(axis=(2, 3))
            return (gx,)

    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _node(out, (x,), bw)


# -- convolution -------------------------------------------------------------


def _im2col(xp, k, stride, ho, wo):
    """(N,C,Hp,Wp) input -> (N*ho*wo, k*k*C) patch matrix.

    The patch axis is ordered (ki, kj, c) so a channels-last scatter in
    the backward stays cheap; the gather itself is a single strided copy
    straight off the NCHW array.
    """
    v = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    v = v[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 4, 5, 1))
    return cols.reshape(xp.shape[0] * ho * wo, -1)


def _col2im(gcols, n, c, hp, wp, k, stride, ho, wo):
    g6 = gcols.reshape(n, ho, wo, k, k, c)
    gxp = np.zeros((n, c, hp, wp))
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += \
                g6[:, :, :, ki, kj, :].transpose(0, 3, 1, 2)
    return gxp


def conv2d(x, weight, bias, stride=1, pad=0):
    """2-D cross-correlation with zero padding.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, k, k) with odd k, ``bias``
    is a length-O vector.  Output spatial size is
    floor((H + 2*pad - k)/stride) + 1 and must be at least 1.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/weight, got {xd.shape} and {wd.shape}")
    n, c, h, w = xd.shape
    o, ci, kh, kw = wd.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {kh}x{kw}")
    if ci != c:
        raise ValueError(f"input channels {xd.shape} do not match weight {wd.shape}")
    if bias.data.shape != (o,):
        raise ValueError(f"bias shape {bias.data.shape} does not match {o} output channels")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {xd.shape}, kernel {k}, "
            f"stride {stride}, pad {pad}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = _im2col(xp, k, stride, ho, wo)
    wr = wd.transpose(2, 3, 1, 0).reshape(-1, o)  # patch-major weight matrix
    out = cols @ wr + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:  # skip the scatter when the input is a constant
            gcols = gm @ wr.T
            gxp = _col2im(gcols, n, c, xp.shape[2], xp.shape[3], k, stride,
                          ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gw, gb

    return _node(out, (x, weight, bias), bw)


# -- normalization and softmax ----------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the channel axis, then apply the affine (gamma, beta).

    Intended for the (N, C, 1, 1) bottleneck inside the global-context
    block; per instance the channel mean becomes 0 and the variance 1
    (up to ``eps``) before the affine.
    """
    c = x.data.shape[1]
    if c == 0:
        raise ValueError("layer_norm over an empty channel axis")
    g = gamma.reshape(1, c, 1, 1) if gamma.data.ndim == 1 else gamma
    b = beta.reshape(1, c, 1, 1) if beta.data.ndim == 1 else beta
    mu = x.sum(axis=1, keepdims=True) * (1.0 / c)
    d = x - mu
    var = (d * d).sum(axis=1, keepdims=True) * (1.0 / c)
    y = d / sqrt(var + eps)
    return y * g + b


def softmax(x, axis="spatial"):
    """Softmax over the spatial extent (H*W jointly) or the channel axis.

    Max-stabilized; the subtracted max is a constant, which is exact for
    both the value and the gradient by shift invariance.
    """
    if axis == "spatial":
        red = (2, 3)
    elif axis == "channel":
        red = (1,)
    else:
        raise ValueError(f"unknown softmax axis {axis!r}")
    if any(x.data.shape[a] == 0 for a in red):
        raise ValueError(f"softmax over an empty axis: shape {x.shape}")
    shift = Tensor(x.data.max(axis=red, keepdims=True))
    e = exp(x - shift)
    return e / e.sum(axis=red, keepdims=True)


# -- pooling and resampling ---------------------------------------------------


def channel_avg(x):
    """Mean over channels: (N,C,H,W) -> (N,1,H,W)."""
    return x.sum(axis=1, keepdims=True) * (1.0 / x.data.shape[1])


def channel_max(x):
    """Max over channels; gradient routes to the lowest tied channel index."""
    idx = x.data.argmax(axis=1, keepdims=True)
    out = np.take_along_axis(x.data, idx, axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g, axis=1)
        return (gx,)

    return _node(out, (x,), bw)


def maxpool2x2(x):
    """2x2 spatial max pool; ties route the gradient to the lowest linear index."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = flat.argmax(axis=-1)  # argmax takes the first maximum: lowest (di, dj)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx[..., None], g[..., None], axis=-1)
        gx = gf.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _node(out, (x,), bw)


def pool(x, kind):
    """Dispatch: 'channel-avg' | 'channel-max' | 'spatial-max-2x2'."""
    if kind == "channel-avg":
        return channel_avg(x)
    if kind == "channel-max":
        return channel_max(x)
    if kind == "spatial-max-2x2":
        return maxpool2x2(x)
    raise ValueError(f"unknown pool kind {kind!r}")


def _up2_axis(x, axis):
    """Double one spatial axis with align-corners-false bilinear weights."""
    xd = x.data
    lo = [slice(None)] * 4
    hi = [slice(None)] * 4
    lo[axis] = slice(0, 1)
    hi[axis] = slice(-1, None)
    cut_head = [slice(None)] * 4
    cut_tail = [slice(None)] * 4
    cut_head[axis] = slice(None, -1)
    cut_tail[axis] = slice(1, None)
    # output 2i <- src i - 0.25, output 2i+1 <- src i + 0.25, edges clamped
    even = 0.75 * xd
    even[tuple(cut_tail)] += 0.25 * xd[tuple(cut_head)]
    even[tuple(lo)] += 0.25 * xd[tuple(lo)]
    odd = 0.75 * xd
    odd[tuple(cut_head)] += 0.25 * xd[tuple(cut_tail)]
    odd[tuple(hi)] += 0.25 * xd[tuple(hi)]
    shape = list(xd.shape)
    shape[axis] *= 2
    out = np.empty(shape)
    sl_e = [slice(None)] * 4
    sl_o = [slice(None)] * 4
    sl_e[axis] = slice(0, None, 2)
    sl_o[axis] = slice(1, None, 2)
    out[tuple(sl_e)] = even
    out[tuple(sl_o)] = odd

    def bw(g):
        ge = g[tuple(sl_e)]
        go = g[tuple(sl_o)]
        gx = 0.75 * (ge + go)
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        gx[tuple(head)] += 0.25 * ge[tuple(tail)]   # shift_up interior
        gx[tuple(lo)] += 0.25 * ge[tuple(lo)]       # clamped top edge
        gx[tuple(tail)] += 0.25 * go[tuple(head)]   # shift_dn interior
        gx[tuple(hi)] += 0.25 * go[tuple(hi)]       # clamped bottom edge
        return (gx,)

    return _node(out, (x,), bw)


def upsample_bilinear_x2(x):
    """Bilinear x2 upsampling of an NCHW tensor (align_corners=False)."""
    if x.data.ndim != 4:
        raise ValueError(f"upsample expects an NCHW tensor, got shape {x.shape}")
    return _up2_axis(_up2_axis(x, 2), 3)
