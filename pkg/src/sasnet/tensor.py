"""Dense tensor ops with hand-written gradients.

Arrays are C x H x W (kernel stacks O x C x kh x kw), float64 by default.
``Tensor`` is a thin node around an ndarray: an op records a closure that
pushes the upstream gradient to its parents, and ``backward`` replays them in
reverse topological order. Only the handful of ops the tracker needs exist.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives incompatible or degenerate shapes."""


class GraphError(RuntimeError):
    """Raised when a gradient is requested for a value the graph never saw."""


class Tensor:
    # ``pattern``: branch choice of a piecewise op (relu mask, pooling argmax)
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "pattern")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self.op = op
        self.pattern = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def backward(self, upstream=None):
        backward(self, upstream)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _node(data, parents, op, backward_fn):
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(out: Tensor, upstream=None):
    """Propagate ``upstream`` (default 1 for scalars) from ``out`` to all leaves.

    Gradients accumulate into ``.grad`` of every node that requires them;
    interior grads are released afterwards to keep memory flat.
    """
    if not out.requires_grad:
        raise GraphError("output was not recorded with any input requiring grad")
    if upstream is None:
        if out.data.size != 1:
            raise GraphError("upstream gradient required for non-scalar output")
        upstream = np.ones_like(out.data)
    order = _topo_order(out)
    _accumulate(out, np.asarray(upstream, dtype=out.data.dtype))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node.grad = None  # interior node
    return out


def gradients(out: Tensor, wrt, upstream=None):
    """Return d(out)/d(w) for each ``w`` in ``wrt`` without keeping leaf grads."""
    reachable = {id(n) for n in _topo_order(out)} if out.requires_grad else set()
    for w in wrt:
        if id(w) not in reachable or w._backward is not None:
            raise GraphError(f"{w!r} is not a recorded leaf of this graph")
    for w in wrt:
        w.grad = None
    backward(out, upstream)
    grads = [w.grad if w.grad is not None else np.zeros_like(w.data) for w in wrt]
    for w in wrt:
        w.grad = None
    return grads


# ----------------------------------------------------------------------------
# shapes


@dataclass(frozen=True)
class ShapeSpec:
    h_in: int
    w_in: int
    h_kernel: int
    w_kernel: int
    h_stride: int = 1
    w_stride: int = 1
    h_pad: int = 0
    w_pad: int = 0


def out_size(spec: ShapeSpec) -> tuple[int, int]:
    """Sliding-window output extent: floor((in + 2*pad - kernel) / stride) + 1."""
    if min(spec.h_stride, spec.w_stride, spec.h_kernel, spec.w_kernel) < 1:
        raise ShapeError(f"strides and kernel extents must be >= 1: {spec}")
    if min(spec.h_pad, spec.w_pad, spec.h_in, spec.w_in) < 0:
        raise ShapeError(f"negative extent in {spec}")
    h_span = spec.h_in + 2 * spec.h_pad - spec.h_kernel
    w_span = spec.w_in + 2 * spec.w_pad - spec.w_kernel
    if h_span < 0 or w_span < 0:
        raise ShapeError(
            f"kernel {spec.h_kernel}x{spec.w_kernel} exceeds padded input "
            f"{spec.h_in + 2 * spec.h_pad}x{spec.w_in + 2 * spec.w_pad}"
        )
    return h_span // spec.h_stride + 1, w_span // spec.w_stride + 1


def _window_out(h, w, kh, kw, stride, pad):
    return out_size(ShapeSpec(h, w, kh, kw, stride, stride, pad, pad))


# ----------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, ho, wo):
    c = xp.shape[0]
    s0, s1, s2 = xp.strides
    view = as_strided(xp, (c, kh, kw, ho, wo), (s0, s1, s2, s1 * stride, s2 * stride))
    return view.reshape(c * kh * kw, ho * wo)


def _col2im(dcols, shape, kh, kw, stride, ho, wo):
    c, hp, wp = shape
    dx = np.zeros(shape, dtype=dcols.dtype)
    dcols = dcols.reshape(c, kh, kw, ho, wo)
    h_end = stride * (ho - 1) + 1
    w_end = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, i : i + h_end : stride, j : j + w_end : stride] += dcols[:, i, j]
    return dx


def conv2d(x, kernels, bias=None, stride=1, pad=0) -> Tensor:
    """Cross-correlate a C x H x W input with O x C x kh x kw kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects CxHxW and OxCxkhxkw, got {x.shape} and {kernels.shape}")
    c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"kernel channels {kc} != input channels {c}")
    ho, wo = _window_out(h, w, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kernels.data.reshape(o, -1)
    out = w2 @ cols
    parents = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        parents = parents + (bias,)
    out = out.reshape(o, ho, wo)

    def _back(g):
        g2 = g.reshape(o, -1)
        if kernels.requires_grad:
            _accumulate(kernels, (g2 @ cols.T).reshape(kernels.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dxp = _col2im(w2.T @ g2, xp.shape, kh, kw, stride, ho, wo)
            _accumulate(x, dxp[:, pad : pad + h, pad : pad + w] if pad else dxp)

    return _node(out, parents, "conv2d", _back)


def xcorr(exemplar, instance) -> Tensor:
    """Slide a C x h x w exemplar over a C x H x W instance (stride 1, no pad).

    Each output cell is the full inner product over channels, rows and
    columns; the result is 1 x (H-h+1) x (W-w+1).
    """
    z, x = as_tensor(exemplar), as_tensor(instance)
    if z.data.ndim != 3 or x.data.ndim != 3:
        raise ShapeError(f"xcorr expects rank-3 features, got {z.shape} and {x.shape}")
    if z.shape[0] != x.shape[0]:
        raise ShapeError(f"channel mismatch: exemplar {z.shape[0]} vs instance {x.shape[0]}")
    if z.shape[1] > x.shape[1] or z.shape[2] > x.shape[2]:
        raise ShapeError(f"exemplar {z.shape} larger than instance {x.shape}")
    c, h, w = z.shape
    ho, wo = x.shape[1] - h + 1, x.shape[2] - w + 1
    cols = _im2col(x.data, h, w, 1, ho, wo)
    zv = z.data.reshape(1, -1)
    out = (zv @ cols).reshape(1, ho, wo)

    def _back(g):
        g2 = g.reshape(1, -1)
        if z.requires_grad:
            _accumulate(z, (g2 @ cols.T).reshape(z.shape))
        if x.requires_grad:
            _accumulate(x, _col2im(zv.T @ g2, x.shape, h, w, 1, ho, wo))

    return _node(out, (z, x), "xcorr", _back)


# ----------------------------------------------------------------------------
# pooling


def maxpool2d(x, window=3, stride=2) -> Tensor:
    """Per-channel max over ``window`` x ``window`` patches.

    The backward pass routes each cell's gradient to the first maximal
    element of its window in row-major order.
    """
    x = as_tensor(x)
    c, h, w = x.shape
    ho, wo = _window_out(h, w, window, window, stride, 0)
    s0, s1, s2 = x.data.strides
    view = as_strided(x.data, (c, ho, wo, window, window), (s0, s1 * stride, s2 * stride, s1, s2))
    flat = view.reshape(c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _back(g):
        dx = np.zeros_like(x.data)
        h_end = stride * (ho - 1) + 1
        w_end = stride * (wo - 1) + 1
        for k in range(window * window):
            i, j = divmod(k, window)
            dx[:, i : i + h_end : stride, j : j + w_end : stride] += np.where(arg == k, g, 0.0)
        _accumulate(x, dx)

    node = _node(out, (x,), "maxpool2d", _back)
    node.pattern = arg
    return node


def block_maxpool(x, row_edges, col_edges) -> Tensor:
    """Max over the rectangular blocks given by partition edges on each axis."""
    x = as_tensor(x)
    c, h, w = x.shape
    if row_edges[0] != 0 or row_edges[-1] != h or col_edges[0] != 0 or col_edges[-1] != w:
        raise ShapeError(f"partition {row_edges} x {col_edges} does not cover {h}x{w}")
    nr, nc = len(row_edges) - 1, len(col_edges) - 1
    out = np.empty((c, nr, nc), dtype=x.data.dtype)
    args = {}
    for bi in range(nr):
        r0, r1 = row_edges[bi], row_edges[bi + 1]
        for bj in range(nc):
            c0, c1 = col_edges[bj], col_edges[bj + 1]
            block = x.data[:, r0:r1, c0:c1].reshape(c, -1)
            a = block.argmax(axis=1)
            args[bi, bj] = a
            out[:, bi, bj] = block[np.arange(c), a]

    def _back(g):
        dx = np.zeros_like(x.data)
        ch = np.arange(c)
        for (bi, bj), a in args.items():
            r0, c0 = row_edges[bi], col_edges[bj]
            bw = col_edges[bj + 1] - c0
            dx[ch, r0 + a // bw, c0 + a % bw] += g[:, bi, bj]
        _accumulate(x, dx)

    node = _node(out, (x,), "block_maxpool", _back)
    node.pattern = np.stack([args[k] for k in sorted(args)])
    return node


# ----------------------------------------------------------------------------
# elementwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def _back(g):
        _accumulate(x, np.where(x.data > 0, g, 0.0))

    node = _node(out, (x,), "relu", _back)
    node.pattern = x.data > 0
    return node


def sigmoid_array(a):
    a = np.asarray(a, dtype=DTYPE)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_grad(y):
    return y * (1.0 - y)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = sigmoid_array(x.data)

    def _back(g):
        _accumulate(x, g * _sigmoid_grad(out))

    return _node(out, (x,), "sigmoid", _back)


def channel_scale(feat, weights) -> Tensor:
    """Multiply every cell of channel i by ``weights[i]``."""
    feat, weights = as_tensor(feat), as_tensor(weights)
    if weights.data.ndim != 1 or weights.shape[0] != feat.shape[0]:
        raise ShapeError(f"{weights.shape} weights for {feat.shape[0]} channels")
    wb = weights.data[:, None, None]
    out = feat.data * wb

    def _back(g):
        if feat.requires_grad:
            _accumulate(feat, g * wb)
        if weights.requires_grad:
            _accumulate(weights, (g * feat.data).sum(axis=(1, 2)))

    return _node(out, (feat, weights), "channel_scale", _back)


def channel_inner(a, b) -> Tensor:
    """Per-channel inner product of two C x H x W tensors -> vector of length C."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"channel_inner shape mismatch {a.shape} vs {b.shape}")
    out = (a.data * b.data).reshape(a.shape[0], -1).sum(axis=1)

    def _back(g):
        gb = g[:, None, None]
        if a.requires_grad:
            _accumulate(a, gb * b.data)
        if b.requires_grad:
            _accumulate(b, gb * a.data)

    return _node(out, (a, b), "channel_inner", _back)


def affine(x, scale, shift) -> Tensor:
    """``scale * x + shift`` with scalar (0-d) scale and shift."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    out = scale.data * x.data + shift.data

    def _back(g):
        if x.requires_grad:
            _accumulate(x, g * scale.data)
        if scale.requires_grad:
            _accumulate(scale, np.sum(g * x.data).reshape(scale.shape))
        if shift.requires_grad:
            _accumulate(shift, np.sum(g).reshape(shift.shape))

    return _node(out, (x, scale, shift), "affine", _back)


STANDARDIZE_EPS = 1e-12


def standardize(x) -> Tensor:
    """Subtract the mean and divide by the standard deviation over all cells.

    The variance gets a tiny floor so that a constant map comes out as zeros.
    """
    x = as_tensor(x)
    centred = x.data - x.data.mean()
    sd = np.sqrt((centred**2).mean() + STANDARDIZE_EPS)
    out = centred / sd

    def _back(g):
        n = g.size
        proj = (g * out).sum() / n
        _accumulate(x, (g - g.sum() / n - out * proj) / sd)

    return _node(out, (x,), "standardize", _back)


def softplus(u):
    """log(1 + exp(u)) without overflow."""
    u = np.asarray(u, dtype=DTYPE)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def logistic_loss(response, labels) -> Tensor:
    """Mean over cells of log(1 + exp(-labels * response)); labels are constants."""
    r = as_tensor(response)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=DTYPE)
    if r.shape != y.shape:
        raise ShapeError(f"response {r.shape} vs labels {y.shape}")
    margin = -y * r.data
    out = np.array(softplus(margin).mean())

    def _back(g):
        _accumulate(r, g * (-y) * sigmoid_array(margin) / margin.size)

    return _node(out, (r,), "logistic_loss", _back)


# ----------------------------------------------------------------------------
# resampling (inference only)


def _keys(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def _bicubic_matrix(n, factor):
    m = n * factor
    src = (np.arange(m) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    frac = src - base
    mat = np.zeros((m, n))
    rows = np.arange(m)
    for k in range(-1, 3):
        idx = np.clip(base + k, 0, n - 1)
        np.add.at(mat, (rows, idx), _keys(frac - k))
    return mat


def upsample(response, factor: int):
    """Bicubic (Keys, a = -0.5) upsampling on the cell-centre grid, edges clamped."""
    r = np.asarray(response.data if isinstance(response, Tensor) else response, dtype=DTYPE)
    if factor < 1 or int(factor) != factor:
        raise ShapeError(f"upsample factor must be a positive integer, got {factor}")
    if factor == 1:
        return r.copy()
    _, h, w = r.shape
    my = _bicubic_matrix(h, factor)
    mx = _bicubic_matrix(w, factor)
    return np.stack([my @ ch @ mx.T for ch in r])
