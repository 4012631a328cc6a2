"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Values are plain ``numpy.ndarray``s; a :class:`DiffNode` pairs a value with a
gradient slot and a backward rule. Graphs are built define-by-run, one graph
per training step, and discarded after :func:`backward`. Two precisions are
supported: float32 for training, float64 for gradient verification.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DiffNode",
    "EngineError",
    "abs_",
    "add",
    "asnode",
    "avg_pool1d",
    "backward",
    "concat",
    "constant",
    "conv1d",
    "conv1d_transposed",
    "conv2d",
    "default_dtype",
    "elu",
    "embed_rows",
    "frame_signal",
    "identity_grad_node",
    "l1_norm",
    "l2_norm",
    "leaky_relu",
    "linear",
    "log",
    "matmul",
    "maximum",
    "mean",
    "mul",
    "narrow",
    "neg",
    "no_grad",
    "parameter",
    "relu",
    "repeat_frames",
    "reshape",
    "rfft2ch",
    "set_default_dtype",
    "set_strict_finite",
    "sqrt",
    "stop_gradient",
    "sub",
    "sum_",
    "tanh",
    "transpose",
]


class EngineError(ValueError):
    """Shape or domain violation while building or running a graph."""


_default_dtype = np.dtype(np.float32)
_grad_enabled = True
_strict_finite = False


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise EngineError(f"unsupported dtype {dt}; use float32 or float64")
    _default_dtype = dt


def default_dtype() -> np.dtype:
    return _default_dtype


def set_strict_finite(on: bool) -> None:
    """When on, every op output is checked for NaN/Inf (error state)."""
    global _strict_finite
    _strict_finite = bool(on)


class no_grad:
    """Context manager: ops executed inside produce leaf nodes (no graph)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


class DiffNode:
    """A tensor in the computation graph: value, gradient slot, backward rule.

    The gradient array always has the value's shape and is allocated lazily;
    a node the loss never reaches keeps an all-zero gradient.
    """

    __slots__ = ("value", "parents", "name", "requires_grad", "_grad", "_pass_grad", "_backward")

    def __init__(self, value: np.ndarray, parents=(), backward=None, name="",
                 requires_grad=None):
        self.value = value
        self.parents = tuple(parents)
        self._backward = backward
        self._grad = None
        self._pass_grad = None
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    def accumulate_grad(self, g) -> None:
        """Add into the gradient being built by the current backward pass.

        Constants (requires_grad False) ignore contributions, so whole
        subgraphs hanging off fixed inputs are pruned from the sweep.
        """
        if not self.requires_grad:
            return
        if self._pass_grad is None:
            # copy: g may be a view into another node's buffer
            self._pass_grad = np.array(np.broadcast_to(g, self.value.shape))
        else:
            self._pass_grad += g

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffNode(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    # arithmetic sugar; scalars and ndarrays are coerced to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(asnode(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, DiffNode):
            raise EngineError("node/node division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def asnode(x, dtype=None) -> DiffNode:
    """Wrap a scalar or array as a constant leaf node (no parents)."""
    if isinstance(x, DiffNode):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else _default_dtype)
    return DiffNode(arr)


def constant(x, dtype=None) -> DiffNode:
    return asnode(x, dtype)


def parameter(x, name="") -> DiffNode:
    """A trainable leaf; value is copied so the caller's array stays untouched."""
    arr = np.array(x, dtype=_default_dtype, copy=True)
    return DiffNode(arr, name=name, requires_grad=True)


def _node(value, parents, backward_fn) -> DiffNode:
    if _strict_finite and not np.all(np.isfinite(value)):
        raise EngineError("non-finite value produced by a forward op")
    if not _grad_enabled:
        return DiffNode(value)
    return DiffNode(value, parents, backward_fn)


def _coerce_pair(a, b):
    if isinstance(a, DiffNode):
        b = asnode(b, a.dtype)
    else:
        a = asnode(a, b.dtype)
    if a.dtype != b.dtype:
        raise EngineError(f"mixed dtypes {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape of a broadcast operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> DiffNode:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _node(a.value + b.value, (a, b), bwd)


def sub(a, b) -> DiffNode:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(-_unbroadcast(g, b.shape))

    return _node(a.value - b.value, (a, b), bwd)


def mul(a, b) -> DiffNode:
    a, b = _coerce_pair(a, b)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), bwd)


def neg(a) -> DiffNode:
    a = asnode(a)

    def bwd(g):
        a.accumulate_grad(-g)

    return _node(-a.value, (a,), bwd)


def leaky_relu(x: DiffNode, alpha: float) -> DiffNode:
    v = x.value
    dt = v.dtype.type

    def bwd(g):
        # subgradient 0 at the kink
        factor = np.where(v > 0, dt(1), np.where(v < 0, dt(alpha), dt(0)))
        x.accumulate_grad(g * factor)

    return _node(np.where(v > 0, v, dt(alpha) * v), (x,), bwd)


def relu(x: DiffNode) -> DiffNode:
    return leaky_relu(x, 0.0)


def elu(x: DiffNode) -> DiffNode:
    v = x.value
    one = v.dtype.type(1)
    e = np.exp(np.minimum(v, 0))  # clamp keeps exp vectorized and overflow-free
    out = np.where(v > 0, v, e - one)

    def bwd(g):
        x.accumulate_grad(g * np.where(v > 0, one, e))

    return _node(out, (x,), bwd)


def tanh(x: DiffNode) -> DiffNode:
    out = np.tanh(x.value)

    def bwd(g):
        x.accumulate_grad(g * (1.0 - out * out))

    return _node(out, (x,), bwd)


def abs_(x: DiffNode) -> DiffNode:
    v = x.value

    def bwd(g):
        x.accumulate_grad(g * np.sign(v))  # sign(0) == 0: subgradient at the kink

    return _node(np.abs(v), (x,), bwd)


def log(x: DiffNode) -> DiffNode:
    v = x.value
    if np.any(v <= 0):
        raise EngineError("log requires strictly positive input")

    def bwd(g):
        x.accumulate_grad(g / v)

    return _node(np.log(v), (x,), bwd)


def sqrt(x: DiffNode) -> DiffNode:
    v = x.value
    if np.any(v <= 0):
        raise EngineError("sqrt requires strictly positive input (gradient at 0 is unbounded)")
    out = np.sqrt(v)

    def bwd(g):
        x.accumulate_grad(g * (0.5 / out))

    return _node(out, (x,), bwd)


def maximum(x: DiffNode, floor: float) -> DiffNode:
    """Elementwise max with a constant floor; gradient is 0 at and below it."""
    v = x.value

    def bwd(g):
        x.accumulate_grad(g * (v > floor).astype(v.dtype))

    return _node(np.maximum(v, floor), (x,), bwd)


def sum_(x: DiffNode, axis=None) -> DiffNode:
    v = x.value

    def bwd(g):
        if axis is None:
            x.accumulate_grad(np.broadcast_to(g, v.shape))
        else:
            x.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), v.shape))

    return _node(v.sum(axis=axis), (x,), bwd)


def mean(x: DiffNode, axis=None) -> DiffNode:
    n = x.value.size if axis is None else x.value.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def l1_norm(x: DiffNode) -> DiffNode:
    return sum_(abs_(x))


def l2_norm(x: DiffNode, axis=None) -> DiffNode:
    """Euclidean norm over `axis` (all elements when None); subgradient 0 at 0."""
    v = x.value
    sq = (v * v).sum(axis=axis)
    out = np.sqrt(sq)

    def bwd(g):
        denom = np.where(out == 0, 1.0, out)
        scale = g / denom
        if axis is not None:
            scale = np.expand_dims(scale, axis)
        x.accumulate_grad(v * scale)  # v == 0 wherever out == 0

    return _node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: DiffNode, b) -> DiffNode:
    a = asnode(a)
    b = asnode(b, a.dtype)
    if b.ndim != 2 or a.ndim < 2:
        raise EngineError("matmul expects a stack of matrices @ a 2-D matrix")
    if a.shape[-1] != b.shape[0]:
        raise EngineError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.value.T)
        if b.requires_grad:
            lead = tuple(range(a.ndim - 1))
            b.accumulate_grad(np.tensordot(a.value, g, axes=(lead, lead)))

    return _node(a.value @ b.value, (a, b), bwd)


def linear(x: DiffNode, w: DiffNode, b: DiffNode) -> DiffNode:
    """y = x @ w + b for x [..., Din], w [Din, Dout], b [Dout]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise EngineError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    if b.shape != (w.shape[1],):
        raise EngineError(f"linear bias shape {b.shape} != ({w.shape[1]},)")
    return add(matmul(x, w), b)


def concat(nodes, axis: int) -> DiffNode:
    nodes = [asnode(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for n, lo, hi in zip(nodes, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            n.accumulate_grad(g[tuple(idx)])

    return _node(np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), bwd)


def narrow(x: DiffNode, axis: int, start: int, length: int) -> DiffNode:
    """Contiguous slice along one axis; backward pads with zeros."""
    if start < 0 or start + length > x.shape[axis]:
        raise EngineError(f"narrow [{start}:{start + length}) outside axis of {x.shape[axis]}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(g):
        buf = np.zeros_like(x.value)
        buf[idx] = g
        x.accumulate_grad(buf)

    return _node(np.ascontiguousarray(x.value[idx]), (x,), bwd)


def reshape(x: DiffNode, shape) -> DiffNode:
    old = x.value.shape

    def bwd(g):
        x.accumulate_grad(g.reshape(old))

    return _node(x.value.reshape(shape), (x,), bwd)


def transpose(x: DiffNode, axes) -> DiffNode:
    inv = np.argsort(axes)

    def bwd(g):
        x.accumulate_grad(g.transpose(inv))

    return _node(x.value.transpose(axes), (x,), bwd)


def repeat_frames(x: DiffNode, factor: int, axis: int = 0) -> DiffNode:
    """Duplicate each slice along `axis` `factor` times (frame replication)."""
    if factor < 1:
        raise EngineError("repeat factor must be >= 1")
    v = x.value

    def bwd(g):
        shp = v.shape[:axis] + (v.shape[axis], factor) + v.shape[axis + 1 :]
        x.accumulate_grad(g.reshape(shp).sum(axis=axis + 1))

    return _node(np.repeat(v, factor, axis=axis), (x,), bwd)


def stop_gradient(x: DiffNode) -> DiffNode:
    """Forward-identity marker whose backward contributes exactly zero."""
    return DiffNode(x.value)


def identity_grad_node(value: np.ndarray, source: DiffNode) -> DiffNode:
    """Carry `value` forward while passing upstream gradients to `source`
    unchanged (the straight-through construction)."""
    if value.shape != source.shape:
        raise EngineError(f"identity_grad_node shape {value.shape} != source {source.shape}")

    def bwd(g):
        source.accumulate_grad(g)

    return _node(value, (source,), bwd)


def embed_rows(table: DiffNode, indices) -> DiffNode:
    """Row gather table[indices]; backward scatter-adds into the table."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise EngineError("embed_rows expects a flat index vector")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise EngineError("embed_rows index out of range")

    def bwd(g):
        buf = np.zeros_like(table.value)
        np.add.at(buf, idx, g)
        table.accumulate_grad(buf)

    return _node(table.value[idx], (table,), bwd)


# ---------------------------------------------------------------------------
# convolutions


def _pad_last(v, pad):
    if pad == 0:
        return v
    width = [(0, 0)] * (v.ndim - 1) + [(pad, pad)]
    return np.pad(v, width)


def _overlap_add(frames: np.ndarray, stride: int, total_len: int) -> np.ndarray:
    """Scatter-add [..., F, K] frames placed every `stride` samples into
    [..., total_len]. Frames are grouped by phase so each pass writes
    disjoint contiguous blocks."""
    F, K = frames.shape[-2], frames.shape[-1]
    q = -(-K // stride)  # ceil: frames q apart no longer overlap
    span = q * stride
    ext = max(total_len, (F - 1) * stride + span) if F else total_len
    out = np.zeros(frames.shape[:-2] + (ext,), dtype=frames.dtype)
    if span == K:
        fp = frames
    else:
        fp = np.zeros(frames.shape[:-1] + (span,), dtype=frames.dtype)
        fp[..., :K] = frames
    for r in range(q):
        grp = fp[..., r::q, :]
        nj = grp.shape[-2]
        if nj == 0:
            continue
        start = r * stride
        out[..., start : start + nj * span] += grp.reshape(grp.shape[:-2] + (nj * span,))
    return out[..., :total_len]


def conv1d(x: DiffNode, kernel: DiffNode, stride: int, padding: int = 0,
           bias: DiffNode | None = None) -> DiffNode:
    """Cross-correlation of x [C,T] or [B,C,T] with kernel [Cout,C,K], plus an
    optional fused per-channel bias.

    Output length is floor((T + 2*padding - K) / stride) + 1.
    """
    squeeze = x.ndim == 2
    v = x.value[None] if squeeze else x.value
    k = kernel.value
    if v.ndim != 3 or k.ndim != 3 or v.shape[1] != k.shape[1]:
        raise EngineError(f"conv1d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise EngineError("stride must be >= 1")
    B, C, T = v.shape
    O, _, K = k.shape
    if K > T + 2 * padding:
        raise EngineError("kernel larger than padded input")
    vp = _pad_last(v, padding)
    if stride == 1:
        # accumulate shifted taps; avoids materializing the im2col buffer
        Tp = T + 2 * padding - K + 1
        out = np.zeros((B, O, Tp), dtype=v.dtype)
        for kk in range(K):
            out += np.tensordot(k[:, :, kk], vp[:, :, kk : kk + Tp], axes=([1], [1])).transpose(1, 0, 2)
        flat = None
    else:
        win = np.lib.stride_tricks.sliding_window_view(vp, K, axis=-1)[:, :, ::stride, :]
        Tp = win.shape[2]
        flat = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * Tp, C * K)
        out = (flat @ k.reshape(O, C * K).T).reshape(B, Tp, O).transpose(0, 2, 1)
    if bias is not None:
        if bias.shape != (O,):
            raise EngineError(f"bias shape {bias.shape} != ({O},)")
        out += bias.value[:, None]

    if stride == 1:

        def bwd(g):
            gb = g[None] if squeeze else g  # [B,O,Tp]
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gb.sum(axis=(0, 2)))
            if kernel.requires_grad:
                dk = np.empty_like(k)
                for kk in range(K):
                    dk[:, :, kk] = np.tensordot(gb, vp[:, :, kk : kk + Tp], axes=([0, 2], [0, 2]))
                kernel.accumulate_grad(dk)
            if x.requires_grad:
                # correlate the padded gradient with the flipped kernel
                gp = np.pad(gb, ((0, 0), (0, 0), (K - 1, K - 1)))
                gwin = np.lib.stride_tricks.sliding_window_view(gp, K, axis=-1)
                gflat = np.ascontiguousarray(gwin.transpose(0, 2, 1, 3)).reshape(-1, O * K)
                kflip = np.ascontiguousarray(k[:, :, ::-1].transpose(1, 0, 2)).reshape(C, O * K)
                n_pos = gwin.shape[2]
                dxp = (gflat @ kflip.T).reshape(B, n_pos, C).transpose(0, 2, 1)
                dx = dxp[:, :, padding : padding + T] if padding else dxp[:, :, : T]
                x.accumulate_grad(dx[0] if squeeze else dx)

    else:

        def bwd(g):
            gb = g[None] if squeeze else g  # [B,O,Tp]
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(gb.sum(axis=(0, 2)))
            gf = np.ascontiguousarray(gb.transpose(0, 2, 1)).reshape(B * Tp, O)
            if kernel.requires_grad:
                kernel.accumulate_grad((gf.T @ flat).reshape(O, C, K))
            if x.requires_grad:
                dwin = (gf @ k.reshape(O, C * K)).reshape(B, Tp, C, K).transpose(0, 2, 1, 3)
                dxp = _overlap_add(dwin, stride, T + 2 * padding)
                dx = dxp[:, :, padding : padding + T] if padding else dxp
                x.accumulate_grad(dx[0] if squeeze else dx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out[0] if squeeze else out, parents, bwd)


def conv1d_transposed(x: DiffNode, kernel: DiffNode, stride: int, padding: int = 0,
                      bias: DiffNode | None = None) -> DiffNode:
    """Adjoint of conv1d with the same kernel/stride/padding, plus an
    optional fused per-channel bias.

    x is [Co,T] or [B,Co,T], kernel [Co,Ci,K]; output length is
    (T-1)*stride + K - 2*padding.
    """
    squeeze = x.ndim == 2
    v = x.value[None] if squeeze else x.value
    k = kernel.value
    if v.ndim != 3 or k.ndim != 3 or v.shape[1] != k.shape[0]:
        raise EngineError(f"conv1d_transposed shape mismatch: x {x.shape}, kernel {kernel.shape}")
    if stride < 1:
        raise EngineError("stride must be >= 1")
    B, O, T = v.shape
    _, C, K = k.shape
    L = (T - 1) * stride + K
    if 2 * padding >= L:
        raise EngineError("padding swallows the whole output")
    spread = np.tensordot(v, k, axes=([1], [0]))  # [B,T,C,K]
    spread = spread.transpose(0, 2, 1, 3)  # [B,C,T,K]
    full = _overlap_add(spread, stride, L)
    out = full[:, :, padding : L - padding] if padding else full
    if bias is not None:
        if bias.shape != (C,):
            raise EngineError(f"bias shape {bias.shape} != ({C},)")
        out += bias.value[:, None]

    def bwd(g):
        gb = g[None] if squeeze else g
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=(0, 2)))
        gfull = np.zeros((B, C, L), dtype=v.dtype) if padding else None
        if padding:
            gfull[:, :, padding : L - padding] = gb
        else:
            gfull = gb
        win = np.lib.stride_tricks.sliding_window_view(gfull, K, axis=-1)[:, :, ::stride, :]
        flat = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B * T, C * K)
        if x.requires_grad:
            dx = (flat @ k.reshape(O, C * K).T).reshape(B, T, O).transpose(0, 2, 1)
            x.accumulate_grad(dx[0] if squeeze else dx)
        if kernel.requires_grad:
            vf = np.ascontiguousarray(v.transpose(0, 2, 1)).reshape(B * T, O)
            kernel.accumulate_grad((vf.T @ flat).reshape(O, C, K))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out[0] if squeeze else out, parents, bwd)


def conv2d(x: DiffNode, kernel: DiffNode, stride, padding,
           bias: DiffNode | None = None) -> DiffNode:
    """Cross-correlation of x [C,H,W] or [B,C,H,W] with kernel [Cout,C,Kh,Kw],
    plus an optional fused per-channel bias."""
    squeeze = x.ndim == 3
    v = x.value[None] if squeeze else x.value
    k = kernel.value
    if v.ndim != 4 or k.ndim != 4 or v.shape[1] != k.shape[1]:
        raise EngineError(f"conv2d shape mismatch: x {x.shape}, kernel {kernel.shape}")
    sh, sw = stride
    ph, pw = padding
    B, C, H, W = v.shape
    O, _, Kh, Kw = k.shape
    if Kh > H + 2 * ph or Kw > W + 2 * pw:
        raise EngineError("kernel larger than padded input")
    vp = np.pad(v, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(vp, (Kh, Kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Hp, Wp = win.shape[2], win.shape[3]
    flat = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Hp * Wp, C * Kh * Kw)
    out = (flat @ k.reshape(O, -1).T).reshape(B, Hp, Wp, O).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (O,):
            raise EngineError(f"bias shape {bias.shape} != ({O},)")
        out += bias.value[:, None, None]

    def bwd(g):
        gb = g[None] if squeeze else g
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gb.sum(axis=(0, 2, 3)))
        gf = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(B * Hp * Wp, O)
        if kernel.requires_grad:
            kernel.accumulate_grad((gf.T @ flat).reshape(O, C, Kh, Kw))
        if x.requires_grad:
            dwin = (gf @ k.reshape(O, -1)).reshape(B, Hp, Wp, C, Kh, Kw).transpose(0, 3, 1, 2, 4, 5)
            # loop height taps; scatter the width axis by grouped overlap-add
            dxp = np.zeros_like(vp)
            for ih in range(Kh):
                rows = _overlap_add(np.ascontiguousarray(dwin[:, :, :, :, ih, :]), sw, W + 2 * pw)
                dxp[:, :, ih : ih + Hp * sh : sh, :] += rows
            dx = dxp[:, :, ph : ph + H, pw : pw + W]
            x.accumulate_grad(dx[0] if squeeze else dx)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out[0] if squeeze else out, parents, bwd)


def avg_pool1d(x: DiffNode, factor: int) -> DiffNode:
    """Non-overlapping mean pooling along the last axis (length must divide)."""
    if factor == 1:
        return x
    T = x.shape[-1]
    if T % factor:
        raise EngineError(f"pool factor {factor} does not divide length {T}")
    pooled = reshape(x, x.shape[:-1] + (T // factor, factor))
    return mean(pooled, axis=-1)


# ---------------------------------------------------------------------------
# signal framing and FFT


def frame_signal(x: DiffNode, window_length: int, hop: int) -> DiffNode:
    """Slice [..., T] into overlapping frames [..., F, window_length]."""
    T = x.shape[-1]
    if hop < 1:
        raise EngineError("hop must be >= 1")
    if T < window_length:
        raise EngineError("signal shorter than one window")
    F = (T - window_length) // hop + 1
    v = np.ascontiguousarray(
        np.lib.stride_tricks.sliding_window_view(x.value, window_length, axis=-1)[..., ::hop, :]
    )

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(_overlap_add(g, hop, T))

    return _node(v, (x,), bwd)


def _rfft_adjoint(cotangent: np.ndarray, n: int, dtype) -> np.ndarray:
    """Adjoint of the one-sided FFT (viewed as a real-linear map) applied to
    a complex cotangent: sum_k Re(g_k e^{2pi i k t / n}).

    Imaginary parts of the DC and Nyquist cotangents have no preimage and
    drop out; interior bins are halved so a single irfft does the job.
    """
    h = cotangent.copy()
    if n % 2 == 0:
        h[..., 1:-1] *= 0.5
        h[..., -1] = h[..., -1].real
    else:
        h[..., 1:] *= 0.5
    h[..., 0] = h[..., 0].real
    return (np.fft.irfft(h, n=n, axis=-1) * n).astype(dtype, copy=False)


def rfft_power_project(frames: DiffNode, proj: np.ndarray) -> DiffNode:
    """Fused |rfft(frames)|^2 @ proj for [..., F, N] frames and a constant
    [N//2+1, M] projection matrix (one op keeps the mel loss path cheap)."""
    v = frames.value
    N = v.shape[-1]
    proj = np.asarray(proj, dtype=v.dtype)
    if proj.ndim != 2 or proj.shape[0] != N // 2 + 1:
        raise EngineError(f"projection shape {proj.shape} does not match {N // 2 + 1} bins")
    spec = np.fft.rfft(v, axis=-1)
    pairs = spec.view(v.dtype).reshape(spec.shape + (2,))
    power = np.einsum("...kc,...kc->...k", pairs, pairs)
    out = power @ proj

    def bwd(g):
        if not frames.requires_grad:
            return
        dpower = g @ proj.T
        frames.accumulate_grad(_rfft_adjoint(spec * (2.0 * dpower), N, v.dtype))

    return _node(out, (frames,), bwd)


def rfft2ch(frames: DiffNode) -> DiffNode:
    """Real FFT of [..., F, N] frames, returned as [..., 2, F, N//2+1]
    with real and imaginary parts as separate leading channels."""
    v = frames.value
    N = v.shape[-1]
    spec = np.fft.rfft(v, axis=-1)
    out = np.stack([spec.real, spec.imag], axis=-3).astype(v.dtype)

    def bwd(g):
        if not frames.requires_grad:
            return
        gc = g[..., 0, :, :] + 1j * g[..., 1, :, :]
        frames.accumulate_grad(_rfft_adjoint(gc, N, v.dtype))

    return _node(out, (frames,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def _toposort(root: DiffNode):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffNode) -> None:
    """Accumulate d(loss)/d(node) into every node reachable from `loss`.

    Repeated calls without zero_grad add up, matching gradient accumulation.
    """
    if loss.value.size != 1:
        raise EngineError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    loss.accumulate_grad(np.ones_like(loss.value))
    for node in reversed(order):
        g = node._pass_grad
        if g is None:
            continue
        if node._backward is not None:
            node._backward(g)
        node._grad = g if node._grad is None else node._grad + g
        node._pass_grad = None
