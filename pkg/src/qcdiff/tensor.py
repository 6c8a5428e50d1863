"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is recorded dynamically: every op returns a new Tensor holding a
closure that routes the output gradient to its parents. `backward()` on a
scalar walks the graph in reverse topological order and accumulates into
`.grad` (a plain ndarray) of every reachable tensor with requires_grad.

Conventions:
  * data is always float32; reductions may use float64 internally
  * tensors are immutable once created, apart from gradient accumulation
  * `no_grad()` disables graph recording (used by samplers)
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError, ParameterError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _f32(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float32))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Backpropagate from a scalar; accumulates into .grad of the graph."""
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        global _ACTIVE
        _ACTIVE = {id(self): np.ones_like(self.data)}
        try:
            for node in reversed(topo):
                g = _ACTIVE.get(id(node))
                if g is not None and node._backward_fn is not None:
                    node._backward_fn(g)
            for node in topo:
                g = _ACTIVE.get(id(node))
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
        finally:
            _ACTIVE = None

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, _as_tensor(other) * -1.0)

    def __rsub__(self, other):
        return add(_as_tensor(other), self * -1.0)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def swap_last(self):
        """Transpose the last two axes (matmul helper)."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


_ACTIVE: dict[int, np.ndarray] | None = None


def _accum(t: Tensor, g: np.ndarray):
    """Accumulate a gradient contribution for `t` within the active pass."""
    if not t.requires_grad or _ACTIVE is None:
        return
    g = np.asarray(g).astype(np.float32, copy=False)
    prev = _ACTIVE.get(id(t))
    _ACTIVE[id(t)] = g if prev is None else prev + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _record(data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(data, (a, b), bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data**exponent

    def bwd(g):
        _accum(a, g * exponent * a.data ** (exponent - 1.0))

    return _record(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * data)

    return _record(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _record(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accum(a, g * data * (1.0 - data))

    return _record(data, (a,), bwd)


def silu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def bwd(g):
        _accum(a, g * (s + a.data * s * (1.0 - s)))

    return _record(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(np.float32)

    def bwd(g):
        _accum(a, g * mask)

    return _record(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - data * data))

    return _record(data, (a,), bwd)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    mask = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        _accum(a, g * mask)

    return _record(data, (a,), bwd)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(old))

    return _record(data, (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        _accum(a, np.ascontiguousarray(g.transpose(inv)))

    return _record(data, (a,), bwd)


def take(a: Tensor, idx) -> Tensor:
    """Indexing; supports basic slices and integer-array lookup."""
    a = _as_tensor(a)
    data = a.data[idx]
    advanced = isinstance(idx, np.ndarray) or (
        isinstance(idx, tuple) and any(isinstance(i, np.ndarray) for i in idx)
    )

    def bwd(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        _accum(a, full)

    return _record(np.ascontiguousarray(data), (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return _record(data, tuple(tensors), bwd)


def upsample_nearest2x(a: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    a = _as_tensor(a)
    if a.ndim != 4:
        raise DimensionError(f"upsample_nearest2x expects NCHW, got {a.shape}")
    data = a.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _record(data, (a,), bwd)


def downsample2x(a: Tensor) -> Tensor:
    """Stride-2 spatial subsampling (top-left corner of each 2x2 block)."""
    if a.ndim != 4:
        raise DimensionError(f"downsample2x expects NCHW, got {a.shape}")
    return take(a, (slice(None), slice(None), slice(None, None, 2), slice(None, None, 2)))


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(np.float32)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g.reshape((1,) * a.ndim), a.data.shape))
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, axes)
            _accum(a, np.broadcast_to(g, a.data.shape))

    return _record(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _record(data, (a, b), bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Numerically stabilized softmax over the last axis."""
    a = _as_tensor(a)
    if a.ndim == 0 or a.data.shape[-1] < 1:
        raise DimensionError(f"softmax_lastdim needs a non-empty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        _accum(a, data * (g - inner))

    return _record(data, (a,), bwd)


def log_softmax_lastdim(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim == 0 or a.data.shape[-1] < 1:
        raise DimensionError(f"log_softmax_lastdim needs a non-empty last axis, got {a.shape}")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse
    soft = np.exp(data)

    def bwd(g):
        _accum(a, g - soft * g.sum(axis=-1, keepdims=True))

    return _record(data, (a,), bwd)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ParameterError(f"layernorm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise DimensionError(
            f"layernorm affine shapes {gain.shape}/{bias.shape} must match last dim ({d},)"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + bias.data

    def bwd(g):
        red = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=red))
        _accum(bias, g.sum(axis=red))
        gx = g * gain.data
        gm = gx.mean(axis=-1, keepdims=True)
        gxx = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(x, (gx - gm - xhat * gxx) * inv)

    return _record(data.astype(np.float32), (x, gain, bias), bwd)


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """GroupNorm over an NCHW tensor with per-channel affine."""
    if eps <= 0:
        raise ParameterError(f"group_norm eps must be positive, got {eps}")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise DimensionError(f"channels {c} not divisible by groups {groups}")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError("group_norm affine parameters must have shape (C,)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    gq = gain.data.reshape(1, c, 1, 1)
    data = xhat * gq + bias.data.reshape(1, c, 1, 1)

    def bwd(g):
        _accum(gain, (g * xhat).sum(axis=(0, 2, 3)))
        _accum(bias, g.sum(axis=(0, 2, 3)))
        gx = (g * gq).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gm = gx.mean(axis=2, keepdims=True)
        gxx = (gx * xh).mean(axis=2, keepdims=True)
        _accum(x, ((gx - gm - xh * gxx) * inv).reshape(n, c, h, w))

    return _record(data.astype(np.float32), (x, gain, bias), bwd)


# -- convolution -------------------------------------------------------------


def _im2col_nhwc(xp: np.ndarray, kh: int, kw: int, ho: int, wo: int) -> np.ndarray:
    """(N*HO*WO, kh*kw*C) patch matrix from padded NHWC input via slab copies."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh * kw * c), dtype=np.float32)
    i = 0
    for dy in range(kh):
        for dx in range(kw):
            cols[..., i * c : (i + 1) * c] = xp[:, dy : dy + ho, dx : dx + wo, :]
            i += 1
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, padding: int) -> Tensor:
    """Stride-1 2-d cross-correlation of NCHW input with OCkk kernel.

    Implemented as one GEMM over an NHWC patch matrix; the patch matrix is
    rebuilt in the backward pass rather than stored, trading a cheap set of
    slab copies for a much smaller autodiff graph footprint.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW and OCkk, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if c != ck:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ParameterError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if padding < 0 or padding > kh - 1:
        raise ParameterError(f"conv2d padding must be in [0, {kh - 1}], got {padding}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    xp = np.ascontiguousarray(
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))).transpose(
            0, 2, 3, 1
        )
    )  # padded NHWC
    # weight rows ordered (dy, dx, c) to match the patch-matrix layout
    wm = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0).reshape(kh * kw * c, o))
    cols = _im2col_nhwc(xp, kh, kw, ho, wo)
    data = np.ascontiguousarray((cols @ wm).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bwd(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        cols_b = _im2col_nhwc(xp, kh, kw, ho, wo)
        dw = cols_b.T @ gn  # (kh*kw*c, o)
        _accum(kernel, dw.reshape(kh, kw, c, o).transpose(3, 2, 0, 1))
        dcols = (gn @ wm.T).reshape(n, ho, wo, kh * kw * c)
        dxp = np.zeros_like(xp)
        i = 0
        for dy in range(kh):
            for dx in range(kw):
                dxp[:, dy : dy + ho, dx : dx + wo, :] += dcols[..., i * c : (i + 1) * c]
                i += 1
        if padding:
            dxp = dxp[:, padding:-padding, padding:-padding, :]
        _accum(x, np.ascontiguousarray(dxp.transpose(0, 3, 1, 2)))

    return _record(data, (x, kernel), bwd)
