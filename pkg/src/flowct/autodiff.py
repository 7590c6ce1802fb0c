"""Dense n-d tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array.  Operations executed while a `Tape` is
active are recorded when any input requires gradients; `backward` replays
the tape in exact reverse order and returns gradients for every trainable
leaf that was touched.  The op set is exactly what the volumetric networks
and losses in this package need; there is no broadcasting beyond that.

Default floating width is float32; float64 is supported throughout and is
what the finite-difference oracle in `grad_check` uses.
"""

from __future__ import annotations

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_TAPE_STACK: list["Tape"] = []
_DEBUG_CHECK_FINITE = False


def set_debug_check_finite(flag: bool) -> None:
    """When on, every op raises if its inputs contain non-finite values."""
    global _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = bool(flag)


class Tensor:
    """Value-semantic dense array with an optional gradient requirement.

    Shape is fixed at creation.  Tensors produced by recorded ops are
    non-leaf; parameters and constants are leaves.
    """

    __slots__ = ("data", "requires_grad", "_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._leaf = True

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -float(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set; divide by scalars")
        return mul(self, 1.0 / float(other))

    def mean(self):
        return mean(self)

    def sum(self):
        return tensor_sum(self)

    def abs(self):
        return tensor_abs(self)

    def min_with_scalar(self, s):
        return min_with_scalar(self, s)

    def reshape(self, shape):
        return reshape(self, shape)


class Tape:
    """Ordered record of executed ops; consumed by a single backward pass."""

    def __init__(self):
        self._records = []  # (out Tensor, backward fn)
        self._leaves = []  # trainable leaves touched by recorded ops
        self._consumed = False

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def _append(self, out, bwd_fn, inputs):
        out._leaf = False
        self._records.append((out, bwd_fn))
        for t in inputs:
            if isinstance(t, Tensor) and t._leaf and t.requires_grad:
                self._leaves.append(t)


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: Tape) -> dict:
    """Reverse sweep over the tape.

    Returns a gradient map: {leaf Tensor: gradient Tensor of same shape},
    with an entry (zero if unreached) for every trainable leaf the tape
    touched.  The tape is consumed.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    if tape._consumed:
        raise RuntimeError("backward: tape already consumed")
    tape._consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, bwd_fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        holders.pop(id(out), None)
        if g is None:
            continue
        for inp, contrib in bwd_fn(g):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
                holders[key] = inp

    result: dict[Tensor, Tensor] = {}
    for key, t in holders.items():
        if t._leaf and t.requires_grad:
            result[t] = Tensor(np.asarray(grads[key], dtype=t.data.dtype))
    for t in tape._leaves:
        if t not in result:
            result[t] = Tensor(np.zeros_like(t.data))
    return result


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, *arrays):
    if _DEBUG_CHECK_FINITE:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{op}: non-finite input detected")


def _record(out: Tensor, bwd_fn, inputs) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape._append(out, bwd_fn, inputs)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    _check_finite("add", a.data, b.data)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        contribs = []
        if a.requires_grad:
            contribs.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            contribs.append((b, _unbroadcast(g, b.shape)))
        return contribs

    return _record(out, bwd, (a, b))


def mul(a, b) -> Tensor:
    a = _lift(a, like=b if isinstance(b, Tensor) else None)
    b = _lift(b, like=a)
    _check_finite("mul", a.data, b.data)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    out = Tensor(out_data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        contribs = []
        if a.requires_grad:
            contribs.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            contribs.append((b, _unbroadcast(g * a.data, b.shape)))
        return contribs

    return _record(out, bwd, (a, b))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"matmul: expected (n,k)@(k,m) or (n,k)@(k,), got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    _check_finite("matmul", a.data, b.data)
    out = Tensor(a.data @ b.data, requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g):
        contribs = []
        if b.ndim == 1:
            if a.requires_grad:
                contribs.append((a, np.outer(g, b.data)))
            if b.requires_grad:
                contribs.append((b, a.data.T @ g))
        else:
            if a.requires_grad:
                contribs.append((a, g @ b.data.T))
            if b.requires_grad:
                contribs.append((b, a.data.T @ g))
        return contribs

    return _record(out, bwd, (a, b))


def _triple(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ValueError(f"conv3d: stride/padding must be an int or 3 ints, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3D convolution, channels-first: x (C,D,H,W), w (O,C,kd,kh,kw), bias (O,)."""
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 5:
        raise ValueError(f"conv3d: expected x (C,D,H,W) and w (O,C,kd,kh,kw), got {x.shape} and {w.shape}")
    if x.shape[0] != w.shape[1]:
        raise ValueError(f"conv3d: input channels {x.shape[0]} != kernel in-channels {w.shape[1]}")
    stride = _triple(stride)
    padding = _triple(padding)
    for ax in range(3):
        if x.shape[1 + ax] + 2 * padding[ax] < w.shape[2 + ax]:
            raise ValueError(
                f"conv3d: padded input extent {x.shape[1 + ax] + 2 * padding[ax]} smaller "
                f"than kernel extent {w.shape[2 + ax]} on axis {ax}"
            )
    _check_finite("conv3d", x.data, w.data)

    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data, dtype=x.data.dtype)
    out_data = kernels.conv3d_forward(xd, wd, stride, padding)
    if bias is not None:
        bias = _lift(bias, like=x)
        if bias.shape != (w.shape[0],):
            raise ValueError(f"conv3d: bias shape {bias.shape} != ({w.shape[0]},)")
        out_data = out_data + bias.data[:, None, None, None]
    req = x.requires_grad or w.requires_grad or (bias is not None and bias.requires_grad)
    out = Tensor(out_data, requires_grad=req)

    def bwd(g):
        g = np.ascontiguousarray(g)
        contribs = []
        if x.requires_grad:
            contribs.append((x, kernels.conv3d_grad_input(wd, g, x.shape, stride, padding)))
        if w.requires_grad:
            contribs.append((w, kernels.conv3d_grad_weight(xd, g, w.shape, stride, padding)))
        if bias is not None and bias.requires_grad:
            contribs.append((bias, g.sum(axis=(1, 2, 3))))
        return contribs

    inputs = (x, w) if bias is None else (x, w, bias)
    return _record(out, bwd, inputs)


def silu(x: Tensor) -> Tensor:
    x = _lift(x)
    _check_finite("silu", x.data)
    xd = x.data
    sig = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))), np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
    sig = sig.astype(xd.dtype)
    out = Tensor(xd * sig, requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, g * (sig * (1.0 + xd * (1.0 - sig))))]

    return _record(out, bwd, (x,))


def mean(x: Tensor) -> Tensor:
    x = _lift(x)
    _check_finite("mean", x.data)
    out = Tensor(np.mean(x.data), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, np.full_like(x.data, g / x.data.size))]

    return _record(out, bwd, (x,))


def tensor_sum(x: Tensor) -> Tensor:
    x = _lift(x)
    _check_finite("sum", x.data)
    out = Tensor(np.sum(x.data), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, np.full_like(x.data, g))]

    return _record(out, bwd, (x,))


def tensor_abs(x: Tensor) -> Tensor:
    x = _lift(x)
    _check_finite("abs", x.data)
    out = Tensor(np.abs(x.data), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, g * np.sign(x.data))]

    return _record(out, bwd, (x,))


def min_with_scalar(x: Tensor, s: float) -> Tensor:
    """Elementwise min(x, s); ties take the inside-branch gradient 1."""
    x = _lift(x)
    s = float(s)
    _check_finite("min_with_scalar", x.data)
    out = Tensor(np.minimum(x.data, s), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, g * (x.data <= s).astype(x.data.dtype))]

    return _record(out, bwd, (x,))


def masked_mean_abs(x: Tensor, m) -> Tensor:
    """sum(|x * m|) / max(sum(m), 1) with m a non-trainable 0/1 mask.

    The mask may broadcast against x (e.g. spatial mask under channels).
    """
    x = _lift(x)
    if isinstance(m, Tensor):
        if m.requires_grad:
            raise ValueError("masked_mean_abs: mask must not require gradients")
        m = m.data
    md = np.broadcast_to(np.asarray(m, dtype=x.data.dtype), x.shape)
    _check_finite("masked_mean_abs", x.data)
    denom = max(float(md.sum()), 1.0)
    out = Tensor(np.asarray(np.abs(x.data * md).sum() / denom, dtype=x.data.dtype), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, (g / denom) * md * np.sign(x.data))]

    return _record(out, bwd, (x,))


def concat_channels(tensors) -> Tensor:
    """Concatenate along axis 0 (the channel axis for (C,D,H,W) tensors)."""
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_channels: no inputs")
    trailing = {t.shape[1:] for t in tensors}
    if len(trailing) != 1:
        raise ValueError(f"concat_channels: trailing shapes differ: {sorted(trailing)}")
    for t in tensors:
        _check_finite("concat_channels", t.data)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=0),
                 requires_grad=any(t.requires_grad for t in tensors))
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return [(t, g[offsets[i]:offsets[i + 1]]) for i, t in enumerate(tensors) if t.requires_grad]

    return _record(out, bwd, tuple(tensors))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of the 3 trailing spatial axes of (C,D,H,W)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ValueError(f"upsample_nearest: expected (C,D,H,W), got {x.shape}")
    f = int(factor)
    _check_finite("upsample_nearest", x.data)
    out_data = x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
    out = Tensor(out_data, requires_grad=x.requires_grad)
    c, d, h, w = x.shape

    def bwd(g):
        return [(x, g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)))]

    return _record(out, bwd, (x,))


def downsample_avg(x: Tensor, factor: int = 2) -> Tensor:
    """Block-average pooling of the 3 trailing spatial axes of (C,D,H,W)."""
    x = _lift(x)
    if x.ndim != 4:
        raise ValueError(f"downsample_avg: expected (C,D,H,W), got {x.shape}")
    f = int(factor)
    c, d, h, w = x.shape
    if d % f or h % f or w % f:
        raise ValueError(f"downsample_avg: extents {x.shape[1:]} not divisible by factor {f}")
    _check_finite("downsample_avg", x.data)
    blocks = x.data.reshape(c, d // f, f, h // f, f, w // f, f)
    out = Tensor(blocks.mean(axis=(2, 4, 6)), requires_grad=x.requires_grad)

    def bwd(g):
        up = g.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3)
        return [(x, up / (f ** 3))]

    return _record(out, bwd, (x,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _lift(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)

    def bwd(g):
        return [(x, g.reshape(x.shape))]

    return _record(out, bwd, (x,))


_OPS = {
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv3d": lambda inputs, attrs: conv3d(*inputs, stride=attrs.get("stride", 1), padding=attrs.get("padding", 0)),
    "silu": lambda inputs, attrs: silu(*inputs),
    "mean": lambda inputs, attrs: mean(*inputs),
    "sum": lambda inputs, attrs: tensor_sum(*inputs),
    "abs": lambda inputs, attrs: tensor_abs(*inputs),
    "min_with_scalar": lambda inputs, attrs: min_with_scalar(inputs[0], attrs["scalar"]),
    "masked_mean_abs": lambda inputs, attrs: masked_mean_abs(*inputs),
    "concat_channels": lambda inputs, attrs: concat_channels(inputs),
    "upsample_nearest": lambda inputs, attrs: upsample_nearest(inputs[0], attrs.get("factor", 2)),
    "downsample_avg": lambda inputs, attrs: downsample_avg(inputs[0], attrs.get("factor", 2)),
}


def forward_op(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Dispatch-style entry point over the supported op kinds."""
    if kind not in _OPS:
        raise ValueError(f"forward_op: unknown kind {kind!r}; known: {sorted(_OPS)}")
    return _OPS[kind](list(inputs), attrs or {})


def grad_check(function, point: Tensor, epsilon: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient is computed at the point's native dtype; the
    finite-difference oracle always evaluates in float64 so its own noise
    floor stays far below the tolerances being checked.  Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8), maximized over coords.
    """
    if epsilon <= 0:
        raise ValueError("grad_check: epsilon must be positive")
    p = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = function(p)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ValueError("grad_check: function must return a scalar Tensor")
    analytic = backward(out, tape)[p].data.astype(np.float64)

    base = point.data.astype(np.float64)
    fd = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_fd = fd.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + epsilon
        hi = function(Tensor(base.copy())).item()
        flat_base[i] = orig - epsilon
        lo = function(Tensor(base.copy())).item()
        flat_base[i] = orig
        flat_fd[i] = (hi - lo) / (2.0 * epsilon)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), 1e-8)
    return float(np.max(np.abs(analytic - fd) / denom))
