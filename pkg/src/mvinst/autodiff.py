"""Dense float64 tensors with taped reverse-mode differentiation.

All model math in this package runs through the primitives defined here.
Storage is a C-contiguous float64 ndarray (row-major flat layout with shape
metadata). A Tape records primitive applications in construction order,
which is already a valid topological order, so backward() is a single
reverse sweep. Tapes are built per forward pass and thrown away.
"""

from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-300


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GradCheckError(RuntimeError):
    """The function under finite-difference probing misbehaved."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape | None"] = []


class Tape:
    """Ordered record of primitive ops from one forward pass.

    Entries are (output tensor, backward rule) pairs. Replaying the rules in
    reverse populates .grad on every requires_grad tensor reachable from the
    loss.
    """

    __slots__ = ("ops",)

    def __init__(self):
        self.ops: list[tuple[Tensor, object]] = []

    def __len__(self):
        return len(self.ops)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


class no_grad:
    """Context that suspends recording (used by probes and inference)."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense n-dimensional array of float64, optionally on the tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        # np.array keeps 0-d scalars 0-d (ascontiguousarray would promote to 1-d)
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @staticmethod
    def _wrap(data: np.ndarray) -> "Tensor":
        # fast path for op outputs; data is a fresh float64 array or view
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t.grad = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; implementations below
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method-style aliases used heavily by the model code
    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _accumulate(t: Tensor, g: np.ndarray):
    # g may alias another tensor's gradient buffer: copy on first write
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _accumulate_fresh(t: Tensor, g: np.ndarray):
    # g is freshly allocated by the caller and safe to own
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_rule) -> Tensor:
    """Wrap an op result and record it when a tape is active and needed."""
    out = Tensor._wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.ops.append((out, backward_rule))
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            (_accumulate_fresh if ga is not g else _accumulate)(a, ga)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            (_accumulate_fresh if gb is not g else _accumulate)(b, gb)

    return _emit(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            (_accumulate_fresh if ga is not g else _accumulate)(a, ga)
        if b.requires_grad:
            _accumulate_fresh(b, _unbroadcast(-g, b.data.shape))

    return _emit(out_data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate_fresh(b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(out_data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accumulate_fresh(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _emit(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, -g)

    return _emit(-a.data, (a,), bw)


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            if a.data.ndim == 2 and g.ndim > 2:
                axes = (tuple(range(g.ndim - 2)) + (g.ndim - 1,),
                        tuple(range(b.data.ndim - 2)) + (b.data.ndim - 1,))
                _accumulate_fresh(a, np.tensordot(g, b.data, axes=axes))
            else:
                _accumulate_fresh(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and g.ndim > 2:
                k = a.data.shape[-1]
                _accumulate_fresh(
                    b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
                )
            else:
                _accumulate_fresh(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _emit(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _emit(out_data, (a,), bw)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inv))

    return _emit(out_data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accumulate(t, g[tuple(idx)])

    return _emit(out_data, tuple(tensors), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.data.shape}"
        )
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = a.data[idx]

    def bw(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            z[idx] = g
            _accumulate_fresh(a, z)

    return _emit(out_data, (a,), bw)


def take_rows(a, indices) -> Tensor:
    """Gather rows along the first axis (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out_data = a.data[indices]

    def bw(g):
        if a.requires_grad:
            z = np.zeros_like(a.data)
            np.add.at(z, indices, g)
            _accumulate_fresh(a, z)

    return _emit(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _emit(out_data, (a,), bw)


def tensor_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accumulate_fresh(a, np.broadcast_to(gg, a.data.shape) / n)

    return _emit(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Elementwise nonlinearities
# ---------------------------------------------------------------------------


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, g * out_data)

    return _emit(out_data, (a,), bw)


def log(a) -> Tensor:
    """Natural log floored at LOG_FLOOR; flat (zero-gradient) below the floor."""
    a = as_tensor(a)
    clamped = np.maximum(a.data, LOG_FLOOR)
    out_data = np.log(clamped)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, np.where(a.data >= LOG_FLOOR, g / clamped, 0.0))

    return _emit(out_data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, g * 0.5 / out_data)

    return _emit(out_data, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, g * out_data * (1.0 - out_data))

    return _emit(out_data, (a,), bw)


_GELU_C0 = np.sqrt(2.0 / np.pi)
_GELU_C1 = 0.044715


def gelu(a) -> Tensor:
    """tanh-approximation GELU (smooth everywhere)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C0 * x * (1.0 + _GELU_C1 * x2))
    half_1p_th = 0.5 * (1.0 + th)
    out_data = x * half_1p_th

    def bw(g):
        if a.requires_grad:
            du = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x2)
            d = half_1p_th + 0.5 * x * (1.0 - th * th) * du
            _accumulate_fresh(a, g * d)

    return _emit(out_data, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, g * np.sign(a.data))

    return _emit(out_data, (a,), bw)


def huber(a, delta: float) -> Tensor:
    """Elementwise Huber: quadratic inside |x| <= delta, linear outside."""
    a = as_tensor(a)
    x = a.data
    ax = np.abs(x)
    out_data = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))

    def bw(g):
        if a.requires_grad:
            _accumulate_fresh(a, g * np.clip(x, -delta, delta))

    return _emit(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# Softmax family and layer norm
# ---------------------------------------------------------------------------


def softmax_lastdim(a) -> Tensor:
    """Probability vectors along the last axis, max-subtracted for safety."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            _accumulate_fresh(a, out_data * (g - dot))

    return _emit(out_data, (a,), bw)


def log_softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out_data = z - lse

    def bw(g):
        if a.requires_grad:
            sm = np.exp(out_data)
            _accumulate_fresh(a, g - sm * g.sum(axis=-1, keepdims=True))

    return _emit(out_data, (a,), bw)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine map."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            _accumulate_fresh(gain, _unbroadcast(g * xhat, gain.data.shape))
        if a.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accumulate_fresh(a, inv * (dxhat - m1 - xhat * m2))

    return _emit(out_data, (a, gain, bias), bw)


# ---------------------------------------------------------------------------
# Backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: Tape):
    """Populate .grad on every requires_grad tensor reachable from loss."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for out, rule in reversed(tape.ops):
        if out.grad is not None:
            rule(out.grad)


def grad_check(f, params: list[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients of f() against central differences.

    f is a zero-argument callable closing over params that returns a scalar
    Tensor. Returns the worst relative error
    |analytic - numeric| / max(1, |analytic|, |numeric|) over all entries.
    """
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    base = float(loss.data)
    backward(loss, tape)
    analytic = [
        np.array(p.grad) if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    with no_grad():
        probe = float(f().data)
        if probe != base:
            raise GradCheckError(
                f"function is not deterministic: {base!r} then {probe!r} at the same point"
            )
        worst = 0.0
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f().data)
                flat[i] = orig - eps
                fm = float(f().data)
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * eps)
                err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]), abs(numeric))
                if err > worst:
                    worst = err
    return worst
