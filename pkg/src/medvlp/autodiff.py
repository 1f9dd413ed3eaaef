"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable operation records its parents and a vector-Jacobian
closure on the output tensor; ``Tensor.backward`` walks the recorded graph in
reverse topological order. All math is float64 numpy, single-threaded and
bit-deterministic. Fused primitives (layer norm, multi-head attention,
softmax) carry hand-written backward rules; ``finite_diff_check`` is the
independent oracle used to validate them.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Module-wide switch: when False, no graph is recorded (forward only).
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (pure forward passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array plus an optional backward closure.

    Data is row-major and immutable by convention once produced by an
    operation; optimizers mutate leaf ``data`` in place between graph builds.
    ``grad`` is populated on leaf tensors with ``requires_grad`` after
    ``backward`` and accumulates across calls until reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """A view of the same data, cut out of the graph."""
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; floats and arrays are auto-wrapped as constants.
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Only defined for scalar outputs.
        """
        if self.data.shape != ():
            raise ShapeError(
                f"backward() requires a scalar, got shape {self.data.shape}"
            )
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req)
    if req:
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), vjp)


def recip(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = 1.0 / a.data

    def vjp(g):
        return (-g * out * out,)

    return _record(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth, so finite differences stay valid."""
    a = _wrap(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        return (g * (cdf + a.data * pdf),)

    return _record(out, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(x)), computed stably."""
    a = _wrap(a)
    out = np.logaddexp(0.0, a.data)

    def vjp(g):
        return (g * expit(a.data),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")

    def vjp(g):
        return (g.T,)

    return _record(a.data.T, (a,), vjp)


# ---------------------------------------------------------------------------
# Reductions and row selection
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record(a.data.sum(), (a,), vjp)


def mean_all(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record(a.data.mean(), (a,), vjp)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over axis 0 of a matrix; (N, C) -> (C,)."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"mean_rows expects a matrix, got shape {a.data.shape}")
    n = a.data.shape[0]

    def vjp(g):
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _record(a.data.mean(axis=0), (a,), vjp)


def take_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; also serves as embedding lookup (repeats allowed)."""
    a = _wrap(a)
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record(out, (a,), vjp)


def scatter_rows(a: Tensor, idx, rows: Tensor) -> Tensor:
    """Copy of ``a`` with rows at ``idx`` replaced by ``rows`` (no duplicates)."""
    a, rows = _wrap(a), _wrap(rows)
    idx = np.asarray(idx, dtype=np.intp)
    if len(set(idx.tolist())) != idx.size:
        raise ShapeError("scatter_rows: duplicate indices")
    out = a.data.copy()
    out[idx] = rows.data

    def vjp(g):
        ga = g.copy()
        ga[idx] = 0.0
        return ga, g[idx].copy()

    return _record(out, (a, rows), vjp)


def pick(a: Tensor, row_idx, col_idx) -> Tensor:
    """Gather elements a[r, c] pairwise; returns a vector."""
    a = _wrap(a)
    rows = np.asarray(row_idx, dtype=np.intp)
    cols = np.asarray(col_idx, dtype=np.intp)
    out = a.data[rows, cols]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, cols), g)
        return (ga,)

    return _record(out, (a,), vjp)


def stack_rows(tensors: list[Tensor]) -> Tensor:
    """Stack equal-shape vectors into a matrix, one per row."""
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=0)

    def vjp(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record(out, tuple(tensors), vjp)


def l2_normalize(a: Tensor) -> Tensor:
    """Scale a vector to unit L2 norm."""
    a = _wrap(a)
    if a.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got shape {a.data.shape}")
    n = float(np.linalg.norm(a.data))
    if n < 1e-12:
        raise ValueError("l2_normalize: zero-norm input")
    y = a.data / n

    def vjp(g):
        return ((g - y * (y @ g)) / n,)

    return _record(y, (a,), vjp)


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------


def softmax_rows(m: Tensor, scale: float) -> Tensor:
    """Row-wise softmax of ``scale * m``, stabilized by row-max subtraction.

    Every output row is nonnegative and sums to 1.
    """
    m = _wrap(m)
    if scale <= 0:
        raise ValueError(f"softmax_rows: scale must be positive, got {scale}")
    if m.ndim != 2 or m.data.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a non-empty matrix, got {m.data.shape}")
    z = scale * m.data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (scale * p * (g - dot),)

    return _record(p, (m,), vjp)


def log_softmax_rows(m: Tensor, scale: float = 1.0) -> Tensor:
    m = _wrap(m)
    z = scale * m.data
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse

    def vjp(g):
        p = np.exp(out)
        return (scale * (g - p * g.sum(axis=1, keepdims=True)),)

    return _record(out, (m,), vjp)


# ---------------------------------------------------------------------------
# Fused transformer primitives
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance (no affine part)."""
    x = _wrap(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (x,), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + b with a row-broadcast bias."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.ndim != 2 or w.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} x {w.data.shape}")
    out = x.data @ w.data + b.data

    def vjp(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), vjp)


def layer_norm_affine(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Fused layer_norm(x) * gain + bias over the last axis."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv
    out = y * gain.data + bias.data

    def vjp(g):
        gy = g * gain.data
        gm = gy.mean(axis=-1, keepdims=True)
        gyy = (gy * y).mean(axis=-1, keepdims=True)
        dx = inv * (gy - gm - y * gyy)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * y).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, gain, bias), vjp)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    n_heads: int,
    allowed: np.ndarray | None = None,
) -> Tensor:
    """Multi-head scaled dot-product attention over 2-D token matrices.

    ``q`` is (N_q, C); ``k`` and ``v`` are (N_kv, C) with C divisible by
    ``n_heads``. ``allowed`` is an optional (N_q, N_kv) boolean permission
    matrix; each query row must be allowed at least one key.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    nq, c = q.data.shape
    nkv, ck = k.data.shape
    if ck != c or v.data.shape != (nkv, c):
        raise ShapeError(
            f"attention: incompatible shapes q={q.data.shape} k={k.data.shape} "
            f"v={v.data.shape}"
        )
    if c % n_heads != 0:
        raise ShapeError(f"attention: dim {c} not divisible by {n_heads} heads")
    dh = c // n_heads
    scale = 1.0 / math.sqrt(dh)

    # (H, N, dh) views per head
    qh = q.data.reshape(nq, n_heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(nkv, n_heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(nkv, n_heads, dh).transpose(1, 0, 2)

    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    if allowed is not None:
        if allowed.shape != (nq, nkv):
            raise ShapeError(
                f"attention: permission matrix {allowed.shape} does not match "
                f"({nq}, {nkv})"
            )
        if not allowed.any(axis=1).all():
            raise ValueError("attention: a query row has no allowed keys")
        s = np.where(allowed[None, :, :], s, -np.inf)
    s = s - s.max(axis=2, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(axis=2, keepdims=True)
    out = np.matmul(p, vh).transpose(1, 0, 2).reshape(nq, c)

    def vjp(g):
        gh = g.reshape(nq, n_heads, dh).transpose(1, 0, 2)
        dp = np.matmul(gh, vh.transpose(0, 2, 1))
        ds = p * (dp - (dp * p).sum(axis=2, keepdims=True))
        dq = np.matmul(ds, kh) * scale
        dk = np.matmul(ds.transpose(0, 2, 1), qh) * scale
        dv = np.matmul(p.transpose(0, 2, 1), gh)
        return (
            dq.transpose(1, 0, 2).reshape(nq, c),
            dk.transpose(1, 0, 2).reshape(nkv, c),
            dv.transpose(1, 0, 2).reshape(nkv, c),
        )

    return _record(out, (q, k, v), vjp)


# ---------------------------------------------------------------------------
# Optimization and verification
# ---------------------------------------------------------------------------


def sgd_step(
    params: list[Tensor],
    grads: list,
    lr: float,
    momentum: float,
    velocity: list[Tensor],
) -> tuple[list[Tensor], list[Tensor]]:
    """Classical (heavy-ball) momentum update, in place.

    v <- momentum * v + g;  p <- p - lr * v
    """
    if not (len(params) == len(grads) == len(velocity)):
        raise ShapeError("sgd_step: params, grads, velocity lengths differ")
    for p, g, v in zip(params, grads, velocity):
        garr = g.data if isinstance(g, Tensor) else np.asarray(g, dtype=np.float64)
        if garr.shape != p.data.shape or v.data.shape != p.data.shape:
            raise ShapeError(
                f"sgd_step: shape mismatch param={p.data.shape} grad={garr.shape} "
                f"velocity={v.data.shape}"
            )
        v.data = momentum * v.data + garr
        p.data = p.data - lr * v.data
    return params, velocity


def finite_diff_check(loss_fn, params: Tensor, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central differences.

    Evaluates ``loss_fn(params)`` (a scalar-valued closure), backpropagates,
    then perturbs every coordinate of ``params`` by +/- eps. Returns the
    maximum elementwise relative error with denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"finite_diff_check: eps must be in (0, 1e-2], got {eps}")
    saved_grad = params.grad
    params.grad = None
    out = loss_fn(params)
    if not isinstance(out, Tensor) or out.data.shape != ():
        raise ShapeError("finite_diff_check: loss_fn must return a scalar Tensor")
    out.backward()
    analytic = (
        params.grad.copy() if params.grad is not None else np.zeros_like(params.data)
    )
    params.grad = saved_grad

    flat = params.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn(params).data)
            flat[i] = orig - eps
            fm = float(loss_fn(params).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)

    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"{what} contains non-finite values")
    return t
