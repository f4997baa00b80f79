"""Dense-tensor compute with reverse-mode differentiation.

A deliberately small op set, just enough for the adapter and its losses.
Values are numpy arrays (float32 for training, float64 for verification).
Every op returns a Tensor that records its inputs and a backward closure;
``backward`` on a scalar loss topologically sorts the reachable subgraph,
visits each node once, and accumulates gradients into ``.grad``.

``check_gradients`` is the independent oracle: it compares every analytic
gradient against 64-bit central finite differences on a rebuilt graph.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

# Toggled by set_debug_checks(); when on, every op output is scanned for
# NaN/Inf and the op fails fast instead of letting the values propagate.
_DEBUG_CHECKS = False


class ShapeError(ValueError):
    """Operand shapes or dtypes violate an op contract."""


class GraphError(RuntimeError):
    """Graph misuse: non-scalar loss, repeated backward, detached loss."""


class NumericsError(ArithmeticError):
    """Non-finite values where finite ones are required."""


def set_debug_checks(enabled: bool) -> None:
    """Fail fast on NaN/Inf after every op. Slow; meant for tests."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A dense float array plus the graph edge that produced it."""

    __slots__ = ("values", "requires_grad", "grad", "_inputs", "_backward", "_op", "_done")

    def __init__(self, values, requires_grad=False, _inputs=(), _backward=None, _op="leaf"):
        values = np.asarray(values)
        if values.dtype not in _FLOAT_DTYPES:
            values = values.astype(np.float32)
        self.values = values
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs = _inputs
        self._backward = _backward
        self._op = _op
        self._done = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    """Create a leaf tensor. Defaults to float32 unless data/dtype says otherwise."""
    arr = np.array(data, dtype=dtype, copy=True)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=requires_grad)


def as_tensor(data, dtype=None) -> Tensor:
    """Wrap data as a constant (non-trainable) tensor without copying when possible."""
    if isinstance(data, Tensor):
        return data
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _make(values, inputs, backward, op):
    """Build an op output node; drops graph edges when no input needs grad."""
    values = np.asarray(values)
    if _DEBUG_CHECKS and not np.all(np.isfinite(values)):
        raise NumericsError(f"non-finite output of op '{op}'")
    needs = any(t.requires_grad for t in inputs)
    if not needs:
        return Tensor(values, _op=op)
    return Tensor(values, requires_grad=True, _inputs=tuple(inputs), _backward=backward, _op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _check_same_dtype(*ts: Tensor) -> None:
    d0 = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != d0:
            raise ShapeError(f"mixed dtypes {d0.name} vs {t.dtype.name}; cast explicitly")


def _require_2d(t: Tensor, op: str) -> None:
    if t.values.ndim != 2:
        raise ShapeError(f"{op} needs a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# elementwise ops (any shape)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")
    out = _make(a.values + b.values, (a, b), None, "add")

    def bwd():
        _accum(a, out.grad)
        _accum(b, out.grad)

    out._backward = bwd
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} vs {b.shape}")
    out = _make(a.values - b.values, (a, b), None, "sub")

    def bwd():
        _accum(a, out.grad)
        _accum(b, -out.grad)

    out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    out = _make(a.values * b.values, (a, b), None, "mul")

    def bwd():
        _accum(a, out.grad * b.values)
        _accum(b, out.grad * a.values)

    out._backward = bwd
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    out = _make(x.values * c, (x,), None, "scale")

    def bwd():
        _accum(x, out.grad * c)

    out._backward = bwd
    return out


def add_const(x: Tensor, c) -> Tensor:
    """Add a constant scalar or array; the constant is never differentiated."""
    c = np.asarray(c, dtype=x.dtype)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"constant of shape {c.shape} does not broadcast into {x.shape}")
    out = _make(x.values + c, (x,), None, "add_const")

    def bwd():
        _accum(x, out.grad)

    out._backward = bwd
    return out


def mul_const(x: Tensor, c) -> Tensor:
    """Multiply by a constant scalar or array (broadcast into x's shape)."""
    c = np.asarray(c, dtype=x.dtype)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise ShapeError(f"constant of shape {c.shape} does not broadcast into {x.shape}")
    out = _make(x.values * c, (x,), None, "mul_const")

    def bwd():
        _accum(x, out.grad * c)

    out._backward = bwd
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """Smooth GELU (tanh form)."""
    v = x.values
    inner = _GELU_C * (v + _GELU_A * v ** 3)
    th = np.tanh(inner)
    out = _make(0.5 * v * (1.0 + th), (x,), None, "gelu")

    def bwd():
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * v ** 2)
        local = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th ** 2) * dinner
        _accum(x, out.grad * local.astype(x.dtype))

    out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    """max(0, x); subgradient 0 at exactly 0."""
    out = _make(np.maximum(x.values, 0), (x,), None, "relu")

    def bwd():
        _accum(x, out.grad * (x.values > 0))

    out._backward = bwd
    return out


def exp(x: Tensor) -> Tensor:
    out = _make(np.exp(x.values), (x,), None, "exp")

    def bwd():
        _accum(x, out.grad * out.values)

    out._backward = bwd
    return out


def reciprocal(x: Tensor) -> Tensor:
    out = _make(1.0 / x.values, (x,), None, "reciprocal")

    def bwd():
        _accum(x, -out.grad * out.values * out.values)

    out._backward = bwd
    return out


def absolute(x: Tensor) -> Tensor:
    """|x|; subgradient 0 at exactly 0."""
    out = _make(np.abs(x.values), (x,), None, "absolute")

    def bwd():
        _accum(x, out.grad * np.sign(x.values))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# matrix ops (2-D)
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims {a.shape} @ {b.shape}")
    out = _make(a.values @ b.values, (a, b), None, "matmul")

    def bwd():
        g = out.grad
        _accum(a, g @ b.values.T)
        _accum(b, a.values.T @ g)

    out._backward = bwd
    return out


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    out = _make(x.values.T.copy(), (x,), None, "transpose")

    def bwd():
        _accum(x, out.grad.T)

    out._backward = bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map on rows: x[n,din] @ w[din,dout] + b[dout]."""
    _check_same_dtype(x, w, b)
    _require_2d(x, "linear")
    _require_2d(w, "linear")
    if b.values.ndim != 1 or x.shape[1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeError(f"linear shapes x={x.shape} w={w.shape} b={b.shape}")
    out = _make(x.values @ w.values + b.values, (x, w, b), None, "linear")

    def bwd():
        g = out.grad
        _accum(x, g @ w.values.T)
        _accum(w, x.values.T @ g)
        _accum(b, g.sum(axis=0))

    out._backward = bwd
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization of x[n,d], then elementwise gain and bias."""
    _check_same_dtype(x, gain, bias)
    _require_2d(x, "layer_norm")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = _make(xhat * gain.values + bias.values, (x, gain, bias), None, "layer_norm")

    def bwd():
        g = out.grad
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))
        dxhat = g * gain.values
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    out._backward = bwd
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-shifted for stability."""
    _require_2d(x, "softmax_rows")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _make(y, (x,), None, "softmax_rows")

    def bwd():
        g = out.grad
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, (g - dot) * y)

    out._backward = bwd
    return out


def concat_rows(*xs: Tensor) -> Tensor:
    """Stack 2-D tensors along rows; column counts must match."""
    if len(xs) < 1:
        raise ShapeError("concat_rows of nothing")
    _check_same_dtype(*xs)
    cols = xs[0].shape[1] if xs[0].values.ndim == 2 else None
    for t in xs:
        _require_2d(t, "concat_rows")
        if t.shape[1] != cols:
            raise ShapeError(f"concat_rows column mismatch {t.shape[1]} vs {cols}")
    sizes = [t.shape[0] for t in xs]
    out = _make(np.concatenate([t.values for t in xs], axis=0), xs, None, "concat_rows")

    def bwd():
        off = 0
        for t, n in zip(xs, sizes):
            _accum(t, out.grad[off:off + n])
            off += n

    out._backward = bwd
    return out


def split_rows(x: Tensor, sizes) -> tuple:
    """Split a 2-D tensor into row blocks of the given sizes."""
    _require_2d(x, "split_rows")
    sizes = list(sizes)
    if sum(sizes) != x.shape[0] or any(s < 0 for s in sizes):
        raise ShapeError(f"split_rows sizes {sizes} do not partition {x.shape[0]} rows")
    outs = []
    off = 0
    for n in sizes:
        start = off

        def make(start=start, n=n):
            piece = _make(x.values[start:start + n].copy(), (x,), None, "split_rows")

            def bwd():
                buf = np.zeros_like(x.values)
                buf[start:start + n] = piece.grad
                _accum(x, buf)

            piece._backward = bwd
            return piece

        outs.append(make())
        off += n
    return tuple(outs)


def concat_cols(*xs: Tensor) -> Tensor:
    """Stack 2-D tensors along columns; row counts must match."""
    if len(xs) < 1:
        raise ShapeError("concat_cols of nothing")
    _check_same_dtype(*xs)
    rows = xs[0].shape[0] if xs[0].values.ndim == 2 else None
    for t in xs:
        _require_2d(t, "concat_cols")
        if t.shape[0] != rows:
            raise ShapeError(f"concat_cols row mismatch {t.shape[0]} vs {rows}")
    sizes = [t.shape[1] for t in xs]
    out = _make(np.concatenate([t.values for t in xs], axis=1), xs, None, "concat_cols")

    def bwd():
        off = 0
        for t, n in zip(xs, sizes):
            _accum(t, out.grad[:, off:off + n])
            off += n

    out._backward = bwd
    return out


def split_cols(x: Tensor, sizes) -> tuple:
    """Split a 2-D tensor into column blocks of the given sizes."""
    _require_2d(x, "split_cols")
    sizes = list(sizes)
    if sum(sizes) != x.shape[1] or any(s < 0 for s in sizes):
        raise ShapeError(f"split_cols sizes {sizes} do not partition {x.shape[1]} columns")
    outs = []
    off = 0
    for n in sizes:
        start = off

        def make(start=start, n=n):
            piece = _make(x.values[:, start:start + n].copy(), (x,), None, "split_cols")

            def bwd():
                buf = np.zeros_like(x.values)
                buf[:, start:start + n] = piece.grad
                _accum(x, buf)

            piece._backward = bwd
            return piece

        outs.append(make())
        off += n
    return tuple(outs)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor by a constant integer index array."""
    _require_2d(x, "take_rows")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"take_rows index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows index out of range for {x.shape[0]} rows")
    out = _make(x.values[idx], (x,), None, "take_rows")

    def bwd():
        buf = np.zeros_like(x.values)
        np.add.at(buf, idx, out.grad)
        _accum(x, buf)

    out._backward = bwd
    return out


def sum_row_blocks(x: Tensor, block: int) -> Tensor:
    """Sum each consecutive group of `block` rows of x[n*block, d] -> [n, d]."""
    _require_2d(x, "sum_row_blocks")
    n, d = x.shape
    if block < 1 or n % block != 0:
        raise ShapeError(f"sum_row_blocks: {n} rows not divisible by block {block}")
    out = _make(x.values.reshape(n // block, block, d).sum(axis=1), (x,), None, "sum_row_blocks")

    def bwd():
        _accum(x, np.repeat(out.grad, block, axis=0))

    out._backward = bwd
    return out


def mul_cols(x: Tensor, col: Tensor) -> Tensor:
    """Scale row r of x[n,d] by col[r,0]; both sides differentiable."""
    _check_same_dtype(x, col)
    _require_2d(x, "mul_cols")
    if col.shape != (x.shape[0], 1):
        raise ShapeError(f"mul_cols needs col of shape ({x.shape[0]}, 1), got {col.shape}")
    out = _make(x.values * col.values, (x, col), None, "mul_cols")

    def bwd():
        _accum(x, out.grad * col.values)
        _accum(col, (out.grad * x.values).sum(axis=1, keepdims=True))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def sum_over(x: Tensor, axis=None) -> Tensor:
    """Sum over all elements (axis=None, scalar) or one axis of a 2-D tensor (keepdims)."""
    if axis is None:
        out = _make(x.values.sum(), (x,), None, "sum_over")

        def bwd():
            _accum(x, np.broadcast_to(out.grad, x.shape).astype(x.dtype))

        out._backward = bwd
        return out
    _require_2d(x, "sum_over(axis)")
    if axis not in (0, 1):
        raise ShapeError(f"sum_over axis must be 0 or 1, got {axis}")
    out = _make(x.values.sum(axis=axis, keepdims=True), (x,), None, "sum_over")

    def bwd():
        _accum(x, np.broadcast_to(out.grad, x.shape).astype(x.dtype))

    out._backward = bwd
    return out


def mean_over(x: Tensor, axis=None) -> Tensor:
    """Mean over all elements (axis=None, scalar) or one axis of a 2-D tensor (keepdims)."""
    if axis is None:
        n = x.values.size
    else:
        _require_2d(x, "mean_over(axis)")
        if axis not in (0, 1):
            raise ShapeError(f"mean_over axis must be 0 or 1, got {axis}")
        n = x.shape[axis]
    if n == 0:
        raise ShapeError("mean_over of an empty tensor")
    return scale(sum_over(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.values.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}")
    out = _make(x.values.reshape(shape), (x,), None, "reshape")

    def bwd():
        _accum(x, out.grad.reshape(x.shape))

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; fills .grad on reachable tensors."""
    if loss.values.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GraphError("backward already ran on this graph; rebuild it first")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no trainable tensor feeds it")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node._inputs:
            if child.requires_grad and id(child) not in seen:
                stack.append((child, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
    loss._done = True


@dataclass
class GradCheckReport:
    """Per-parameter max relative error between analytic and numeric gradients."""

    eps: float
    tol: float
    per_param: dict
    runtime_s: float = 0.0

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol

    def lines(self):
        for name in sorted(self.per_param):
            yield f"{'ok ' if self.per_param[name] <= self.tol else 'FAIL'} {name}: {self.per_param[name]:.3e}"


def check_gradients(build, params, eps: float = 1e-5, tol: float = 1e-5,
                    names=None, denom_floor: float = 1e-4) -> GradCheckReport:
    """Compare backward() gradients with central finite differences.

    build(params) must construct a fresh scalar loss from the given parameter
    tensors. Parameters must be float64; finite differences in float32 drown
    in rounding noise. Relative error per element is |fd - an| / max(|fd|,
    |an|, denom_floor); a sign-flipped backward therefore shows up near 2.
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    for p in params:
        if p.dtype != np.float64:
            raise GraphError("check_gradients requires float64 parameters")
        if not p.requires_grad:
            raise GraphError("check_gradients got a parameter with requires_grad=False")

    import time

    t0 = time.perf_counter()
    for p in params:
        p.grad = None
    loss = build(params)
    if not isinstance(loss, Tensor) or loss.values.size != 1:
        raise GraphError("build(params) must return a scalar Tensor")
    backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    report = {}
    for p, an, name in zip(params, analytic, names):
        flat = p.values.reshape(-1)
        fd = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = build(params).item()
            flat[k] = orig - eps
            lo = build(params).item()
            flat[k] = orig
            fd[k] = (hi - lo) / (2.0 * eps)
        a = an.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(fd)), denom_floor)
        report[name] = float(np.max(np.abs(a - fd) / denom)) if flat.size else 0.0
    return GradCheckReport(eps=eps, tol=tol, per_param=report, runtime_s=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# deterministic random streams
# ---------------------------------------------------------------------------

class Rng:
    """Deterministic, splittable random stream.

    Philox keyed by a blake2b hash of (seed, path), so the same seed gives
    the same draw sequence on any platform, and named substreams are
    independent of draw order elsewhere.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_path)
        msg = self.seed.to_bytes(8, "little", signed=False) + b"\x1f".join(
            p.encode("utf-8") for p in ("",) + self.path)
        key = int.from_bytes(hashlib.blake2b(msg, digest_size=16).digest(), "little")
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, tag: str) -> "Rng":
        """Independent substream; same (seed, tag) always yields the same stream."""
        return Rng(self.seed, self.path + (str(tag),))

    def normal(self, shape=None, mean: float = 0.0, std: float = 1.0, dtype=np.float64):
        return np.asarray(self._gen.normal(mean, std, size=shape)).astype(dtype, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None, dtype=np.float64):
        return np.asarray(self._gen.uniform(low, high, size=shape)).astype(dtype, copy=False)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
