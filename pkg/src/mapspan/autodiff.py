"""Minimal tape-based reverse-mode automatic differentiation on float64 arrays.

Operations record themselves on the active :class:`Tape` (if any input
requires a gradient). Outside a tape the same functions run as plain numpy
and build no graph, which is what inference uses.

    >>> params = ParameterSet({"w": np.ones(3)})
    >>> with Tape() as tape:
    ...     y = tensor_sum(tanh(params["w"]))
    >>> grads = backward(y, tape, params)
"""

from __future__ import annotations

import math
import threading
from collections.abc import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ParameterSet", "DimensionError", "NumericalError",
    "as_tensor", "matmul", "add", "sub", "mul", "scale", "repeat_cols",
    "concat_rows", "concat_cols", "transpose", "rowwise_dot", "stack_rows",
    "reshape", "tanh", "sigmoid", "masked_softmax", "gather", "tensor_sum", "neg_log_at", "log_softmax_at",
    "gru_sequence", "backward", "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A computation produced a non-finite value."""


class Tensor:
    """Dense float64 array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(dim < 0 for dim in arr.shape):
            raise DimensionError(f"invalid shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class _Record:
    __slots__ = ("op", "inputs", "output", "grad_fn")

    def __init__(self, op, inputs, output, grad_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager; tapes nest, the innermost one records.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    @classmethod
    def _stack(cls) -> list["Tape"]:
        stack = getattr(cls._local, "stack", None)
        if stack is None:
            stack = cls._local.stack = []
        return stack

    def __enter__(self) -> "Tape":
        Tape._stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None


class ParameterSet:
    """Named collection of trainable tensors with fixed shapes."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._tensors: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def update(self, name: str, value: np.ndarray) -> None:
        """Overwrite values in place; the shape must not change."""
        t = self._tensors[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.data.shape:
            raise DimensionError(f"parameter {name!r}: shape {value.shape} != {t.data.shape}")
        t.data = value.copy()

    def snapshot(self) -> dict[str, np.ndarray]:
        """Immutable copy of current values."""
        out = {}
        for name, t in self._tensors.items():
            arr = t.data.copy()
            arr.flags.writeable = False
            out[name] = arr
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet({k: t.data.copy() for k, t in self._tensors.items()})

    def subset(self, prefix: str) -> "ParameterSet":
        """View sharing tensors whose names start with ``prefix``."""
        sub = ParameterSet()
        for name, t in self._tensors.items():
            if name.startswith(prefix):
                sub._tensors[name] = t
        return sub

    def merge(self, other: "ParameterSet") -> "ParameterSet":
        out = ParameterSet()
        for src in (self, other):
            for name, t in src.items():
                if name in out._tensors:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._tensors[name] = t
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray,
          grad_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(op, tuple(inputs), out, grad_fn))
    return out


def _shape_str(t: Tensor) -> str:
    return "x".join(str(d) for d in t.shape) or "scalar"


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product supporting 2-D and 1-D operands (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul needs 1-D or 2-D operands, got {_shape_str(a)} and {_shape_str(b)}")
    ka = a.shape[-1]
    kb = b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul inner dimensions differ: {_shape_str(a)} and {_shape_str(b)}")
    A, B = a.data, b.data
    out = A @ B

    def grad_fn(g):
        if A.ndim == 2 and B.ndim == 2:
            return g @ B.T, A.T @ g
        if A.ndim == 2:  # matrix @ vector
            return np.outer(g, B), A.T @ g
        if B.ndim == 2:  # vector @ matrix
            return B @ g, np.outer(A, g)
        return g * B, g * A

    return _emit("matmul", (a, b), out, grad_fn)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {_shape_str(a)} and {_shape_str(b)}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes differ: {_shape_str(a)} and {_shape_str(b)}")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {_shape_str(a)} and {_shape_str(b)}")
    A, B = a.data, b.data
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def repeat_cols(v, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``v`` as columns: shape (len(v), n)."""
    v = as_tensor(v)
    if n < 1:
        raise ValueError(f"repeat count must be >= 1, got {n}")
    if v.data.ndim != 1:
        raise DimensionError(f"repeat_cols needs a vector, got {_shape_str(v)}")
    out = np.repeat(v.data[:, None], n, axis=1)
    return _emit("repeat_cols", (v,), out, lambda g: (g.sum(axis=1),))


def concat_rows(a, b) -> Tensor:
    """Stack ``a`` above ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"concat_rows column counts differ: {_shape_str(a)} and {_shape_str(b)}")
    p = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)
    return _emit("concat_rows", (a, b), out, lambda g: (g[:p], g[p:]))


def concat_cols(a, b) -> Tensor:
    """Place ``a`` left of ``b`` (vectors are joined end to end)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_cols row counts differ: {_shape_str(a)} and {_shape_str(b)}")
    q = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return _emit("concat_cols", (a, b), out, lambda g: (g[..., :q], g[..., q:]))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {_shape_str(a)}")
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {_shape_str(a)} to {shape}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def rowwise_dot(x, v) -> Tensor:
    """``out[r] = sum_j x[r, j] * v[j]``.

    Each row is reduced on its own, so selecting rows of ``x`` first gives
    bitwise the same values as selecting entries of the result.
    """
    x, v = as_tensor(x), as_tensor(v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise DimensionError(f"rowwise_dot shapes differ: {_shape_str(x)} and {_shape_str(v)}")
    X, V = x.data, v.data
    out = (X * V).sum(axis=1)
    return _emit("rowwise_dot", (x, v), out, lambda g: (np.outer(g, V), g @ X))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into a matrix."""
    rows = [as_tensor(r) for r in rows]
    if not rows:
        raise DimensionError("stack_rows needs at least one row")
    width = rows[0].shape
    if any(r.shape != width or r.data.ndim != 1 for r in rows):
        raise DimensionError("stack_rows needs vectors of one length")
    out = np.stack([r.data for r in rows])
    return _emit("stack_rows", rows, out, lambda g: tuple(g[i] for i in range(len(rows))))


# ---------------------------------------------------------------- nonlinearities

def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _normalize_mask(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    m = np.asarray(mask, dtype=bool)
    if m.shape != shape[-1:] and m.shape != shape:
        raise DimensionError(f"mask shape {m.shape} does not fit logits {shape}")
    return np.broadcast_to(m, shape)


def masked_softmax(logits, mask=None) -> Tensor:
    """Softmax over the last axis; masked (False) positions get probability 0.

    Max-subtraction keeps large logits from overflowing.
    """
    z = as_tensor(logits)
    if z.data.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    m = _normalize_mask(mask, z.shape)
    x = z.data
    if m is not None:
        if not m.any(axis=-1).all():
            raise ValueError("masked_softmax: every position is masked")
        x = np.where(m, x, -np.inf)
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit("masked_softmax", (z,), p, grad_fn)


def gather(t, indices: Iterable[int], axis: int = 0) -> Tensor:
    """Select slices along ``axis`` (0 = rows, 1 = columns) in the given order.

    Repeated indices are allowed; their gradients add up.
    """
    t = as_tensor(t)
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
    if axis not in (0, 1) or axis >= t.data.ndim:
        raise DimensionError(f"gather axis {axis} invalid for shape {_shape_str(t)}")
    size = t.shape[axis]
    if idx.size:
        bad = idx[(idx < 0) | (idx >= size)]
        if bad.size:
            raise IndexError(f"gather index {int(bad[0])} out of range for axis {axis} of size {size}")
    out = np.take(t.data, idx, axis=axis)
    src_shape = t.shape

    def grad_fn(g):
        full = np.zeros(src_shape)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _emit("gather", (t,), out, grad_fn)


def tensor_sum(t) -> Tensor:
    t = as_tensor(t)
    shape = t.shape
    return _emit("sum", (t,), np.asarray(t.data.sum()), lambda g: (np.full(shape, float(g)),))


def neg_log_at(p, index, floor: float = 1e-30) -> Tensor:
    """``-log(p[index])`` with the argument clamped at ``floor``.

    When clamping is active the gradient is zero (the value is constant there).
    """
    p = as_tensor(p)
    index = tuple(np.atleast_1d(index).tolist()) if not isinstance(index, tuple) else index
    value = p.data[index]
    clamped = value < floor
    out = -math.log(max(value, floor))
    shape = p.shape

    def grad_fn(g):
        full = np.zeros(shape)
        if not clamped:
            full[index] = -float(g) / value
        return (full,)

    return _emit("neg_log_at", (p,), np.asarray(out), grad_fn)


def log_softmax_at(logits, index: int, mask=None) -> Tensor:
    """Fused ``-log softmax(logits)[index]`` for 1-D logits."""
    z = as_tensor(logits)
    m = _normalize_mask(mask, z.shape)
    x = z.data if m is None else np.where(m, z.data, -np.inf)
    mx = x.max()
    lse = mx + math.log(np.exp(x - mx).sum())
    p = np.exp(x - lse)

    def grad_fn(g):
        grad = p.copy()
        grad[index] -= 1.0
        return (grad * float(g),)

    return _emit("log_softmax_at", (z,), np.asarray(lse - x[index]), grad_fn)


# ---------------------------------------------------------------- fused recurrence

def gru_sequence(x, w_in, w_hid, b_in, b_hid, h0=None, reverse: bool = False) -> Tensor:
    """Run a gated recurrent unit over the rows of ``x`` (T x in).

    Gate layout in the 3h columns is (reset, update, candidate):

        r = sigmoid(x W_r + b_r + h U_r + c_r)
        z = sigmoid(x W_z + b_z + h U_z + c_z)
        n = tanh(x W_n + b_n + r * (h U_n + c_n))
        h' = (1 - z) * n + z * h

    Returns the T x h matrix of hidden states in input order, so with
    ``reverse=True`` row t holds the state after reading x[T-1], ..., x[t].
    One fused node with hand-written backpropagation through time.
    """
    x, w_in, w_hid, b_in, b_hid = (as_tensor(t) for t in (x, w_in, w_hid, b_in, b_hid))
    T = x.shape[0]
    hs = w_hid.shape[0]
    if w_in.shape != (x.shape[1], 3 * hs) or w_hid.shape != (hs, 3 * hs):
        raise DimensionError(
            f"gru weights {_shape_str(w_in)}, {_shape_str(w_hid)} do not fit input {_shape_str(x)}")
    if b_in.shape != (3 * hs,) or b_hid.shape != (3 * hs,):
        raise DimensionError("gru biases must have length 3h")
    inputs = [x, w_in, w_hid, b_in, b_hid]
    if h0 is not None:
        h0 = as_tensor(h0)
        inputs.append(h0)
        h_init = h0.data
    else:
        h_init = np.zeros(hs)

    order = list(range(T - 1, -1, -1) if reverse else range(T))
    X = x.data
    Wi, Wh, bi, bh = w_in.data, w_hid.data, b_in.data, b_hid.data
    gx_all = X @ Wi + bi
    H = np.empty((T, hs))
    prev = np.empty((T, hs))
    RZ = np.empty((T, 2 * hs))
    N = np.empty((T, hs))
    HN = np.empty((T, hs))
    h = h_init
    for t in order:
        gh = h @ Wh + bh
        gx = gx_all[t]
        rz = _sigmoid(gx[:2 * hs] + gh[:2 * hs])
        r = rz[:hs]
        hn = gh[2 * hs:]
        n = np.tanh(gx[2 * hs:] + r * hn)
        prev[t] = h
        h = n + rz[hs:] * (h - n)
        RZ[t], N[t], HN[t], H[t] = rz, n, hn, h

    def grad_fn(G):
        dgx = np.empty((T, 3 * hs))
        dgh = np.empty((T, 3 * hs))
        dh_next = np.zeros(hs)
        WhT = Wh.T
        for t in reversed(order):
            dh = G[t] + dh_next
            rz, n, hn, hp = RZ[t], N[t], HN[t], prev[t]
            r, z = rz[:hs], rz[hs:]
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            drz = np.concatenate([da_n * hn, dh * (hp - n)]) * rz * (1.0 - rz)
            dgx[t, :2 * hs] = drz
            dgx[t, 2 * hs:] = da_n
            dgh[t, :2 * hs] = drz
            dgh[t, 2 * hs:] = da_n * r
            dh_next = dh * z + dgh[t] @ WhT
        grads = [dgx @ Wi.T, X.T @ dgx, prev.T @ dgh, dgx.sum(axis=0), dgh.sum(axis=0)]
        if h0 is not None:
            grads.append(dh_next)
        return tuple(grads)

    return _emit("gru_sequence", inputs, H, grad_fn)


# ---------------------------------------------------------------- gradients

def backward(root: Tensor, tape: Tape, params: ParameterSet | None = None):
    """Gradients of scalar ``root`` with respect to every parameter.

    Accumulation follows reverse tape order, so replaying the same tape gives
    bitwise-identical results. Returns ``{name: array}`` for ``params``; with
    no parameter set, returns a dict keyed by tensor identity.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        local = rec.grad_fn(g)
        for inp, gi in zip(rec.inputs, local):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
    if params is None:
        return grads
    return {name: grads.get(id(t), np.zeros(t.shape)) for name, t in params.items()}


def grad_check(f: Callable[[ParameterSet], Tensor], params: ParameterSet,
               step: float = 1e-5, names: Iterable[str] | None = None) -> float:
    """Max relative error between backward() and central differences.

    Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as the
    denominator. ``f`` must be deterministic.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericalError("objective is not finite")
    analytic = backward(out, tape, params)
    worst = 0.0
    for name in (names if names is not None else params.names()):
        t = params[name]
        flat = t.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(params).data)
            flat[i] = orig - step
            fm = float(f(params).data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(f"objective not finite when perturbing {name}[{i}]")
            num = (fp - fm) / (2.0 * step)
            denom = max(abs(ga[i]), abs(num), 1e-8)
            worst = max(worst, abs(ga[i] - num) / denom)
    return worst
