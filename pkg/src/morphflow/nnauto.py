"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Value`` wraps a float64 array together with a gradient accumulator and a
backward closure. Graphs are built eagerly by the neural primitives below
(linear, softmax, MLP, GRU cell, noise concatenation) and differentiated by a
single topological sweep from a scalar loss. Everything runs in double
precision so that central finite differences are a usable oracle.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonScalarOutput, ShapeMismatch

LEAKY_SLOPE = 0.01

# Active kink monitors; leaky_relu reports how close its inputs come to the
# origin so gradient checks can reject seeds that straddle the kink.
_KINK_MONITORS: list["KinkMonitor"] = []


class KinkMonitor:
    """Records the smallest |preactivation| seen by leaky_relu in a region."""

    def __init__(self) -> None:
        self.min_abs = np.inf

    def __enter__(self) -> "KinkMonitor":
        _KINK_MONITORS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _KINK_MONITORS.remove(self)

    @staticmethod
    def observe(data: np.ndarray) -> None:
        if _KINK_MONITORS and data.size:
            m = float(np.min(np.abs(data)))
            for mon in _KINK_MONITORS:
                if m < mon.min_abs:
                    mon.min_abs = m


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Value:
    """A node in the computation graph: float64 data plus grad accumulator."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "requires_grad")

    def __init__(self, data, parents: tuple = (), bwd=None, requires_grad: bool | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bwd = bwd
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar output; visits each node exactly once."""
        if self.data.size != 1:
            raise NonScalarOutput(f"backward() needs a scalar, got shape {self.data.shape}")
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(as_value(other), -1.0))

    def __rsub__(self, other):
        return add(as_value(other), scale(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_value(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, expo):
        return powi(self, expo)

    def __repr__(self) -> str:
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x, requires_grad=False)


def constant(x) -> Value:
    return Value(np.asarray(x, dtype=np.float64), requires_grad=False)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data + b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._bwd = bwd
    return out


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data * b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._bwd = bwd
    return out


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(a.data / b.data, (a, b))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._bwd = bwd
    return out


def scale(a, s: float) -> Value:
    a = as_value(a)
    out = Value(a.data * s, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s)

    out._bwd = bwd
    return out


def powi(a, expo: float) -> Value:
    a = as_value(a)
    out = Value(a.data ** expo, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * expo * a.data ** (expo - 1))

    out._bwd = bwd
    return out


def exp(a) -> Value:
    a = as_value(a)
    e = np.exp(a.data)
    out = Value(e, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * e)

    out._bwd = bwd
    return out


def log(a) -> Value:
    a = as_value(a)
    out = Value(np.log(a.data), (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    out._bwd = bwd
    return out


def sqrt(a) -> Value:
    a = as_value(a)
    r = np.sqrt(a.data)
    out = Value(r, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / r)

    out._bwd = bwd
    return out


def absolute(a) -> Value:
    a = as_value(a)
    out = Value(np.abs(a.data), (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * np.sign(a.data))

    out._bwd = bwd
    return out


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out = Value(np.matmul(a.data, b.data), (a, b))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.data.shape))

    out._bwd = bwd
    return out


def linear(x: Value, w: Value, b: Value | None = None) -> Value:
    """y = x @ w + b with exact analytic backward."""
    x, w = as_value(x), as_value(w)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeMismatch(f"linear: {x.data.shape} @ {w.data.shape}")
    if b is not None:
        b = as_value(b)
        if b.data.shape != (w.data.shape[1],):
            raise ShapeMismatch(f"linear bias: {b.data.shape} vs {(w.data.shape[1],)}")
        return add(matmul(x, w), b)
    return matmul(x, w)


# -- reductions and shaping ---------------------------------------------------


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = Value(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    out._bwd = bwd
    return out


def vmean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    if axis is None:
        denom = a.data.size
    else:
        denom = a.data.shape[axis]
    return scale(vsum(a, axis=axis, keepdims=keepdims), 1.0 / denom)


def vmax(a, axis: int) -> Value:
    """Max along one axis; backward routes to the first argmax entry."""
    a = as_value(a)
    am = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(am, axis), axis).squeeze(axis)
    out = Value(out_data, (a,))

    def bwd(g):
        if a.requires_grad:
            gi = np.zeros_like(a.data)
            np.put_along_axis(gi, np.expand_dims(am, axis), np.expand_dims(g, axis), axis)
            a._accumulate(gi)

    out._bwd = bwd
    return out


def concat(parts: Sequence, axis: int = -1) -> Value:
    vals = [as_value(p) for p in parts]
    out = Value(np.concatenate([v.data for v in vals], axis=axis), tuple(vals))
    sizes = [v.data.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                v._accumulate(g[tuple(sl)])

    out._bwd = bwd
    return out


def reshape(a, shape) -> Value:
    a = as_value(a)
    out = Value(a.data.reshape(shape), (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    out._bwd = bwd
    return out


def transpose(a, axes) -> Value:
    a = as_value(a)
    inv = np.argsort(axes)
    out = Value(a.data.transpose(axes), (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    out._bwd = bwd
    return out


def slice_axis(a, axis: int, lo: int, hi: int) -> Value:
    a = as_value(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(lo, hi)
    sl = tuple(sl)
    out = Value(a.data[sl], (a,))

    def bwd(g):
        if a.requires_grad:
            gi = np.zeros_like(a.data)
            gi[sl] = g
            a._accumulate(gi)

    out._bwd = bwd
    return out


def _scatter_rows_into(acc: np.ndarray, idx: np.ndarray, g: np.ndarray) -> None:
    """acc[idx] += g with duplicate indices accumulated, deterministically."""
    flat_idx = idx.reshape(-1)
    gf = g.reshape(flat_idx.size, -1)
    n = acc.shape[0]
    cols = gf.shape[1]
    if acc.ndim == 2 and cols <= 128:
        for c in range(cols):
            acc[:, c] += np.bincount(flat_idx, weights=gf[:, c], minlength=n)
    else:
        np.add.at(acc.reshape(n, -1), flat_idx, gf)


def take_rows(a, idx) -> Value:
    """Gather rows of a 2-D value; idx may be any integer array shape."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Value(a.data[idx], (a,))

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            _scatter_rows_into(a.grad, idx, g)

    out._bwd = bwd
    return out


def gather_sub(a, idx) -> Value:
    """Fused x[idx] - x[:, None, :] for (n, k) neighbour indices over (n, c) rows."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = Value(a.data[idx] - a.data[:, None, :], (a,))

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            _scatter_rows_into(a.grad, idx, g)
            a.grad -= g.sum(axis=1)

    out._bwd = bwd
    return out


# -- nonlinearities ------------------------------------------------------------


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Value:
    a = as_value(a)
    KinkMonitor.observe(a.data)
    out = Value(np.maximum(a.data, slope * a.data), (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.where(a.data >= 0, g, slope * g))

    out._bwd = bwd
    return out


def sigmoid(a) -> Value:
    a = as_value(a)
    x = a.data
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Value(s, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    out._bwd = bwd
    return out


def tanh(a) -> Value:
    a = as_value(a)
    t = np.tanh(a.data)
    out = Value(t, (a,))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - t * t))

    out._bwd = bwd
    return out


def softmax_rows(a) -> Value:
    """Softmax over the last axis, stabilised by per-row max subtraction."""
    a = as_value(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Value(y, (a,))

    def bwd(g):
        if a.requires_grad:
            inner = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - inner))

    out._bwd = bwd
    return out


def norm_rows(a) -> Value:
    """Euclidean norm over the last axis; zero rows get zero gradient."""
    a = as_value(a)
    d = np.sqrt((a.data * a.data).sum(axis=-1))
    out = Value(d, (a,))

    def bwd(g):
        if a.requires_grad:
            safe = np.where(d > 0, d, 1.0)
            a._accumulate((g / safe)[..., None] * a.data)

    out._bwd = bwd
    return out


# -- parameters ----------------------------------------------------------------


class ParamSet:
    """Registry of uniquely named learnable Values with seeded initialisation."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Value] = {}

    def add(self, name: str, shape: tuple[int, ...], init: str = "glorot") -> Value:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "glorot":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-lim, lim, size=shape)
        elif init == "normal":
            data = self.rng.normal(0.0, 0.02, size=shape)
        else:
            raise ValueError(f"unknown init: {init}")
        v = Value(data, requires_grad=True)
        self._params[name] = v
        return v

    def names(self) -> list[str]:
        return list(self._params.keys())

    def values(self) -> list[Value]:
        return list(self._params.values())

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Value]]:
        return self._params.items()

    def zero_grads(self) -> None:
        for v in self._params.values():
            v.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self._params):
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            raise ShapeMismatch(f"parameter name mismatch: missing={missing}, extra={extra}")
        for k, v in self._params.items():
            arr = np.asarray(arrays[k], dtype=np.float64)
            if arr.shape != v.data.shape:
                raise ShapeMismatch(f"parameter {k}: {arr.shape} vs {v.data.shape}")
            v.data = arr.copy()


# -- layers ---------------------------------------------------------------------


class Linear:
    def __init__(self, ps: ParamSet, name: str, c_in: int, c_out: int,
                 bias: bool = True, zero_init: bool = False):
        init = "zeros" if zero_init else "glorot"
        self.w = ps.add(f"{name}.w", (c_in, c_out), init=init)
        self.b = ps.add(f"{name}.b", (c_out,), init="zeros") if bias else None

    def __call__(self, x: Value) -> Value:
        return linear(x, self.w, self.b)


class MLP:
    """Stacked linear layers with leaky-ReLU between; the final layer is linear.

    widths lists the output width of every layer, so widths=[c] is a single
    linear map (no activation anywhere).
    """

    def __init__(self, ps: ParamSet, name: str, c_in: int, widths: Sequence[int],
                 zero_last: bool = False):
        if not widths:
            raise ShapeMismatch("mlp needs at least one layer width")
        self.layers: list[Linear] = []
        prev = c_in
        for i, w in enumerate(widths):
            last = i == len(widths) - 1
            self.layers.append(Linear(ps, f"{name}.l{i}", prev, w,
                                      zero_init=zero_last and last))
            prev = w

    def __call__(self, x: Value) -> Value:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x)
        return x


def mlp(x: Value, layers: MLP) -> Value:
    return layers(x)


class GRUCell:
    """Gated recurrent unit over row-aligned (n, c) inputs and hidden states."""

    def __init__(self, ps: ParamSet, name: str, c: int):
        self.wz = ps.add(f"{name}.wz", (c, c))
        self.uz = ps.add(f"{name}.uz", (c, c))
        self.bz = ps.add(f"{name}.bz", (c,), init="zeros")
        self.wr = ps.add(f"{name}.wr", (c, c))
        self.ur = ps.add(f"{name}.ur", (c, c))
        self.br = ps.add(f"{name}.br", (c,), init="zeros")
        self.wh = ps.add(f"{name}.wh", (c, c))
        self.uh = ps.add(f"{name}.uh", (c, c))
        self.bh = ps.add(f"{name}.bh", (c,), init="zeros")


def gru_cell(inp: Value, hidden: Value, params: GRUCell) -> Value:
    """out = (1 - z) * h + z * tanh(Wh in + Uh (r * h)), gates z and r sigmoid."""
    if inp.data.shape != hidden.data.shape:
        raise ShapeMismatch(f"gru: input {inp.data.shape} vs hidden {hidden.data.shape}")
    z = sigmoid(add(add(matmul(inp, params.wz), matmul(hidden, params.uz)), params.bz))
    r = sigmoid(add(add(matmul(inp, params.wr), matmul(hidden, params.ur)), params.br))
    h_tilde = tanh(add(add(matmul(inp, params.wh), matmul(mul(r, hidden), params.uh)), params.bh))
    one_minus_z = add(scale(z, -1.0), constant(1.0))
    return add(mul(one_minus_z, hidden), mul(z, h_tilde))


def append_noise(x: Value, noise_channels: int, rng: np.random.Generator) -> Value:
    """Concatenate i.i.d. standard normal columns; constant under backward."""
    if noise_channels < 0:
        raise ShapeMismatch("noise_channels must be nonnegative")
    if noise_channels == 0:
        return x
    x = as_value(x)
    noise = rng.standard_normal((x.data.shape[0], noise_channels))
    return concat([x, constant(noise)], axis=-1)


# -- gradient verification -------------------------------------------------------


def grad_check(build: Callable[[], Value], params: Sequence[Value], h: float = 1e-4) -> float:
    """Compare reverse-mode gradients against central finite differences.

    build must construct a fresh scalar graph from the current parameter data.
    Every entry of every parameter is perturbed; returns the maximum relative
    error |a - f| / max(1e-8, |a| + |f|).
    """
    loss = build()
    if loss.data.size != 1:
        raise NonScalarOutput(f"grad_check needs a scalar loss, got {loss.data.shape}")
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build().data)
            flat[i] = orig - h
            f_minus = float(build().data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            an = a.reshape(-1)[i]
            rel = abs(an - fd) / max(1e-8, abs(an) + abs(fd))
            if rel > worst:
                worst = rel
    return worst


def kink_margin(build: Callable[[], Value]) -> float:
    """Smallest |leaky-ReLU input| over one forward construction of the graph."""
    with KinkMonitor() as mon:
        build()
    return mon.min_abs
