"""Minimal dense-tensor arithmetic with reverse-mode differentiation.

Every op takes ``Tensor`` (or array-like) inputs and returns a new ``Tensor``
whose ``_backward`` closure maps the output gradient to input gradients.
Graphs are only recorded when at least one input requires a gradient, so
evaluating with plain arrays costs no bookkeeping.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, NumericError

_CHECKED = contextvars.ContextVar("tokd_checked", default=False)
_FLOPS = contextvars.ContextVar("tokd_flops", default=None)


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise ``NumericError`` as soon as any op produces NaN or Inf."""
    token = _CHECKED.set(enabled)
    try:
        yield
    finally:
        _CHECKED.reset(token)


@contextlib.contextmanager
def count_flops():
    """Tally forward FLOPs: 2mnk per matmul/linear (bias excluded), one per add/mul element."""
    tally = {"matmul": 0, "elementwise": 0}
    token = _FLOPS.set(tally)
    try:
        yield tally
    finally:
        _FLOPS.reset(token)


def _tally(kind: str, n: int):
    tally = _FLOPS.get()
    if tally is not None:
        tally[kind] += int(n)


class Tensor:
    """An n-d float array with an optional gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if not self.requires_grad:
            raise ArgumentError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ArgumentError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar; all routes go through the functional ops below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list:
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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _coerce(a, b):
    """Make both operands tensors sharing the dtype of whichever is a Tensor."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECKED.get() and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by '{op}'")
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    out = a.data + b.data
    _tally("elementwise", out.size)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    out = a.data * b.data
    _tally("elementwise", out.size)
    return _make(out, (a, b), backward, "mul")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign keeps exp() from overflowing
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return _make(out, (x,), backward, "gelu")


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(x.dtype, copy=True),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = axis % xs[0].ndim
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), xs,
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def slice_axis(x, start: int, stop: int, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    axis = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), backward, "slice")


def take_rows(table, index) -> Tensor:
    """Gather ``table[index]`` along the first axis; scatters gradients back."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        flat = index.reshape(-1)
        g2 = g.reshape(flat.size, -1)
        if table.shape[0] <= 16:
            # few rows (role tables): a one-hot product beats scatter-add
            onehot = (flat[None, :] == np.arange(table.shape[0])[:, None]).astype(g.dtype)
            return ((onehot @ g2).reshape(table.shape),)
        full = np.zeros((table.shape[0], g2.shape[1]), dtype=g.dtype)
        np.add.at(full, flat, g2)
        return (full.reshape(table.shape),)

    return _make(table.data[index], (table,), backward, "take_rows")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    out = a.data @ b.data
    _tally("matmul", 2 * out.size * a.shape[-1])
    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight + bias``."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias shape {bias.shape} does not match weight shape {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    _tally("matmul", 2 * out.size * weight.shape[0])
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward, "linear")


# ---------------------------------------------------------------- normalization

def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty trailing axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {d}")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def backward(g):
        lead_axes = tuple(range(x.ndim - 1))
        gg = g.sum(axis=lead_axes) if lead_axes else g
        gxhat = g * gain.data
        gx = rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                     - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).sum(axis=lead_axes) if lead_axes else g * xhat
        return gx, ggain, gg

    return _make(out, (x, gain, bias), backward, "layer_norm")


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


# ---------------------------------------------------------------- attention

def attention_probs(q: Tensor, k: Tensor, temperature: Tensor) -> Tensor:
    """Softmax over keys of temperature-scaled cosine logits, shape [..., h, n, n]."""
    qn = l2_normalize(q)
    kn = l2_normalize(k)
    logits = matmul(qn, transpose(kn, _swap_last(kn.ndim)))
    logits = mul(logits, reshape(temperature, (-1, 1, 1)))
    return softmax(logits, axis=-1)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mhsa_qknorm(x, heads: int, params: dict, return_probs: bool = False):
    """Full (non-causal) multi-head self-attention with per-head QK normalization.

    ``params`` holds ``qkv_w [d, 3d]``, ``qkv_b [3d]``, ``out_w [d, d]``,
    ``out_b [d]`` and ``temp [heads]``. ``x`` is ``[..., n, d]``.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads
    lead, n = x.shape[:-2], x.shape[-2]
    qkv = linear(x, params["qkv_w"], params["qkv_b"])
    # [..., n, 3, h, dh] -> [3, ..., h, n, dh]
    qkv = reshape(qkv, lead + (n, 3, heads, dh))
    nl = len(lead)
    perm = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
    qkv = transpose(qkv, perm)
    q = slice_axis(qkv, 0, 1, axis=0)
    k = slice_axis(qkv, 1, 2, axis=0)
    v = slice_axis(qkv, 2, 3, axis=0)
    q, k, v = (reshape(t, lead + (heads, n, dh)) for t in (q, k, v))
    probs = attention_probs(q, k, as_tensor(params["temp"]))
    ctx = matmul(probs, v)
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, lead + (n, d))
    out = linear(ctx, params["out_w"], params["out_b"])
    if return_probs:
        return out, probs
    return out


# ---------------------------------------------------------------- losses

def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes differ {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray((diff * diff).sum() / n), (pred,),
                 lambda g: (g * (2.0 / n) * diff,), "mse")


def check_finite(x, what: str = "tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------- verification

def _select_entries(size: int, max_entries: int | None, rng) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    if rng is None:
        return np.linspace(0, size - 1, max_entries).astype(np.intp)
    return np.sort(rng.choice(size, max_entries, replace=False))


def grad_check_report(f: Callable[[dict], Tensor], params: dict, step: float = 1e-4,
                      max_entries: int | None = None, rng=None) -> dict:
    """Per-parameter max relative error between reverse-mode and central differences.

    ``f`` maps a dict of Tensors (same keys as ``params``) to a scalar Tensor.
    ``max_entries`` caps the number of probed entries per parameter array.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    out = f(leaves)
    if out.data.size != 1:
        raise ArgumentError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()

    def value():
        val = float(np.asarray(f({k: Tensor(v) for k, v in arrays.items()}).data))
        if not math.isfinite(val):
            raise NumericError("function value is not finite under perturbation")
        return val

    report = {}
    for name, arr in arrays.items():
        grad = leaves[name].grad
        analytic = np.zeros(arr.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        flat, aflat = arr.reshape(-1), analytic.reshape(-1)
        worst = 0.0
        for i in _select_entries(flat.size, max_entries, rng):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            denom = max(abs(aflat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        report[name] = worst
    return report


def grad_check(f: Callable[[dict], Tensor], params: dict, step: float = 1e-4,
               max_entries: int | None = None, rng=None) -> float:
    """Max relative error over all probed parameter entries."""
    report = grad_check_report(f, params, step=step, max_entries=max_entries, rng=rng)
    return max(report.values()) if report else 0.0


# ---------------------------------------------------------------- RNG

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class Rng:
    """Counter-based generator (Philox 4x64) keyed by ``(seed, stream)``.

    Child streams are derived by hashing, so work split across views, pixels or
    training steps draws the same numbers in any evaluation order.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        self._bitgen = np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        self._gen = np.random.Generator(self._bitgen)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def derive(self, *keys: int) -> "Rng":
        s = self.stream
        for k in keys:
            s = _splitmix64(s ^ _splitmix64(int(k) & _MASK64))
        return Rng(self.seed, s)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size=None, dtype=np.float64) -> np.ndarray:
        return self._gen.standard_normal(size, dtype=dtype)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": [int(c) for c in st["state"]["counter"]],
            "buffer_pos": int(st["buffer_pos"]),
            "buffer": [int(b) for b in st["buffer"]],
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        r = cls(state["seed"], state["stream"])
        st = r._bitgen.state
        st["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        st["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        st["buffer_pos"] = state["buffer_pos"]
        st["has_uint32"] = state["has_uint32"]
        st["uinteger"] = state["uinteger"]
        r._bitgen.state = st
        return r

