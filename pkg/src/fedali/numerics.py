"""Dense tensors with define-by-run reverse-mode differentiation.

Only the operation set used by the encoder model is provided. Every op
records its parents and a closure that maps the output gradient to input
gradients; :func:`backward` walks the recorded graph once in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_FLOOR = 1e-12


class GraphError(RuntimeError):
    """Raised for malformed or already-consumed operation graphs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), back, "mul")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def back(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), back, "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), back, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    inner = _GELU_C * v * (1.0 + 0.044715 * v2)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), back, "gelu")


def square(x) -> Tensor:
    x = as_tensor(x)

    def back(g):
        return (2.0 * g * x.data,)

    return _make(x.data * x.data, (x,), back, "square")


def stop_gradient(x) -> Tensor:
    """Detached copy: nothing upstream of the result receives gradient."""
    x = as_tensor(x)
    return Tensor(x.data, _op="stop_gradient")


# ---------------------------------------------------------------- reductions / shape

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), back, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def back(g):
        return (g.reshape(src),)

    return _make(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def back(g):
        return (g.transpose(inverse),)

    return _make(x.data.transpose(axes), (x,), back, "transpose")


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    basic = _is_basic_index(index)

    def back(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), back, "getitem")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice)) or i is Ellipsis or i is None for i in items)


def concat(tensors: Sequence, axis=0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, back, "concat")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (any leading shape)."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {W.shape[0]}")
    parents = [x, W]
    out = x.data @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({W.shape[1]},)")
        out = out + b.data
        parents.append(b)

    def back(g):
        flat_x = x.data.reshape(-1, W.shape[0])
        flat_g = g.reshape(-1, W.shape[1])
        grads = [g @ W.data.T, flat_x.T @ flat_g]
        if b is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, back, "linear")


# ---------------------------------------------------------------- fused layers

def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back, "softmax")


def layer_norm(x, gain, bias, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        flat_g = g.reshape(-1, n)
        return gx, (flat_g * xhat.reshape(-1, n)).sum(axis=0), flat_g.sum(axis=0)

    return _make(out, (x, gain, bias), back, "layer_norm")


def l2_normalize(v, axis=-1) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    Slices whose norm is below ``NORM_FLOOR`` are passed through unchanged.
    """
    v = as_tensor(v)
    if not np.all(np.isfinite(v.data)):
        raise ValueError("l2_normalize: non-finite input")
    norm = np.sqrt((v.data * v.data).sum(axis=axis, keepdims=True))
    dead = norm < NORM_FLOOR
    scale = np.where(dead, 1.0, norm)
    out = v.data / scale

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        live = (g - out * proj) / scale
        return (np.where(dead, g, live),)

    return _make(out, (v,), back, "l2_normalize")


def l2_normalize_array(v: np.ndarray, axis=-1) -> np.ndarray:
    return l2_normalize(Tensor(np.asarray(v)), axis=axis).data


def glu_apply(p, W, b) -> Tensor:
    """Gated linear unit over a detached input.

    ``[a | g] = p W + b`` split along the last axis; returns ``a * sigmoid(g)``.
    ``p`` is always detached so no gradient reaches it.
    """
    p, W, b = as_tensor(p), as_tensor(W), as_tensor(b)
    d = p.shape[-1]
    if W.shape != (d, 2 * d) or b.shape != (2 * d,):
        raise ValueError(f"glu_apply: expected W {(d, 2 * d)} and b {(2 * d,)}, got {W.shape} and {b.shape}")
    h = linear(stop_gradient(p), W, b)
    return mul(h[..., :d], sigmoid(h[..., d:]))


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[N, K]`` against integer labels."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def back(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


def multi_head_attention(x, Wq, bq, Wk, bk, Wv, bv, Wo, bo, heads: int) -> Tensor:
    """Scaled dot-product self-attention over ``x[B, Z, d]``."""
    x = as_tensor(x)
    B, Z, d = x.shape
    if d % heads:
        raise ValueError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, Z, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, Wq, bq))
    k = split(linear(x, Wk, bk))
    v = split(linear(x, Wv, bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = matmul(softmax(scores, axis=-1), v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (B, Z, d))
    return linear(merged, Wo, bo)


# ---------------------------------------------------------------- graph

@dataclass
class OpGraph:
    """Topologically ordered view of the ops that produced ``output``."""

    output: Tensor
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "OpGraph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            key = id(node)
            if expanded:
                state[key] = 2
                order.append(node)
                continue
            mark = state.get(key)
            if mark == 2:
                continue
            if mark == 1:
                raise GraphError("cycle detected in operation graph")
            state[key] = 1
            stack.append((node, True))
            for parent in node._parents:
                if not parent.requires_grad:
                    continue
                pmark = state.get(id(parent))
                if pmark == 1:
                    raise GraphError("cycle detected in operation graph")
                if pmark is None:
                    stack.append((parent, False))
        return cls(output=output, nodes=order)

    def backward(self) -> dict[Tensor, np.ndarray]:
        if any(n._consumed for n in self.nodes if not n.is_leaf):
            raise GraphError("backward called twice on the same graph; re-run the forward pass")
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                leaves[node] = node.grad
                continue
            node._consumed = True
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf that requires grad and return them.

    Raises :class:`GraphError` on a cycle or on a second call over the same graph.
    """
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        return {}
    return OpGraph.trace(loss).backward()


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place. Parameters absent from ``grads`` are
    returned untouched (frozen or non-trainable).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return out


# ---------------------------------------------------------------- finite differences

def numerical_gradient(f: Callable[[], float], array: np.ndarray, step=1e-5, indices=None) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``array`` (perturbed in place).

    With ``indices`` (an iterable of index tuples) only those entries are
    differentiated and a 1-D array in the same order is returned.
    """
    if indices is None:
        indices = list(np.ndindex(array.shape))
        out_shape = array.shape
    else:
        indices = [tuple(i) for i in indices]
        out_shape = (len(indices),)
    grad = np.zeros(len(indices), dtype=np.float64)
    for j, idx in enumerate(indices):
        orig = array[idx]
        array[idx] = orig + step
        hi = f()
        array[idx] = orig - step
        lo = f()
        array[idx] = orig
        grad[j] = (hi - lo) / (2 * step)
    return grad.reshape(out_shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    """``||a - n|| / max(||a||, ||n||, atol)``; zero when both vanish.

    ``atol`` keeps gradients that are zero in exact arithmetic (key biases
    under softmax, for instance) from turning round-off into a 100% error.
    """
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), atol)
    if denom < 1e-300:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
              step=1e-5, names: Iterable[str] | None = None, max_entries: int | None = None,
              seed: int = 0, atol: float = 1e-5) -> dict[str, float]:
    """Compare analytic and central-difference gradients of ``loss_fn``.

    ``loss_fn`` receives fresh leaf Tensors each call. Returns the relative
    error per checked parameter name. ``max_entries`` caps how many randomly
    chosen coordinates of each tensor are differentiated.
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    loss = loss_fn(leaves)
    backward(loss)
    rng = np.random.default_rng(seed)

    def f():
        return float(loss_fn({k: Tensor(v) for k, v in params.items()}).data)

    errors = {}
    for name in names if names is not None else params:
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(params[name])
        arr = params[name]
        if max_entries is not None and arr.size > max_entries:
            flat = rng.choice(arr.size, size=max_entries, replace=False)
            idx = [np.unravel_index(i, arr.shape) for i in np.sort(flat)]
            numeric = numerical_gradient(f, arr, step=step, indices=idx)
            analytic = np.array([analytic[i] for i in idx])
        else:
            numeric = numerical_gradient(f, arr, step=step)
        errors[name] = relative_error(analytic, numeric, atol)
    return errors
