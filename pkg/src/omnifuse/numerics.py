"""Reverse-mode differentiable tensor core on float64 numpy arrays.

Each tensor produced by an op keeps links to its inputs and a closure that
maps the output adjoint to input adjoints; ``backward`` walks that graph once
in reverse topological order. Ops are a closed set: anything the model
modules need is built from them, nothing else exists. All math is float64
and any NaN/Inf is treated as a hard error, not a value.
"""
from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from scipy.special import erf

__all__ = [
    "Tensor",
    "ParamGroup",
    "Adam",
    "NonFiniteError",
    "GraphConsumedError",
    "add",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "gelu",
    "softmax_lastdim",
    "mean_pool_axis",
    "sum_all",
    "concat_axis",
    "embed_lookup",
    "layer_norm",
    "cross_entropy",
    "backward",
    "finite_diff_grad",
    "zero_grads",
]

_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


class NonFiniteError(FloatingPointError):
    """A tensor was created with, or an op produced, NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """backward() was already run from this loss node."""


class Tensor:
    """Dense float64 array node in a computation graph.

    Leaves are created directly; op outputs carry ``_parents`` and a
    ``_backfn`` closure mapping the output adjoint to one adjoint per parent.
    ``grad`` is only kept on ``requires_grad`` tensors: None until a backward
    pass touches it, then a same-shape float64 buffer that accumulates
    across backward calls until ``zero_grads``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backfn", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backfn=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ValueError("zero-size tensors are not allowed")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite values in tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backfn = _backfn
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to ``shape`` after numpy right-aligned broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _out(data, parents, backfn) -> Tensor:
    return Tensor(data, _parents=parents, _backfn=backfn)


def add(a, b) -> Tensor:
    """Elementwise sum; the second operand may broadcast from the right."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backfn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _out(data, (a, b), backfn)


def mul(a, b) -> Tensor:
    """Elementwise product; operands may broadcast from the right."""
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backfn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _out(data, (a, b), backfn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product (m,k) @ (k,n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backfn(g):
        return g @ b.data.T, a.data.T @ g

    return _out(data, (a, b), backfn)


def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    if a.ndim != 2:
        raise ValueError(f"transpose needs a 2-D tensor, got {a.shape}")

    def backfn(g):
        return (g.T,)

    return _out(a.data.T, (a,), backfn)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def backfn(g):
        return (g.reshape(a.shape),)

    return _out(a.data.reshape(shape), (a,), backfn)


def gelu_np(x: np.ndarray) -> np.ndarray:
    """Plain-array GeLU for frozen (non-differentiated) components."""
    return x * 0.5 * (1.0 + erf(x / _SQRT2))


def gelu(a: Tensor) -> Tensor:
    """Exact-erf GeLU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    data = x * phi_cdf

    def backfn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (phi_cdf + x * pdf),)

    return _out(data, (a,), backfn)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backfn(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _out(s, (a,), backfn)


def mean_pool_axis(a: Tensor, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    axis = int(axis)
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def backfn(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape),)

    return _out(data, (a,), backfn)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements; scalar output."""

    def backfn(g):
        return (np.broadcast_to(g, a.shape),)

    return _out(a.data.sum(), (a,), backfn)


def concat_axis(tensors, axis: int) -> Tensor:
    """Concatenate along one axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat_axis needs at least one tensor")
    axis = int(axis)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backfn(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _out(data, tuple(tensors), backfn)


def embed_lookup(table: Tensor, ids) -> Tensor:
    """Row gather along the first axis; grads scatter-add back.

    ``ids`` is a plain int array of any shape; output shape is
    ids.shape + table.shape[1:]. Also used to select logit/feature rows.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("embed_lookup with empty ids")
    if ids.min() < 0 or ids.max() >= table.shape[0]:
        raise ValueError(f"ids out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backfn(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape((-1,) + table.shape[1:]))
        return (dt,)

    return _out(data, (table,), backfn)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backfn(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(a.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        return dx, dgain, dbias

    return _out(data, (a, gain, bias), backfn)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of (N, V) logits against N int targets."""
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy needs (N, V) logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if t.shape[0] != n:
        raise ValueError(f"{t.shape[0]} targets for {n} logit rows")
    if t.min() < 0 or t.max() >= v:
        raise ValueError(f"targets out of range [0, {v})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = -logp[np.arange(n), t].mean()

    def backfn(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return (g * p / n,)

    return _out(data, (logits,), backfn)


def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
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
            stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate grads of every reachable requires_grad tensor from a scalar loss.

    Grads accumulate across calls; zero them explicitly between optimizer
    steps. A loss node can only drive one backward pass.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphConsumedError("backward already ran from this loss")
    loss._consumed = True

    order = _toposort(loss)
    adjoint = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backfn is None:
            continue
        for parent, pg in zip(node._parents, node._backfn(g)):
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = pg if prev is None else prev + pg


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to ``x``.

    Test oracle: perturbs one element at a time, never touches the graph
    machinery used by backward.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = x.data.copy()
    out = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_out = out.reshape(-1)
    for i in range(flat_base.size):
        orig = flat_base[i]
        flat_base[i] = orig + eps
        x.data = flat_base.reshape(base.shape)
        hi = float(f(x).data)
        flat_base[i] = orig - eps
        x.data = flat_base.reshape(base.shape)
        lo = float(f(x).data)
        flat_base[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError("non-finite function value during finite differences")
        flat_out[i] = (hi - lo) / (2.0 * eps)
    x.data = base
    return out


@dataclass
class ParamGroup:
    """Named ordered set of parameters; frozen groups never receive updates."""

    name: str
    params: list = field(default_factory=list)
    frozen: bool = False

    def digest_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(p.data).tobytes() for p in self.params)


def zero_grads(groups) -> None:
    for g in groups:
        for p in g.params:
            p.grad = None


class Adam:
    """Standard Adam with bias correction over a list of ParamGroups.

    Frozen groups are skipped entirely: no update, no moment state. Moment
    state is held per tensor inside this object, so one Adam instance spans
    one training run.
    """

    def __init__(self, groups, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = list(groups)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self._t
        bc2 = 1.0 - b2 ** self._t
        for group in self.groups:
            if group.frozen:
                continue
            for p in group.params:
                if p.grad is None:
                    raise ValueError(
                        f"missing grad on trainable tensor in group '{group.name}'")
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = np.zeros_like(p.data)
                    self._m[key] = m
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= b1
                m += (1.0 - b1) * p.grad
                v *= b2
                v += (1.0 - b2) * p.grad * p.grad
                p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.groups)
