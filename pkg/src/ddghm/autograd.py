"""Dense float64 tensors with reverse-mode gradients.

Every forward op returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  :func:`backward`
walks that graph in reverse topological order and accumulates gradients into
the owning :class:`ParameterStore`.  Recording is switched off inside
:func:`no_grad`, which keeps frozen-model inference and finite-difference
probes cheap.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An entry lies outside the mathematical domain of an op."""


class ContractError(ValueError):
    """A caller broke an operation precondition."""


class _GradMode(threading.local):
    enabled = True


_state = _GradMode()


def _recording() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "name", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to our reflected ops

    def __init__(self, data, parents=(), grad_fn=None, name=None, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = parents
        self.grad_fn: Callable | None = grad_fn
        self.name: str | None = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


def constant(x) -> Tensor:
    return x if isinstance(x, Tensor) else _wrap(np.asarray(x, dtype=np.float64))


def _wrap(data: np.ndarray) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data, t.parents, t.grad_fn, t.name, t.requires_grad = data, (), None, None, False
    return t


def _make(data, parents, grad_fn) -> Tensor:
    if not _state.enabled or not any(p.requires_grad for p in parents):
        return _wrap(np.asarray(data, dtype=np.float64))
    t = _wrap(np.asarray(data, dtype=np.float64))
    t.parents, t.grad_fn, t.requires_grad = parents, grad_fn, True
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands, numpy semantics."""
    a, b = constant(a), constant(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise DimensionError(f"matmul needs 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        a2 = a.data if a.data.ndim == 2 else a.data[None, :]
        b2 = b.data if b.data.ndim == 2 else b.data[:, None]
        g2 = np.asarray(g).reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _make(out, (a, b), grad_fn)


def linear(x, w) -> Tensor:
    """``x @ w.T`` without materialising a transpose node."""
    x, w = constant(x), constant(w)
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T

    def grad_fn(g):
        x2 = x.data if x.data.ndim == 2 else x.data[None, :]
        g2 = g if g.ndim == 2 else g[None, :]
        return (g2 @ w.data).reshape(x.shape), g2.T @ x2

    return _make(out, (x, w), grad_fn)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [constant(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    cuts, acc = [], 0
    for p in parts[:-1]:
        acc += p.shape[axis]
        cuts.append(acc)
    return _make(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Tensor, idx) -> Tensor:
    """Index with any numpy index expression; gradients scatter-add back."""
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), grad_fn)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


# --------------------------------------------------------------------------
# entrywise functions


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError(f"log of non-positive entry (min {a.data.min()!r})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    """Hinge max(x, 0); the subgradient at 0 is taken as 0."""
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log, "relu": relu}


def elementwise(f: str, x: Tensor) -> Tensor:
    try:
        fn = ELEMENTWISE[f]
    except KeyError:
        raise ContractError(f"unknown elementwise function {f!r}") from None
    return fn(constant(x))


# --------------------------------------------------------------------------
# normalisers


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax of empty tensor {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0 or a.shape[axis] == 0:
        raise DimensionError(f"log_softmax of empty tensor {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (a,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row softmax over the entries where ``mask`` is true.

    Rows without any admissible entry yield all zeros.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape or a.data.ndim != 2:
        raise DimensionError(f"mask {mask.shape} does not match scores {a.shape}")
    masked = np.where(mask, a.data, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(np.where(mask, a.data - row_max, -np.inf))
    denom = e.sum(axis=1, keepdims=True)
    s = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return _make(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


# --------------------------------------------------------------------------
# parameters, backward, optimiser


class ParameterStore:
    """Named learnable tensors plus gradient slots of identical shape."""

    def __init__(self, seed: int = 0):
        self.rng_seed = seed
        self._rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, shape, init: str = "uniform", scale: float | None = None) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"parameter {name!r} has non-positive extent {shape}")
        if init == "uniform":
            bound = scale if scale is not None else 1.0 / np.sqrt(shape[-1])
            data = self._rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        else:
            raise ContractError(f"unknown initialiser {init!r}")
        p = Tensor(data, name=name, requires_grad=True)
        self.params[name] = p
        self.grads[name] = np.zeros(shape)
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def num_entries(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.params[name].shape:
            raise DimensionError(
                f"cannot assign {value.shape} to parameter {name!r} of shape {self.params[name].shape}"
            )
        self.params[name].data = value.copy()

    def norms(self) -> dict[str, float]:
        return {k: float(np.linalg.norm(p.data)) for k, p in self.params.items()}


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, store: ParameterStore) -> None:
    """Accumulate d(loss)/d(param) into ``store.grads``."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad_fn is None:
            if node.name is not None and node.name in store.grads:
                store.grads[node.name] += g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(
    scalar_fn: Callable[[ParameterStore], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
    names: Iterable[str] | None = None,
    floor: float = 1e-5,
) -> float:
    """Max relative error between backprop and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps entries whose true gradient is ~0 from dividing noise by noise.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    names = list(names) if names is not None else list(store.params)
    store.zero_grad()
    backward(scalar_fn(store), store)
    analytic = {n: store.grads[n].copy() for n in names}
    store.zero_grad()
    worst = 0.0
    with no_grad():
        for n in names:
            p = store.params[n]
            flat = p.data.reshape(-1)
            a_flat = analytic[n].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = scalar_fn(store).item()
                flat[i] = orig - eps
                fm = scalar_fn(store).item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                a = a_flat[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update over every parameter, then zero grads."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"moment shape {m.shape} != parameter {name!r} shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    store.zero_grad()
