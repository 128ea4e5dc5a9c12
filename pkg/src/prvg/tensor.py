"""Reverse-mode autodiff over numpy float64 arrays.

Tape-based engine: each op returns a Tensor that records its parent nodes and
a closure mapping the output gradient to parent-gradient contributions.
``Tensor.backward`` walks the recorded graph once in reverse topological
order, so gradients through reused nodes accumulate additively.

Scope is deliberately small: 2-D matmul, last-axis softmax/layer-norm, and
the elementwise/reduction primitives the grounding model and its losses need.
No broadcasting beyond bias rows, no views, no in-place ops.
"""

from __future__ import annotations

import math
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "Tensor",
    "ParameterSet",
    "ShapeError",
    "no_grad",
    "matmul",
    "softmax",
    "layer_norm",
    "concat",
    "maximum",
    "minimum",
    "gather_rows",
    "finite_diff_check",
    "finite_diff_report",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (forward values only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return x
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 array plus its gradient and graph lineage.

    ``grad`` is lazily allocated and accumulates across backward calls until
    explicitly cleared (set to None).
    """

    __slots__ = ("data", "grad", "_parents", "_backward")

    def __init__(self, data, parents=(), backward: Callable | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        if _grad_enabled:
            self._parents = parents
            self._backward = backward
        else:
            self._parents = ()
            self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, data={self.data!r})"

    # -- graph traversal ---------------------------------------------------

    def backward(self) -> None:
        """Accumulate dself/dnode into .grad of every ancestor.

        Iterative topological sort; each node's rule runs exactly once.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.broadcast_to(_as_array(other), self.data.shape).copy())

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self, self._lift(other))

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary ops ---------------------------------------------------------

    def relu(self) -> "Tensor":
        x = self.data

        def _bw(g, t=self, x=x):
            _accum(t, g * (x > 0.0))

        return Tensor(np.maximum(x, 0.0), (self,), _bw)

    def sigmoid(self) -> "Tensor":
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)

        def _bw(g, t=self, y=y):
            _accum(t, g * y * (1.0 - y))

        return Tensor(y, (self,), _bw)

    def log(self) -> "Tensor":
        x = self.data

        def _bw(g, t=self, x=x):
            _accum(t, g / x)

        return Tensor(np.log(x), (self,), _bw)

    def abs(self) -> "Tensor":
        x = self.data

        def _bw(g, t=self, x=x):
            _accum(t, g * np.sign(x))

        return Tensor(np.abs(x), (self,), _bw)

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose expects a matrix, got shape {self.shape}")

        def _bw(g, t=self):
            _accum(t, g.T)

        return Tensor(self.data.T.copy(), (self,), _bw)

    # -- reductions ----------------------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        """Full-array sum (axis=None, scalar output) or last-axis sum."""
        if axis is None:

            def _bw(g, t=self):
                _accum(t, np.full_like(t.data, float(g)))

            return Tensor(self.data.sum(), (self,), _bw)
        if axis != -1:
            raise ValueError("sum supports axis=None or axis=-1 only")

        def _bw_last(g, t=self):
            _accum(t, np.broadcast_to(g[..., None], t.data.shape).copy())

        return Tensor(self.data.sum(axis=-1), (self,), _bw_last)

    def mean(self) -> "Tensor":
        n = self.data.size

        def _bw(g, t=self, n=n):
            _accum(t, np.full_like(t.data, float(g) / n))

        return Tensor(self.data.mean(), (self,), _bw)

    # -- slicing -------------------------------------------------------------

    def slice_last(self, start: int, stop: int) -> "Tensor":
        """self[..., start:stop] as a new node."""

        def _bw(g, t=self, start=start, stop=stop):
            full = np.zeros_like(t.data)
            full[..., start:stop] = g
            _accum(t, full)

        return Tensor(self.data[..., start:stop].copy(), (self,), _bw)


def _accum(t: Tensor, g: np.ndarray) -> None:
    t.grad = g if t.grad is None else t.grad + g


# -- binary ops --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a 1-D bias row against a matrix."""
    if a.data.shape == b.data.shape:

        def _bw(g):
            _accum(a, g)
            _accum(b, g)

        return Tensor(a.data + b.data, (a, b), _bw)
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]:

        def _bw_bias(g):
            _accum(a, g)
            _accum(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

        return Tensor(a.data + b.data, (a, b), _bw_bias)
    raise ShapeError(f"add: incompatible shapes {a.data.shape} and {b.data.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def _bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return Tensor(a.data * b.data, (a, b), _bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"div: incompatible shapes {a.data.shape} and {b.data.shape}")

    def _bw(g):
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    return Tensor(a.data / b.data, (a, b), _bw)


def scale(a: Tensor, s: float) -> Tensor:
    def _bw(g):
        _accum(a, g * s)

    return Tensor(a.data * s, (a,), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}"
        )

    def _bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Tensor(a.data @ b.data, (a, b), _bw)


def maximum(a: Tensor, b) -> Tensor:
    """Elementwise max; b may be a Tensor, array, or scalar."""
    if isinstance(b, Tensor):
        take_a = a.data >= b.data

        def _bw(g):
            _accum(a, g * take_a)
            _accum(b, g * ~take_a)

        return Tensor(np.where(take_a, a.data, b.data), (a, b), _bw)
    bd = np.broadcast_to(_as_array(b), a.data.shape)
    take_a = a.data >= bd

    def _bw_const(g):
        _accum(a, g * take_a)

    return Tensor(np.where(take_a, a.data, bd), (a,), _bw_const)


def minimum(a: Tensor, b) -> Tensor:
    """Elementwise min; b may be a Tensor, array, or scalar."""
    if isinstance(b, Tensor):
        take_a = a.data <= b.data

        def _bw(g):
            _accum(a, g * take_a)
            _accum(b, g * ~take_a)

        return Tensor(np.where(take_a, a.data, b.data), (a, b), _bw)
    bd = np.broadcast_to(_as_array(b), a.data.shape)
    take_a = a.data <= bd

    def _bw_const(g):
        _accum(a, g * take_a)

    return Tensor(np.where(take_a, a.data, bd), (a,), _bw_const)


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if axis != -1:
        raise ValueError("concat supports the last axis only")
    if not parts:
        raise ValueError("concat of zero tensors")
    widths = [p.data.shape[-1] for p in parts]

    def _bw(g):
        off = 0
        for p, w in zip(parts, widths):
            _accum(p, g[..., off : off + w])
            off += w

    return Tensor(np.concatenate([p.data for p in parts], axis=-1), tuple(parts), _bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows of a matrix by integer index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a matrix, got shape {a.shape}")

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return Tensor(a.data[idx].copy(), (a,), _bw)


# -- structured ops ------------------------------------------------------------

MASK_FILL = -1e30  # additive pre-softmax penalty; exp underflows to exactly 0


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Last-axis softmax, stabilized by max subtraction.

    ``mask`` is a boolean array broadcastable to x's shape; False entries get
    an additive -1e30 before normalization, making their weight exactly 0.
    A row with no True entry is an error (nothing to attend to).
    """
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax: fully masked row (no valid attention targets)")
        logits = logits + np.where(mask, 0.0, MASK_FILL)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - inner))

    return Tensor(y, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis layer normalization with population (biased) variance."""
    d = x.data.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a feature axis of size >= 2, got {d}")
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature size {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def _bw(g):
        _accum(bias, g.reshape(-1, d).sum(axis=0))
        _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))

    return Tensor(xhat * gain.data + bias.data, (x, gain, bias), _bw)


# -- parameters ---------------------------------------------------------------


class ParameterSet:
    """Ordered name -> Tensor map of learnable arrays."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def n_entries(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            src = state[k]
            if src.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {k!r}: stored shape {src.shape} != model shape {t.data.shape}"
                )
            t.data = src.astype(np.float64, copy=True)


# -- gradient verification ------------------------------------------------------


def _eval_scalar(f, params: ParameterSet) -> float:
    with no_grad():
        v = f(params)
    v = float(v.data if isinstance(v, Tensor) else v)
    if not math.isfinite(v):
        raise ValueError(f"finite_diff: function returned non-finite value {v}")
    return v


def finite_diff_report(f, params: ParameterSet, h: float = 1e-5) -> dict[str, float]:
    """Worst relative error between analytic and central-difference gradients,
    per parameter.

    Relative error per entry: |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if h <= 0:
        raise ValueError("finite_diff: h must be positive")
    params.zero_grad()
    loss = f(params)
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ValueError("finite_diff: f must return a scalar Tensor")
    if not math.isfinite(float(loss.data)):
        raise ValueError("finite_diff: loss is non-finite")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    report: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.flat  # flatiter writes through regardless of layout
        ana = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(t.data.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _eval_scalar(f, params)
            flat[i] = orig - h
            fm = _eval_scalar(f, params)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            rel = abs(ana[i] - num) / max(1e-8, abs(ana[i]) + abs(num))
            if rel > worst:
                worst = rel
        report[name] = worst
    return report


def finite_diff_check(f, params: ParameterSet, h: float = 1e-5) -> float:
    """Max over all parameter entries of the analytic-vs-numeric relative error."""
    report = finite_diff_report(f, params, h)
    return max(report.values()) if report else 0.0
