"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every op works on the last axis and accepts an optional leading batch axis,
so the same model code runs on one instance (shape ``(m,)``) or on a group
of same-length instances (shape ``(B, m)``).

Recording is opt-in: ops only append to a :class:`Trace` while one is
active (``with Trace() as tape: ...``) and at least one input requires
grad. Outside a trace everything is plain numpy.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Trace",
    "ParamEntry",
    "ParameterStore",
    "FiniteDiffResult",
    "as_tensor",
    "affine",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "square",
    "absolute",
    "clamp_min",
    "softmax2",
    "concat",
    "pick",
    "sum_last",
    "total",
    "backward",
    "finite_diff",
    "adam_step",
    "rel_error",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op: str, a, b=None):
        self.op = op
        self.shapes = (tuple(a), None if b is None else tuple(b))
        if b is None:
            msg = f"{op}: invalid shape {tuple(a)}"
        else:
            msg = f"{op}: shape mismatch {tuple(a)} vs {tuple(b)}"
        super().__init__(msg)


class NonFiniteError(ValueError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping autodiff needs.

    ``name`` is set for parameters only; gradients are reported by name.
    """

    __slots__ = ("data", "requires_grad", "name", "_trace", "_handle")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64) if requires_grad else np.asarray(data, dtype=np.float64)
        if not requires_grad:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._trace = None
        self._handle = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def trace_id(self):
        if self._trace is None:
            return None
        return (id(self._trace), self._handle)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(np.asarray(self.data).item())

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# Trace
# --------------------------------------------------------------------------

_local = threading.local()


def _active() -> Optional["Trace"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Record:
    tag: str
    inputs: tuple
    output: Tensor
    grad_fn: Callable[[np.ndarray], tuple]


class Trace:
    """Ordered tape of recorded ops.

    Records are appended in execution order, which is already a topological
    order; :func:`backward` walks them in reverse.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Trace":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _push(self, tag, inputs, out, grad_fn):
        out.requires_grad = True
        out._trace = self
        out._handle = len(self.records)
        self.records.append(_Record(tag, inputs, out, grad_fn))


def _emit(tag: str, data: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out._trace = None
    out._handle = None
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._push(tag, inputs, out, grad_fn)
    return out


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def affine(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``y = x @ W + b`` with ``W`` laid out as (inputs, outputs)."""
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise ShapeError("affine", x.shape, W.shape)
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError("affine(bias)", W.shape, b.shape)
    xd, Wd = x.data, W.data
    y = xd @ Wd
    if b is not None:
        y = y + b.data

    def grad_fn(g):
        gx = g @ Wd.T
        gW = np.outer(xd, g) if xd.ndim == 1 else xd.T @ g
        if b is None:
            return gx, gW
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _emit("affine", y, inputs, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    return _emit("div", ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


def absolute(a: Tensor) -> Tensor:
    x = a.data
    return _emit("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    x = a.data
    keep = x > lo
    return _emit("clamp_min", np.where(keep, x, lo), (a,), lambda g: (g * keep,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name; ``b`` is required exactly for the binary ops."""
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def softmax2(z: Tensor) -> Tensor:
    """Two-way softmax over the last axis, max-subtracted."""
    if z.shape[-1:] != (2,):
        raise ShapeError("softmax2", z.shape)
    x = z.data
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("softmax2: non-finite logits")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax2", s, (z,), grad_fn)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis. Rows must agree when batched."""
    if a.data.ndim not in (1, 2) or a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError("concat", a.shape, b.shape)
    if a.shape[-1] == 0 or b.shape[-1] == 0:
        raise ShapeError("concat(empty operand)", a.shape, b.shape)
    p = a.shape[-1]
    y = np.concatenate([a.data, b.data], axis=-1)
    return _emit("concat", y, (a, b), lambda g: (g[..., :p], g[..., p:]))


def pick(a: Tensor, index) -> Tensor:
    """Select one entry of the last axis per row (a gather)."""
    x = a.data
    if x.ndim == 1:
        i = int(index)
        y = x[i]

        def grad_fn(g):
            out = np.zeros_like(x)
            out[i] = g
            return (out,)
    else:
        idx = np.asarray(index, dtype=np.intp)
        if idx.shape != x.shape[:1]:
            raise ShapeError("pick", x.shape, idx.shape)
        rows = np.arange(x.shape[0])
        y = x[rows, idx]

        def grad_fn(g):
            out = np.zeros_like(x)
            out[rows, idx] = g
            return (out,)

    return _emit("pick", np.asarray(y, dtype=np.float64), (a,), grad_fn)


def sum_last(a: Tensor) -> Tensor:
    x = a.data
    return _emit("sum_last", x.sum(axis=-1), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, -1), x.shape).copy(),))


def total(a: Tensor) -> Tensor:
    """Sum of every element into a scalar."""
    x = a.data
    return _emit("total", np.asarray(x.sum()), (a,), lambda g: (np.full(x.shape, float(g)),))


# --------------------------------------------------------------------------
# Reverse pass
# --------------------------------------------------------------------------

def backward(trace: Trace, loss: Tensor, store: Optional["ParameterStore"] = None) -> dict:
    """Gradients of a scalar ``loss`` keyed by parameter name.

    With ``store`` given every stored parameter gets an entry (zeros when it
    did not take part in the trace).
    """
    if loss.data.size != 1:
        raise ShapeError("backward(loss must be scalar)", loss.shape)
    if loss._trace is not trace:
        raise ValueError("loss was not recorded on this trace")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[str, np.ndarray] = {}
    for rec in reversed(trace.records[: loss._handle + 1]):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.grad_fn(g)):
            if not inp.requires_grad:
                continue
            if inp._trace is None:
                # leaf
                if inp.name is None:
                    continue
                prev = named.get(inp.name)
                named[inp.name] = gi.copy() if prev is None else prev + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if store is not None:
        for name, entry in store.items():
            if name not in named:
                named[name] = np.zeros_like(entry.tensor.data)
    return named


# --------------------------------------------------------------------------
# Parameters and optimisation
# --------------------------------------------------------------------------

@dataclass
class ParamEntry:
    tensor: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParameterStore:
    """Named trainable tensors together with their Adam state."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._entries[name] = ParamEntry(t, np.zeros_like(t.data), np.zeros_like(t.data))
        return t

    def init_linear(self, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                    bias: bool = True) -> None:
        """Uniform(-1/sqrt(n_in), 1/sqrt(n_in)) weights ``name.W``, zero bias ``name.b``."""
        bound = 1.0 / math.sqrt(n_in)
        self.add(f"{name}.W", rng.uniform(-bound, bound, size=(n_in, n_out)))
        if bias:
            self.add(f"{name}.b", np.zeros(n_out))

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def get(self, name: str) -> Optional[Tensor]:
        e = self._entries.get(name)
        return None if e is None else e.tensor

    def entry(self, name: str) -> ParamEntry:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def size(self) -> int:
        return sum(e.tensor.data.size for e in self._entries.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e.tensor.data.copy() for k, e in self._entries.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, arr in values.items():
            t = self._entries[k].tensor
            if t.data.shape != np.shape(arr):
                raise ShapeError(f"load {k}", t.data.shape, np.shape(arr))
            t.data[...] = arr

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, e in self._entries.items():
            out.add(k, e.tensor.data)
            ne = out._entries[k]
            ne.m[...] = e.m
            ne.v[...] = e.v
            ne.step = e.step
        return out


def adam_step(store: ParameterStore, gradients: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update, in place. Returns ``store``."""
    for name, g in gradients.items():
        if name not in store:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        e = store.entry(name)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != e.tensor.data.shape:
            raise ShapeError(f"adam_step({name})", e.tensor.data.shape, g.shape)
        e.step += 1
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * g * g
        m_hat = e.m / (1.0 - beta1 ** e.step)
        v_hat = e.v / (1.0 - beta2 ** e.step)
        e.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

@dataclass
class FiniteDiffResult:
    grads: dict = field(default_factory=dict)
    # coordinates where one-sided slopes disagree (kinks)
    nonsmooth: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]


def finite_diff(f: Callable[[ParameterStore], float], store: ParameterStore, h: float = 1e-4,
                names: Optional[Iterable[str]] = None, kink_tol: float = 1e-2) -> FiniteDiffResult:
    """Central-difference gradient of ``f`` at the store's current values.

    ``f`` must be deterministic (freeze any noise). Parameters are perturbed
    in place and restored afterwards.
    """
    if not h > 0:
        raise ValueError("step h must be positive")

    def ev():
        v = float(f(store))
        if not math.isfinite(v):
            raise NonFiniteError(f"f returned {v}")
        return v

    f0 = ev()
    res = FiniteDiffResult()
    for name in (store.names() if names is None else names):
        data = store[name].data
        flat = data.reshape(-1)
        est = np.zeros(flat.size)
        kinks = []
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = ev()
            flat[i] = orig - h
            fm = ev()
            flat[i] = orig
            est[i] = (fp - fm) / (2 * h)
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                kinks.append(i)
        res.grads[name] = est.reshape(data.shape)
        res.nonsmooth[name] = kinks
    return res


def rel_error(a, b) -> np.ndarray:
    """|a-b| / max(1, |a|, |b|), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
