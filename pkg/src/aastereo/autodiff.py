"""Dense float64 tensors, a reverse-mode tape over a fixed operator set, and a
central-difference gradient checker.

Every differentiable operator in the package is a :class:`Function` with a
``forward`` that returns ``(output, saved)`` and a ``backward`` that maps the
saved state and an output cotangent to one gradient per input (``None`` for
inputs that carry no gradient).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an operator receives inputs with incompatible shapes."""


class Tensor:
    """Row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64, copy=True, order="C")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar, all routed through the recorded operator set
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """Base class for differentiable operators.

    Subclasses set ``name`` and implement ``forward`` / ``backward``; ``check``
    may be overridden to validate input shapes before the forward runs.
    """

    name = "function"

    def check(self, *arrays: np.ndarray) -> None:
        pass

    def forward(self, *arrays: np.ndarray):
        raise NotImplementedError

    def backward(self, saved, grad_out: np.ndarray) -> tuple:
        raise NotImplementedError

    def __call__(self, *inputs):
        return apply(self, *inputs)

    def __repr__(self):
        return f"<{type(self).__name__} {self.name}>"


@dataclass
class _Entry:
    op: Function
    inputs: tuple
    output: Tensor
    saved: object


class Tape:
    """Single-owner record of operator applications.

    Use as a context manager; operations applied to tensors that require
    gradients are recorded in order and replayed backwards by
    :meth:`gradient`.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def record(self, op, inputs, output, saved):
        self.entries.append(_Entry(op, tuple(inputs), output, saved))

    def gradient(self, output: Tensor, wrt: Sequence[Tensor], cotangent=None) -> list:
        """Vector-Jacobian product of ``output`` with respect to ``wrt``.

        ``cotangent`` defaults to ones (for a scalar output this is the plain
        gradient). Tensors not reached by the recorded graph get zeros.
        """
        if cotangent is None:
            cotangent = np.ones_like(output.data)
        cotangent = np.asarray(cotangent, dtype=np.float64)
        if cotangent.shape != output.shape:
            raise ShapeError(f"tape: cotangent shape {cotangent.shape} != output shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): cotangent}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            in_grads = entry.op.backward(entry.saved, g)
            for t, gi in zip(entry.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]

    def backward(self, output: Tensor, params: Sequence[Tensor], cotangent=None) -> None:
        """Like :meth:`gradient` but stores results in ``param.grad``."""
        for p, g in zip(params, self.gradient(output, params, cotangent)):
            p.grad = g


_state = threading.local()


def current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def apply(op: Function, *inputs) -> Tensor:
    tensors = [as_tensor(x) for x in inputs]
    arrays = [t.data for t in tensors]
    op.check(*arrays)
    out, saved = op.forward(*arrays)
    result = Tensor.__new__(Tensor)
    out = np.asarray(out, dtype=np.float64)
    result.data = out if out.flags.c_contiguous else np.ascontiguousarray(out)
    result.grad = None
    result.name = None
    result.requires_grad = False
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        result.requires_grad = True
        tape.record(op, tensors, result, saved)
    return result


# ---------------------------------------------------------------------------
# elementary operators

def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


class Add(Function):
    name = "add"

    def check(self, a, b):
        _check_broadcast(self.name, a, b)

    def forward(self, a, b):
        return a + b, (a.shape, b.shape)

    def backward(self, saved, g):
        sa, sb = saved
        return unbroadcast(g, sa), unbroadcast(g, sb)


class Sub(Function):
    name = "sub"

    def check(self, a, b):
        _check_broadcast(self.name, a, b)

    def forward(self, a, b):
        return a - b, (a.shape, b.shape)

    def backward(self, saved, g):
        sa, sb = saved
        return unbroadcast(g, sa), unbroadcast(-g, sb)


class Mul(Function):
    name = "mul"

    def check(self, a, b):
        _check_broadcast(self.name, a, b)

    def forward(self, a, b):
        return a * b, (a, b)

    def backward(self, saved, g):
        a, b = saved
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


class Scale(Function):
    name = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def forward(self, x):
        return x * self.factor, None

    def backward(self, saved, g):
        return (g * self.factor,)


class Square(Function):
    name = "square"

    def forward(self, x):
        return x * x, x

    def backward(self, x, g):
        return (2.0 * x * g,)


class Sum(Function):
    name = "sum"

    def forward(self, x):
        return np.sum(x), x.shape

    def backward(self, shape, g):
        return (np.broadcast_to(g, shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        return np.mean(x), x.shape

    def backward(self, shape, g):
        return (np.full(shape, g / int(np.prod(shape))),)


class LeakyReLU(Function):
    name = "leaky_relu"

    def __init__(self, slope: float = 0.1):
        self.slope = slope

    def forward(self, x):
        pos = x > 0
        return np.where(pos, x, self.slope * x), pos

    def backward(self, pos, g):
        return (np.where(pos, g, self.slope * g),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        y = 0.5 * (1.0 + np.tanh(0.5 * x))
        return y, y

    def backward(self, y, g):
        return (g * y * (1.0 - y),)


class Softmax(Function):
    name = "softmax"

    def __init__(self, axis: int = -1):
        self.axis = axis

    def forward(self, x):
        z = x - x.max(axis=self.axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=self.axis, keepdims=True)
        return y, y

    def backward(self, y, g):
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class Concat(Function):
    name = "concat"

    def __init__(self, axis: int = 1):
        self.axis = axis

    def check(self, *arrays):
        ref = list(arrays[0].shape)
        for a in arrays[1:]:
            other = list(a.shape)
            if len(other) != len(ref) or any(
                i != self.axis % len(ref) and x != y for i, (x, y) in enumerate(zip(ref, other))
            ):
                raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]}")

    def forward(self, *arrays):
        sizes = [a.shape[self.axis] for a in arrays]
        return np.concatenate(arrays, axis=self.axis), sizes

    def backward(self, sizes, g):
        cuts = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Reshape(Function):
    name = "reshape"

    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape(self.shape), x.shape

    def backward(self, shape, g):
        return (g.reshape(shape),)


class Crop(Function):
    """Keep the leading ``height`` x ``width`` block of the last two axes."""

    name = "crop"

    def __init__(self, height: int, width: int):
        self.height, self.width = height, width

    def check(self, x):
        if x.shape[-2] < self.height or x.shape[-1] < self.width:
            raise ShapeError(f"crop: {x.shape} smaller than {(self.height, self.width)}")

    def forward(self, x):
        return x[..., : self.height, : self.width].copy(), x.shape

    def backward(self, shape, g):
        out = np.zeros(shape)
        out[..., : self.height, : self.width] = g
        return (out,)


def add(a, b):
    return apply(Add(), a, b)


def sub(a, b):
    return apply(Sub(), a, b)


def mul(a, b):
    return apply(Mul(), a, b)


def scale(x, factor):
    return apply(Scale(factor), x)


def square(x):
    return apply(Square(), x)


def tsum(x):
    return apply(Sum(), x)


def mean(x):
    return apply(Mean(), x)


def leaky_relu(x, slope=0.1):
    return apply(LeakyReLU(slope), x)


def sigmoid(x):
    return apply(Sigmoid(), x)


def softmax(x, axis=-1):
    return apply(Softmax(axis), x)


def concat(tensors, axis=1):
    return apply(Concat(axis), *tensors)


def reshape(x, shape):
    return apply(Reshape(shape), x)


def crop(x, height, width):
    return apply(Crop(height, width), x)


# ---------------------------------------------------------------------------
# single-op VJP and finite-difference checking

def forward_backward(op: Function, inputs: Sequence, cotangent) -> list[np.ndarray]:
    """Run ``op`` forward on ``inputs`` and return the VJP with ``cotangent``."""
    arrays = [np.asarray(as_tensor(x).data) for x in inputs]
    op.check(*arrays)
    out, saved = op.forward(*arrays)
    out = np.asarray(out)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != out.shape:
        shapes = ", ".join(str(a.shape) for a in arrays)
        raise ShapeError(
            f"{op.name}: cotangent shape {cot.shape} does not match output shape {out.shape} "
            f"(inputs {shapes})"
        )
    grads = op.backward(saved, cot)
    return [np.zeros_like(a) if g is None else np.asarray(g, dtype=np.float64)
            for a, g in zip(arrays, grads)]


@dataclass
class GradCheckReport:
    op: str
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tolerance: float = 1e-4
    passed: bool = False

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op:<20s} {self.max_rel_error:10.3e}  {status}"


def finite_difference_check(op: Function | Callable, inputs: Sequence, step: float = 1e-6,
                            tolerance: float = 1e-4, wrt: Sequence[int] | None = None,
                            cotangent_seed: int = 0) -> GradCheckReport:
    """Compare analytic VJPs against central differences on every coordinate.

    The scalar probed is ``<op(x), r>`` for a fixed random cotangent ``r``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``; a
    non-finite difference marks that coordinate as failed (error = inf).
    ``wrt`` restricts which inputs are perturbed (default: all).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    name = getattr(op, "name", getattr(op, "__name__", "op"))
    indices = range(len(arrays)) if wrt is None else wrt

    def evaluate(arrs):
        try:
            with np.errstate(all="ignore"):
                out, _ = op.forward(*arrs)
        except (FloatingPointError, ValueError, ZeroDivisionError):
            return None
        return np.asarray(out, dtype=np.float64)

    base = evaluate(arrays)
    if base is None:
        return GradCheckReport(name, float("inf"), [], tolerance, False)
    rng = np.random.default_rng(cotangent_seed)
    cot = rng.standard_normal(base.shape) if base.ndim else np.array(1.0)
    try:
        analytic = forward_backward(op, arrays, cot)
    except Exception:
        return GradCheckReport(name, float("inf"), [], tolerance, False)

    per_input = []
    for i in indices:
        x = arrays[i]
        worst = 0.0
        flat = x.reshape(-1)
        a_flat = analytic[i].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            fp = evaluate(arrays)
            flat[j] = orig - step
            fm = evaluate(arrays)
            flat[j] = orig
            if fp is None or fm is None:
                worst = float("inf")
                continue
            num = (np.sum(fp * cot) - np.sum(fm * cot)) / (2.0 * step)
            a = a_flat[j]
            if not (np.isfinite(num) and np.isfinite(a)):
                worst = float("inf")
                continue
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        per_input.append(worst)
    max_err = max(per_input) if per_input else 0.0
    return GradCheckReport(name, max_err, per_input, tolerance, bool(max_err < tolerance))
