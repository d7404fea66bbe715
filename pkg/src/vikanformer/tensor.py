"""
Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation creates a new Tensor holding a `Node` that
remembers its parents and a closure mapping the upstream gradient to one
gradient per parent. `Tensor.backward` walks the tape once in reverse
topological order and accumulates into `.grad` of the leaves.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Literal, Sequence

import numpy as np

from vikanformer.errors import AutogradError, PrecisionError, ShapeError

MAX_RANK = 4

ElementwiseOp = Literal[
    "add", "sub", "mul", "div", "sin", "cos", "exp", "log", "tanh", "silu", "neg", "pow_scalar", "relu", "gelu"
]
ReduceOp = Literal["sum", "mean", "max"]


class Precision(Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> type[np.floating]:
        return np.float32 if self is Precision.F32 else np.float64

    @classmethod
    def parse(cls, value: "Precision | str") -> "Precision":
        return value if isinstance(value, Precision) else cls(value.lower())


_precision = Precision.F64
_grad_enabled = True


def get_precision() -> Precision:
    return _precision


def set_precision(precision: Precision | str):
    global _precision
    _precision = Precision.parse(precision)


@contextmanager
def using_precision(precision: Precision | str) -> Iterator[Precision]:
    previous = get_precision()
    set_precision(precision)
    try:
        yield get_precision()
    finally:
        set_precision(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Forward without building the tape."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    # numpy の演算子が Tensor 側の反射演算にまかせるように
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else np.dtype(get_precision().dtype)
        array = np.array(data, dtype=dtype)
        if array.ndim > MAX_RANK:
            raise ShapeError(f"rank {array.ndim} exceeds the supported maximum of {MAX_RANK}: shape {array.shape}")
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
        out = cls.__new__(cls)
        if data.ndim > MAX_RANK:
            raise ShapeError(f"{op} would produce rank {data.ndim} > {MAX_RANK}: shape {data.shape}")
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.node = Node(op, parents, backward) if out.requires_grad else None
        return out

    # *** properties ***
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    # *** backward pass ***
    def _topological_order(self) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in reversed(tensor.node.parents):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return order

    def backward(self):
        if self.size != 1 or self.ndim > 1:
            raise AutogradError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise AutogradError("loss does not depend on any tensor with requires_grad=True")

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for tensor in reversed(self._topological_order()):
            upstream = grads.pop(id(tensor), None)
            if upstream is None:
                continue
            if tensor.node is None:
                # 勾配は上書きせず累積する (zero_grads で明示的にリセット)
                tensor.grad = upstream.copy() if tensor.grad is None else tensor.grad + upstream
                continue
            for parent, grad in zip(tensor.node.parents, tensor.node.backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grad if key not in grads else grads[key] + grad

    # *** operator sugar ***
    def __add__(self, other) -> Tensor:
        return elementwise("add", self, other)

    def __radd__(self, other) -> Tensor:
        return elementwise("add", _lift(other, self), self)

    def __sub__(self, other) -> Tensor:
        return elementwise("sub", self, other)

    def __rsub__(self, other) -> Tensor:
        return elementwise("sub", _lift(other, self), self)

    def __mul__(self, other) -> Tensor:
        return elementwise("mul", self, other)

    def __rmul__(self, other) -> Tensor:
        return elementwise("mul", _lift(other, self), self)

    def __truediv__(self, other) -> Tensor:
        return elementwise("div", self, other)

    def __rtruediv__(self, other) -> Tensor:
        return elementwise("div", _lift(other, self), self)

    def __neg__(self) -> Tensor:
        return elementwise("neg", self)

    def __pow__(self, exponent: float) -> Tensor:
        return elementwise("pow_scalar", self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)

    def sin(self) -> Tensor:
        return elementwise("sin", self)

    def cos(self) -> Tensor:
        return elementwise("cos", self)

    def exp(self) -> Tensor:
        return elementwise("exp", self)

    def log(self) -> Tensor:
        return elementwise("log", self)

    def tanh(self) -> Tensor:
        return elementwise("tanh", self)

    def silu(self) -> Tensor:
        return elementwise("silu", self)

    def relu(self) -> Tensor:
        return elementwise("relu", self)

    def gelu(self) -> Tensor:
        return elementwise("gelu", self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("mean", self, axis, keepdims)

    def max(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int] | None = None) -> Tensor:
        return transpose(self, axes)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _lift(value, like: Tensor) -> Tensor:
    """Python scalars and numpy constants adopt the precision of `like`."""
    if isinstance(value, Tensor):
        if value.dtype != like.dtype:
            raise PrecisionError(f"mixed precision: {value.dtype} vs {like.dtype}")
        return value
    return Tensor(value, dtype=like.dtype)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def elementwise(op: ElementwiseOp, a: Tensor, b=None) -> Tensor:
    """Apply one of the elementwise operations, broadcasting binary operands."""
    if op in ("add", "sub", "mul", "div"):
        b = _lift(b, a)
        _broadcast_shape(a, b)
        x, y = a.data, b.data
        if op == "add":
            out = x + y
            grads = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))  # noqa: E731
        elif op == "sub":
            out = x - y
            grads = lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))  # noqa: E731
        elif op == "mul":
            out = x * y
            grads = lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))  # noqa: E731
        else:
            # IEEE semantics: division by zero yields inf / nan, never traps
            with np.errstate(divide="ignore", invalid="ignore"):
                out = x / y

            def grads(g):
                with np.errstate(divide="ignore", invalid="ignore"):
                    return _unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)

        return Tensor._from_op(out, op, (a, b), grads)

    x = a.data
    if op == "neg":
        return Tensor._from_op(-x, op, (a,), lambda g: (-g,))
    if op == "sin":
        return Tensor._from_op(np.sin(x), op, (a,), lambda g: (g * np.cos(x),))
    if op == "cos":
        return Tensor._from_op(np.cos(x), op, (a,), lambda g: (-g * np.sin(x),))
    if op == "exp":
        out = np.exp(x)
        return Tensor._from_op(out, op, (a,), lambda g: (g * out,))
    if op == "log":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)

        def log_grad(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g / x,)

        return Tensor._from_op(out, op, (a,), log_grad)
    if op == "tanh":
        out = np.tanh(x)
        return Tensor._from_op(out, op, (a,), lambda g: (g * (1.0 - out * out),))
    if op == "silu":
        s = _sigmoid(x)
        return Tensor._from_op(x * s, op, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))
    if op == "relu":
        mask = (x > 0).astype(x.dtype)
        return Tensor._from_op(x * mask, op, (a,), lambda g: (g * mask,))
    if op == "gelu":
        t = np.tanh(_GELU_C * (x + _GELU_K * x**3))
        out = 0.5 * x * (1.0 + t)

        def gelu_grad(g):
            dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
            return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

        return Tensor._from_op(out, op, (a,), gelu_grad)
    if op == "pow_scalar":
        if isinstance(b, Tensor):
            raise ShapeError("pow_scalar takes a Python scalar exponent")
        p = float(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.power(x, p).astype(x.dtype)

        def pow_grad(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                return (g * p * np.power(x, p - 1.0),)

        return Tensor._from_op(out, op, (a,), pow_grad)
    raise ValueError(f"unknown elementwise op {op!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product; batched products go through `bmm`."""
    b = _lift(b, a)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return Tensor._from_op(x @ y, "matmul", (a, b), lambda g: (g @ y.T, x.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over a shared leading axis: [B,m,k] @ [B,k,n] -> [B,m,n]."""
    b = _lift(b, a)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data
    return Tensor._from_op(
        np.matmul(x, y), "bmm", (a, b),
        lambda g: (np.matmul(g, y.transpose(0, 2, 1)), np.matmul(x.transpose(0, 2, 1), g)),
    )


def reduce(op: ReduceOp, a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        if not -a.ndim <= axis < a.ndim:
            raise ShapeError(f"axis {axis} out of range for shape {a.shape}")
        axis = axis % a.ndim
    x = a.data

    def expand(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(np.reshape(g, (1,) * x.ndim), x.shape)
        return np.broadcast_to(g if keepdims else np.expand_dims(g, axis), x.shape)

    if op == "sum":
        out = np.sum(x, axis=axis, keepdims=keepdims)
        return Tensor._from_op(np.asarray(out), op, (a,), lambda g: (expand(g).copy(),))
    if op == "mean":
        count = x.size if axis is None else x.shape[axis]
        out = np.mean(x, axis=axis, keepdims=keepdims)
        return Tensor._from_op(np.asarray(out), op, (a,), lambda g: (expand(g) / count,))
    if op == "max":
        out = np.max(x, axis=axis, keepdims=keepdims)

        def max_grad(g):
            # 同値の場合は最初の argmax にだけ勾配を流す
            mask = np.zeros_like(x)
            if axis is None:
                mask.reshape(-1)[np.argmax(x)] = 1.0
            else:
                np.put_along_axis(mask, np.expand_dims(np.argmax(x, axis=axis), axis), 1.0, axis=axis)
            return (mask * expand(g),)

        return Tensor._from_op(np.asarray(out), op, (a,), max_grad)
    raise ValueError(f"unknown reduce op {op!r}")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {original} into {tuple(shape)}") from None
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(original),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def _is_gather(key, ndim: int) -> bool:
    """True for a tuple of one integer array per axis."""
    return (
        isinstance(key, tuple)
        and len(key) == ndim
        and all(isinstance(k, np.ndarray) and np.issubdtype(k.dtype, np.integer) for k in key)
    )


def index(a: Tensor, key) -> Tensor:
    shape, dtype = a.shape, a.dtype

    def index_grad(g):
        if _is_gather(key, len(shape)):
            # 整数配列だけのインデックスは bincount で集約
            flat = np.ravel_multi_index(np.broadcast_arrays(*key), shape, mode="wrap")
            full = np.bincount(flat.ravel(), weights=g.ravel(), minlength=int(np.prod(shape)))
            return (full.reshape(shape).astype(dtype),)
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return Tensor._from_op(np.asarray(a.data[key]), "index", (a,), index_grad)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    first = tensors[0]
    tensors = [_lift(t, first) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._from_op(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from None
    original = a.shape
    return Tensor._from_op(out, "broadcast_to", (a,), lambda g: (_unbroadcast(g, original),))


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad)


def ones(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(tuple(shape)), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zero_grads(tensors) -> None:
    """Reset `.grad` on every tensor before the next backward pass."""
    for t in tensors:
        t.zero_grad()
