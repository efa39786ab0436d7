"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError

# per-thread so parallel evaluation workers do not toggle each other's mode
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording the graph."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


class Tensor:
    """A dense array of float64 values plus an accumulated gradient.

    ``shape`` follows NCHW for image-like data. Gradients are allocated lazily
    and always have the same shape as ``data``.
    """

    __slots__ = ("data", "_grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: Optional[str] = None,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self._grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self.name = name

    # -- basic accessors ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise DimensionError(f"grad shape {value.shape} != tensor shape {self.data.shape}")
        self._grad = value.copy()

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    # -- backward ------------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        For a non-scalar output, ``grad`` is the upstream gradient.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without grad needs a single-element output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        # intermediate gradients live in a side table so leaves keep accumulating
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self):
        return sum_all(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap ``data`` as the output of an op, recording the graph if needed."""
    parents = tuple(parents)
    track = grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out._grad = None
    out.requires_grad = True
    out._parents = parents
    out._backward = backward
    out.name = None
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementary ops ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return ((a, unbroadcast(g, a.shape)), (b, unbroadcast(g, b.shape)))

    return make_result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; ``b`` may be a Python scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def backward_scalar(g):
            return ((a, g * c),)

        return make_result(a.data * c, (a,), backward_scalar)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return ((a, unbroadcast(g * b.data, a.shape)), (b, unbroadcast(g * a.data, b.shape)))

    return make_result(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, unbroadcast(ga, a.shape)), (b, unbroadcast(gb, b.shape)))

    return make_result(data, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc

    def backward(g):
        return ((a, g.reshape(a.shape)),)

    return make_result(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return ((a, np.transpose(g, inv)),)

    return make_result(data, (a,), backward)


def getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]
    if not isinstance(data, np.ndarray):
        data = np.array(data)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return ((a, out),)

    return make_result(data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            (t, np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis))
            for i, t in enumerate(tensors)
        )

    return make_result(data, tensors, backward)


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return make_result(np.array(a.data.sum()), (a,), backward)


def mean_axes(a: Tensor, axes: tuple) -> Tensor:
    """Mean over ``axes`` without keeping them (used as global average pooling)."""
    data = a.data.mean(axis=axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        g = np.expand_dims(g, axes)
        return ((a, np.broadcast_to(g / count, a.shape).copy()),)

    return make_result(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return make_result(a.data * mask, (a,), backward)


# -- serialization ------------------------------------------------------------

def write_tensor(fp: BinaryIO, array) -> None:
    """Write ``u32 rank, u32 dims[], f64 values[]`` little-endian."""
    arr = np.asarray(array.data if isinstance(array, Tensor) else array, dtype="<f8", order="C")
    fp.write(struct.pack("<I", arr.ndim))
    fp.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fp.write(arr.tobytes(order="C"))


def read_tensor(fp: BinaryIO) -> np.ndarray:
    head = fp.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    dims = struct.unpack(f"<{rank}I", fp.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fp.read(8 * count)
    if len(raw) != 8 * count:
        raise EOFError("truncated tensor values")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)


def save_tensor(path, array) -> None:
    with open(path, "wb") as fp:
        write_tensor(fp, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fp:
        return read_tensor(fp)
