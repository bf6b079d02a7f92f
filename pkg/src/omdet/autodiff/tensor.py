"""Tensor container, precision control and the recording tape.

A :class:`Tensor` is an immutable wrapper around a contiguous numpy array.
Primitives (see :mod:`omdet.autodiff.functional`) append a node to the
innermost active :class:`Tape` whenever one of their inputs requires a
gradient. Outside of a tape nothing is recorded, which is the inference path.

    with Tape() as tape:
        loss = F.sum(F.mul(x, x))
    grads = tape.backward(loss)
    grads[x]            # -> 2 * x.data
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from omdet.errors import NumericError, UsageError

_DEFAULT_DTYPE = np.dtype(np.float32)
_TAPES: list["Tape"] = []


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise UsageError(f"precision must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default floating dtype (``"float64"`` for checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or ''} created with non-finite values")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # Operator sugar; implementations live in functional.
    def __add__(self, other):
        from omdet.autodiff import functional as F

        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from omdet.autodiff import functional as F

        return F.sub(self, other)

    def __rsub__(self, other):
        from omdet.autodiff import functional as F

        return F.sub(other, self)

    def __mul__(self, other):
        from omdet.autodiff import functional as F

        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from omdet.autodiff import functional as F

        return F.div(self, other)

    def __rtruediv__(self, other):
        from omdet.autodiff import functional as F

        return F.div(other, self)

    def __neg__(self):
        from omdet.autodiff import functional as F

        return F.neg(self)

    def __matmul__(self, other):
        from omdet.autodiff import functional as F

        return F.matmul(self, other)

    def __getitem__(self, index):
        from omdet.autodiff import functional as F

        return F.getitem(self, index)

    def reshape(self, *shape):
        from omdet.autodiff import functional as F

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def transpose(self, *axes):
        from omdet.autodiff import functional as F

        return F.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from omdet.autodiff import functional as F

        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from omdet.autodiff import functional as F

        return F.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=_DEFAULT_DTYPE), False)


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


@dataclass(frozen=True)
class Node:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Gradients:
    """Mapping from tensors (by identity) to their gradient arrays."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[id(tensor)]
        except KeyError:
            if tensor.requires_grad:
                return np.zeros_like(tensor.data)
            raise KeyError(f"{tensor!r} does not require grad") from None

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads

    def get(self, tensor: Tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __len__(self) -> int:
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return [self._owners[k] for k in self._grads]


class Tape:
    """Records primitive applications in execution (topological) order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._outputs.add(id(node.output))

    def backward(self, root: Tensor) -> Gradients:
        return backward(self, root)


def current_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    saved = list(_TAPES)
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES.extend(saved)


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Reverse sweep over ``tape`` accumulating d(root)/d(t) for every recorded tensor."""
    if root.size != 1:
        raise UsageError(f"backward root must be a scalar, got shape {root.shape}")
    if id(root) not in tape._outputs:
        raise UsageError("backward root was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: dict[int, Tensor] = {id(root): root}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        in_grads = node.backward(g, needs)
        for t, need, gi in zip(node.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            if gi.shape != t.data.shape:
                raise UsageError(
                    f"primitive {node.name!r} returned gradient of shape {gi.shape} "
                    f"for input of shape {t.data.shape}"
                )
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi.astype(t.data.dtype, copy=False)
                owners[key] = t
    return Gradients(grads, owners)
