"""Dense float64 tensors and the recording tape used for reverse-mode AD."""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Input shapes do not satisfy a primitive's shape rule."""


class TapeError(RuntimeError):
    """Misuse of the tape: non-scalar loss, double backward, detached loss."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf while anomaly detection was active."""

    def __init__(self, kind: str):
        super().__init__(f"non-finite values produced by primitive '{kind}'")
        self.kind = kind


class Tensor:
    """A float64 array that can take part in gradient computation.

    Leaves created with ``requires_grad=True`` start with an all-zero ``grad``
    buffer; :func:`backward` accumulates into it.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node: Node | None = None
        self._consumed = False

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
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar; implementations live in functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.scale(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum_all(self)

    def mean(self):
        from . import functional as F
        return F.mean_all(self)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True
    detect_anomaly: bool = False

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def use_tape(tape: Tape) -> Iterator[Tape]:
    """Make ``tape`` the recording target for the current thread."""
    prev = getattr(_local, "tape", None)
    _local.tape = tape
    try:
        yield tape
    finally:
        _local.tape = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    tape = current_tape()
    prev = tape.detect_anomaly
    tape.detect_anomaly = True
    try:
        yield
    finally:
        tape.detect_anomaly = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap a primitive's forward result, recording it if any input needs grad."""
    tape = current_tape()
    if tape.detect_anomaly and not np.all(np.isfinite(out)):
        raise NonFiniteError(kind)
    result = Tensor(out)
    if tape.enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(kind, tuple(inputs), result, backward)
        result._node = node
        tape.nodes.append(node)
    return result


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Nodes are replayed in reverse recording order, so accumulation order is
    fixed. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran for this loss; re-run the forward pass")
    tape = current_tape()
    if loss.is_leaf:
        if not loss.requires_grad:
            raise TapeError("loss is not connected to any leaf requiring grad")
        loss.grad = loss.grad + 1.0
        loss._consumed = True
        return
    if loss._node not in tape.nodes:
        raise TapeError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(
                    f"internal: gradient of '{node.kind}' has shape {ig.shape}, input {inp.shape}")
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = grads[key] + ig if key in grads else ig
    tape.clear()
    loss._consumed = True
