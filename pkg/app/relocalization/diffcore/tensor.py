"""
Tensor and Tape

A Tensor is a thin wrapper around a numpy array. Primitive ops record
themselves on the Tape active in the current thread; ``Tape.gradient``
replays the record backwards. Records are appended in creation order,
which is already a topological order of the graph.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float64

_node_ids = itertools.count()
_local = threading.local()


class Tensor:
    """N-dimensional float array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "node_id")
    # numpy defers binary operators to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=dtype)
        if dtype is None and array.dtype not in (np.float32, np.float64):
            array = array.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    # ------------------------------------------------------------------
    # Array-like surface
    # ------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class TapeRecord:
    """One primitive op: output node, input nodes and the vector-Jacobian product."""

    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward: BackwardFn

    @property
    def output_id(self) -> int:
        return self.output.node_id

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


class Tape:
    """Ordered record of the primitive ops run while the tape is active.

    Usage::

        with Tape() as tape:
            loss = f(params)
        grads = tape.gradient(loss, params)

    A tape belongs to the thread that entered it.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        self.records.append(TapeRecord(op=op, output=output, inputs=inputs, backward=backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> List[np.ndarray]:
        """Reverse pass from ``target``; returns d target / d source per source.

        Sources the target does not depend on get zero gradients.
        """
        grads: Dict[int, np.ndarray] = {target.node_id: np.ones_like(target.data)}
        for rec in reversed(self.records):
            upstream = grads.get(rec.output_id)
            if upstream is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                key = inp.node_id
                grads[key] = grads[key] + g if key in grads else g
        return [
            np.asarray(grads.get(s.node_id, np.zeros_like(s.data)), dtype=s.dtype).reshape(s.shape)
            for s in sources
        ]


def _tape_stack() -> List[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def as_tensor(value, like: Optional[Tensor] = None) -> Tensor:
    """Wrap constants; tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)
