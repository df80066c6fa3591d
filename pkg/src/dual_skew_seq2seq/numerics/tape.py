"""Dense tensors and the tape that records them for reverse-mode gradients."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import DimensionError, UsageError

log = logging.getLogger(__name__)

# Maps the output gradient to one gradient per input (None where the input
# is not differentiable).
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """An immutable float64 array, optionally bound to a node of a Tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Optional["Tape"] = None, node: Optional[int] = None) -> None:
        array = np.asarray(value, dtype=np.float64)
        if array.flags.writeable:
            # read-only arrays are shared, anything else is copied
            array = array.copy()
            array.flags.writeable = False
        self.value = array
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def data(self) -> List[float]:
        """Values in row-major order."""
        return self.value.ravel().tolist()

    @property
    def traced(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.traced else ""
        return f"Tensor(shape={self.shape}{where})"

    # Operator sugar; the implementations live in ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass(frozen=True)
class Node:
    op: str
    inputs: Tuple[Optional[int], ...]
    output: int
    shape: Tuple[int, ...]
    vjp: Optional[VJP] = None

    @property
    def is_leaf(self) -> bool:
        return self.vjp is None


class Tape:
    """Ordered record of traced operations.

    Node ids are list positions, so every input id precedes its consumer.
    A tape belongs to one caller at a time.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value, name: str = "leaf") -> Tensor:
        """Register a differentiable leaf (a parameter or an input)."""
        tensor = Tensor(value)
        node_id = len(self.nodes)
        self.nodes.append(Node(op=name, inputs=(), output=node_id, shape=tensor.shape))
        tensor.tape = self
        tensor.node = node_id
        return tensor

    def watch_all(self, arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
        return {name: self.watch(array, name=name) for name, array in arrays.items()}

    def record(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        ids = []
        for tensor in inputs:
            if tensor.tape is None:
                ids.append(None)
            elif tensor.tape is not self:
                raise UsageError(f"{op}: operand was traced on a different tape")
            else:
                ids.append(tensor.node)
        node_id = len(self.nodes)
        tensor = Tensor(value, tape=self, node=node_id)
        self.nodes.append(Node(op=op, inputs=tuple(ids), output=node_id, shape=tensor.shape, vjp=vjp))
        return tensor

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """Reverse sweep from a scalar node; returns gradients keyed by leaf id."""
        if loss.tape is not self:
            raise UsageError("backward root was not traced on this tape")
        if loss.value.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
        for node in reversed(self.nodes[: loss.node + 1]):
            grad = grads.get(node.output)
            if grad is None or node.is_leaf:
                continue
            input_grads = node.vjp(grad)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad

        # One buffer per differentiable node; unreached leaves get zeros.
        self.grads = {}
        for node in self.nodes:
            if node.output in grads:
                self.grads[node.output] = grads[node.output]
            elif node.is_leaf:
                self.grads[node.output] = np.zeros(node.shape)
        return {node.output: self.grads[node.output] for node in self.nodes if node.is_leaf}

    def grad(self, tensor: Tensor) -> np.ndarray:
        if tensor.tape is not self:
            raise UsageError("tensor was not traced on this tape")
        try:
            return self.grads[tensor.node]
        except KeyError:
            raise UsageError("backward has not reached this tensor") from None


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    return tape.backward(loss)
