"""
Dense tensors with tape-based reverse-mode automatic differentiation.

A ``Tape`` is explicit and lives for one forward pass:

    tape = Tape()
    with tape.recording():
        loss = model_loss(batch)
    backward(loss, tape)

Operations executed while a tape is recording (and that involve a trainable
leaf or an earlier recorded result) append a node holding a backward rule.
``backward`` walks the nodes in reverse recording order, which is a valid
reverse topological order of the computation DAG, and writes a gradient
into every trainable leaf the tape touched.
"""

import contextlib
import enum
import itertools
from dataclasses import dataclass
from typing import (
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from shrinknet.util import ContractError, DimensionError, DynamicScopeVar

Shape = Tuple[int, ...]
ArrayLike = Union[np.ndarray, Sequence, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_NODE_IDS = itertools.count(1)

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Verify that every operation on finite inputs yields finite outputs."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


def _float_array(values: ArrayLike, dtype=None) -> np.ndarray:
    if dtype is None:
        dtype = np.float32 if getattr(values, "dtype", None) == np.float32 else np.float64
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    arr.flags.writeable = False
    return arr


class Tensor:
    """
    An N-dimensional array of floats, optionally carrying a gradient.

    Values are read-only. Only trainable leaves (``requires_grad=True``) may be
    re-pointed at new values, through ``assign``; that is how optimizers step.
    """

    __slots__ = ("values", "grad", "node_id", "requires_grad", "name")

    def __init__(
        self,
        values: ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        dtype=None,
    ):
        self.values: np.ndarray = _float_array(values, dtype)
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array (no copy).
        out = cls.__new__(cls)
        values = np.ascontiguousarray(values)
        values.flags.writeable = False
        out.values = values
        out.grad = None
        out.node_id = None
        out.requires_grad = False
        out.name = ""
        return out

    @property
    def shape(self) -> Shape:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {list(self.shape)}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values)

    def assign(self, values: ArrayLike) -> None:
        """
        Point a trainable leaf at new values of the same shape.

        pre: self.requires_grad
        """
        if not self.requires_grad:
            raise ContractError("only trainable leaf tensors can be assigned")
        new_values = _float_array(values, self.values.dtype)
        if new_values.shape != self.shape:
            raise DimensionError(
                f"cannot assign shape {list(new_values.shape)} to "
                f"{self.name or 'tensor'} of shape {list(self.shape)}"
            )
        self.values = new_values

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={list(self.shape)}, values={self.values!r})"

    def __add__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.ADD, self, _lift(other, self))

    def __radd__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.ADD, _lift(other, self), self)

    def __sub__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.SUB, self, _lift(other, self))

    def __rsub__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.SUB, _lift(other, self), self)

    def __mul__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.MUL, self, _lift(other, self))

    def __rmul__(self, other: "TensorLike") -> "Tensor":
        return ew_apply(EwOp.MUL, _lift(other, self), self)

    def __neg__(self) -> "Tensor":
        return ew_apply(EwOp.NEGATE, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def abs(self) -> "Tensor":
        return ew_apply(EwOp.ABS, self)

    def relu(self) -> "Tensor":
        return ew_apply(EwOp.RELU, self)

    def sigmoid(self) -> "Tensor":
        return ew_apply(EwOp.SIGMOID, self)

    def mean(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return reduce_mean(self, list(range(self.ndim)) if axes is None else axes)

    def sum(self, axes: Optional[Sequence[int]] = None) -> "Tensor":
        return reduce_sum(self, list(range(self.ndim)) if axes is None else axes)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


TensorLike = Union[Tensor, float, int]


def _lift(value: TensorLike, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=like.dtype))


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output_id: int
    backward: BackwardFn


class Tape:
    """An ordered record of the differentiable operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._positions: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or (
            tensor.node_id is not None and tensor.node_id in self._positions
        )

    def record(
        self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn
    ) -> None:
        node_id = next(_NODE_IDS)
        output.node_id = node_id
        self._positions[node_id] = len(self.nodes)
        self.nodes.append(TapeNode(op, tuple(inputs), node_id, backward))

    def is_final(self, tensor: Tensor) -> bool:
        return (
            tensor.node_id is not None
            and self._positions.get(tensor.node_id) == len(self.nodes) - 1
        )

    def clear(self) -> None:
        self.nodes = []
        self._positions = {}

    @contextlib.contextmanager
    def recording(self) -> Iterator["Tape"]:
        with _ACTIVE_TAPE.open(self):
            yield self


_ACTIVE_TAPE: DynamicScopeVar[Tape] = DynamicScopeVar(Tape, "tape")


class KinkMonitor:
    """
    Collects the branch taken by every piecewise-linear operation.

    Two evaluations of the same function that produce identical branch
    patterns are smooth along the segment between their inputs.
    """

    def __init__(self) -> None:
        self.patterns: List[Tuple[str, np.ndarray]] = []

    def observe(self, op: str, branches: np.ndarray) -> None:
        self.patterns.append((op, np.array(branches, dtype=np.int8)))

    def same_branches(self, other: "KinkMonitor") -> bool:
        if len(self.patterns) != len(other.patterns):
            return False
        return all(
            op1 == op2 and np.array_equal(b1, b2)
            for (op1, b1), (op2, b2) in zip(self.patterns, other.patterns)
        )


_KINK_MONITOR: DynamicScopeVar[KinkMonitor] = DynamicScopeVar(KinkMonitor, "kinks")


@contextlib.contextmanager
def monitoring_kinks() -> Iterator[KinkMonitor]:
    monitor = KinkMonitor()
    with _KINK_MONITOR.open(monitor):
        yield monitor


def apply_op(
    op: str,
    values: np.ndarray,
    inputs: Sequence[Tensor],
    backward: BackwardFn,
    branches: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Wrap the result of a primitive and record it on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    Piecewise-linear primitives pass their ``branches`` so kink monitors can
    see them.
    """
    if _CHECK_FINITE and not np.all(np.isfinite(values)):
        if all(np.all(np.isfinite(t.values)) for t in inputs):
            raise ContractError(f"{op} produced non-finite values from finite inputs")
    out = Tensor._wrap(values)
    tape = _ACTIVE_TAPE.get_if_in_scope()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(op, inputs, out, backward)
    if branches is not None:
        monitor = _KINK_MONITOR.get_if_in_scope()
        if monitor is not None:
            monitor.observe(op, branches)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """
    Populate ``grad`` on every trainable leaf recorded on the tape.

    Leaves the loss does not depend on receive zero gradients. Gradients are
    assigned, not accumulated, and the tape is cleared afterwards.

    pre: loss is a scalar and the final node of the tape
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")
    if not tape.is_final(loss):
        raise ContractError("the loss must be the final operation recorded on the tape")
    pending: Dict[int, np.ndarray] = {
        loss.node_id: np.ones_like(loss.values)  # type: ignore
    }
    leaves: Dict[int, Tensor] = {}
    leaf_grads: Dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        grad = pending.pop(node.output_id, None)
        for inp in node.inputs:
            if inp.requires_grad and inp.node_id is None:
                leaves.setdefault(id(inp), inp)
        if grad is None:
            continue
        for inp, inp_grad in zip(node.inputs, node.backward(grad)):
            if inp_grad is None:
                continue
            if inp.node_id is not None and inp.node_id in tape._positions:
                key = inp.node_id
                acc = pending.get(key)
                pending[key] = inp_grad if acc is None else acc + inp_grad
            elif inp.requires_grad:
                key = id(inp)
                acc = leaf_grads.get(key)
                leaf_grads[key] = inp_grad if acc is None else acc + inp_grad
    for key, leaf in leaves.items():
        grad = leaf_grads.get(key)
        if grad is None:
            grad = np.zeros_like(leaf.values)
        leaf.grad = np.array(grad, dtype=leaf.dtype).reshape(leaf.shape)
    tape.clear()


class EwOp(enum.Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    ABS = "abs"
    RELU = "relu"
    SIGMOID = "sigmoid"
    NEGATE = "negate"


_BINARY_OPS = frozenset({EwOp.ADD, EwOp.SUB, EwOp.MUL})


def broadcast_shape(a_shape: Shape, b_shape: Shape) -> Shape:
    """
    Shape of an elementwise result, allowing one operand to broadcast.

    The smaller operand, left-padded with ones, must have each extent either 1
    or equal to the larger one's. This covers scalars and per-channel vectors
    such as ``[batch, channels, 1]`` against ``[batch, channels, width]``.
    """
    if a_shape == b_shape:
        return a_shape
    for big, small in ((a_shape, b_shape), (b_shape, a_shape)):
        if len(small) > len(big):
            continue
        padded = (1,) * (len(big) - len(small)) + tuple(small)
        if all(s == 1 or s == b for s, b in zip(padded, big)):
            return tuple(big)
    raise DimensionError(
        f"shapes {list(a_shape)} and {list(b_shape)} are not broadcast-compatible"
    )


def unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ew_apply(op: Union[EwOp, str], a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """
    Apply an elementwise operation.

    >>> ew_apply("add", Tensor([1, 2]), Tensor([3, 4])).values.tolist()
    [4.0, 6.0]
    """
    op = EwOp(op)
    if op in _BINARY_OPS:
        if b is None:
            raise ContractError(f"{op.value} needs two operands")
        broadcast_shape(a.shape, b.shape)
        av, bv = a.values, b.values
        a_shape, b_shape = a.shape, b.shape
        if op is EwOp.ADD:
            return apply_op(
                "add",
                av + bv,
                (a, b),
                lambda g: (unbroadcast(g, a_shape), unbroadcast(g, b_shape)),
            )
        if op is EwOp.SUB:
            return apply_op(
                "sub",
                av - bv,
                (a, b),
                lambda g: (unbroadcast(g, a_shape), unbroadcast(-g, b_shape)),
            )
        return apply_op(
            "mul",
            av * bv,
            (a, b),
            lambda g: (unbroadcast(g * bv, a_shape), unbroadcast(g * av, b_shape)),
        )
    if b is not None:
        raise ContractError(f"{op.value} takes a single operand")
    av = a.values
    if op is EwOp.ABS:
        sign = np.sign(av)
        return apply_op("abs", np.abs(av), (a,), lambda g: (g * sign,), branches=sign)
    if op is EwOp.RELU:
        gate = av > 0
        return apply_op(
            "relu", np.where(gate, av, 0.0).astype(av.dtype), (a,),
            lambda g: (g * gate,), branches=gate,
        )
    if op is EwOp.SIGMOID:
        s = _sigmoid(av)
        return apply_op("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))
    return apply_op("negate", -av, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(
            f"matmul needs rank-2 operands, got {list(a.shape)} and {list(b.shape)}"
        )
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {list(a.shape)} x {list(b.shape)}"
        )
    av, bv = a.values, b.values
    return apply_op("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _normalize_axes(t: Tensor, axes: Sequence[int]) -> Tuple[int, ...]:
    if len(axes) == 0:
        raise DimensionError("at least one axis must be reduced")
    normalized = []
    for axis in axes:
        if not -t.ndim <= axis < t.ndim:
            raise DimensionError(f"axis {axis} is invalid for shape {list(t.shape)}")
        normalized.append(axis % t.ndim)
    if len(set(normalized)) != len(normalized):
        raise DimensionError(f"axes {list(axes)} are not distinct")
    return tuple(sorted(normalized))


def reduce_mean(t: Tensor, axes: Sequence[int]) -> Tensor:
    """Mean over ``axes``, removing them; the gradient spreads 1/N uniformly."""
    axes_t = _normalize_axes(t, axes)
    count = int(np.prod([t.shape[a] for a in axes_t]))
    in_shape = t.shape
    kept = tuple(1 if i in axes_t else n for i, n in enumerate(in_shape))

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g.reshape(kept) / count, in_shape).copy(),)

    return apply_op("reduce_mean", t.values.mean(axis=axes_t), (t,), backward_fn)


def reduce_sum(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes_t = _normalize_axes(t, axes)
    in_shape = t.shape
    kept = tuple(1 if i in axes_t else n for i, n in enumerate(in_shape))
    return apply_op(
        "reduce_sum",
        t.values.sum(axis=axes_t),
        (t,),
        lambda g: (np.broadcast_to(g.reshape(kept), in_shape).copy(),),
    )


def reshape(t: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(n) for n in shape)
    if int(np.prod(shape)) != t.size:
        raise DimensionError(f"cannot reshape {list(t.shape)} into {list(shape)}")
    in_shape = t.shape
    return apply_op(
        "reshape", t.values.reshape(shape), (t,), lambda g: (g.reshape(in_shape),)
    )


def transpose(t: Tensor) -> Tensor:
    if t.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 tensor, got {list(t.shape)}")
    return apply_op("transpose", t.values.T, (t,), lambda g: (g.T,))
