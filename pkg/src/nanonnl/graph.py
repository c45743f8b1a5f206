"""Computation graph construction and reverse-mode differentiation.

Two execution styles over one graph representation:

* static (define-then-run): apply() only records nodes and validates
  shapes; numeric work happens when forward() is called on an output.
* dynamic (define-by-run): apply() additionally executes the new node
  immediately, so outputs are populated as the graph is written down.

Either way every node keeps a creation sequence number, and both forward
and backward visit nodes in that order (reversed for backward). Creation
order is always a valid topological order, which makes the two modes
bit-identical and runs reproducible.

The active ExecutionContext is thread-local: worker threads can train
replicas under their own context without interfering with each other.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import (
    CycleDetected,
    ForwardNotRun,
    UninitializedInput,
    UnknownFunction,
)
from .tensor import Dtype, NdArray

__all__ = [
    "Mode",
    "TypeConfig",
    "ExecutionContext",
    "Variable",
    "FunctionNode",
    "apply",
    "forward",
    "backward",
    "set_default_context",
    "get_default_context",
    "context_scope",
]


class Mode(Enum):
    STATIC = "Static"
    DYNAMIC = "Dynamic"


class TypeConfig(Enum):
    FLOAT = "Float"
    HALF = "Half"


@dataclass(frozen=True)
class ExecutionContext:
    """Execution policy picked up by apply() at node-creation time."""

    mode: Mode = Mode.STATIC
    type_config: TypeConfig = TypeConfig.FLOAT
    device: str = "Host"

    @property
    def storage_dtype(self) -> Dtype:
        return Dtype.F16 if self.type_config is TypeConfig.HALF else Dtype.F32


_state = threading.local()
_process_default = ExecutionContext()


def get_default_context() -> ExecutionContext:
    return getattr(_state, "ctx", _process_default)


def set_default_context(ctx: ExecutionContext) -> None:
    """Install ctx for this thread; affects subsequently applied functions only."""
    _state.ctx = ctx


class context_scope:
    """Temporarily switch the default context (restores on exit)."""

    def __init__(self, ctx: ExecutionContext):
        self._ctx = ctx

    def __enter__(self):
        self._prev = get_default_context()
        set_default_context(self._ctx)
        return self._ctx

    def __exit__(self, *exc):
        set_default_context(self._prev)
        return False


_node_seq = itertools.count()


class Variable:
    """A data array paired with a same-shaped gradient array.

    Leaf variables are created by the user (or the parameter registry);
    interior ones are produced by exactly one FunctionNode, referenced by
    `parent`.
    """

    __slots__ = ("data", "grad", "need_grad", "parent", "name", "persistent", "_consumers")

    def __init__(self, shape, need_grad: bool = False, dtype: Dtype | None = None, name: str | None = None):
        if dtype is None:
            dtype = get_default_context().storage_dtype
        self.data = NdArray(shape, dtype)
        self.grad = NdArray(shape, dtype)
        self.need_grad = need_grad
        self.parent: FunctionNode | None = None
        self.name = name
        self.persistent = False
        self._consumers: list[FunctionNode] = []
        # a fresh leaf carries no values until the user assigns some
        self.data.release()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> Dtype:
        return self.data.dtype

    @property
    def d(self) -> np.ndarray:
        """Data values as a numpy view."""
        if not self.data.is_set:
            raise UninitializedInput(f"variable {self.name or self.shape} has no data")
        return self.data.values

    @d.setter
    def d(self, values) -> None:
        self.data.write(np.broadcast_to(np.asarray(values, dtype=np.float32), self.shape))

    @property
    def g(self) -> np.ndarray:
        """Gradient values as a numpy view."""
        return self.grad.values

    @g.setter
    def g(self, values) -> None:
        self.grad.write(np.broadcast_to(np.asarray(values, dtype=np.float32), self.shape))

    def forward(self, clear_buffer: bool = False) -> None:
        forward(self, clear_buffer=clear_buffer)

    def backward(self, grad_seed: float = 1.0, clear_buffer: bool = False) -> None:
        backward(self, grad_seed=grad_seed, clear_buffer=clear_buffer)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, dtype={self.dtype.value}, need_grad={self.need_grad})"


class FunctionNode:
    """One applied function instance linking input variables to outputs."""

    __slots__ = ("kind", "impl", "inputs", "outputs", "seq", "ctx", "state", "fwd_done")

    def __init__(self, kind: str, impl, inputs, outputs, ctx: ExecutionContext):
        self.kind = kind
        self.impl = impl
        self.inputs = list(inputs)
        self.outputs = list(outputs)
        self.seq = next(_node_seq)
        self.ctx = ctx
        self.state: dict = {}
        self.fwd_done = False

    @property
    def args(self) -> dict:
        """The kind-specific attribute record (kernel, stride, pad, ...)."""
        return self.impl.args_dict()

    def __repr__(self):
        return f"FunctionNode({self.kind}, seq={self.seq})"


def apply(kind: str, inputs, args: dict | None = None) -> list[Variable]:
    """Create a FunctionNode of `kind` over `inputs` and return its outputs.

    Shapes are validated eagerly in both modes; in dynamic mode the node's
    forward also runs immediately.
    """
    from . import functions  # deferred: functions imports this module

    impl_cls = functions.REGISTRY.get(kind)
    if impl_cls is None:
        raise UnknownFunction(f"no function kind {kind!r}")
    impl = impl_cls(**(args or {}))

    inputs = list(inputs)
    in_shapes = [v.shape for v in inputs]
    out_shapes = impl.infer_shapes(in_shapes)

    ctx = get_default_context()
    outputs = []
    need = any(v.need_grad for v in inputs)
    for shape in out_shapes:
        out = Variable(shape, need_grad=need, dtype=impl.output_dtype(ctx))
        outputs.append(out)
    node = FunctionNode(kind, impl, inputs, outputs, ctx)
    for out in outputs:
        out.parent = node
    for v in inputs:
        v._consumers.append(node)

    if ctx.mode is Mode.DYNAMIC:
        _execute_node(node)
    return outputs


def _execute_node(node: FunctionNode) -> None:
    arrays = []
    for v in node.inputs:
        if not v.data.is_set:
            raise UninitializedInput(
                f"input {v.name or v.shape} of {node.kind} read before being written"
            )
        arrays.append(v.data.values)
    results = node.impl.forward(node, arrays)
    for out, res in zip(node.outputs, results):
        out.data.write(res)
    node.fwd_done = True


def _ancestors(root: Variable) -> list[FunctionNode]:
    """All nodes the root depends on, sorted by creation sequence."""
    nodes: list[FunctionNode] = []
    seen: set[int] = set()
    in_progress: set[int] = set()
    stack: list[tuple[FunctionNode, bool]] = []
    if root.parent is not None:
        stack.append((root.parent, False))
    while stack:
        node, expanded = stack.pop()
        if expanded:
            in_progress.discard(id(node))
            nodes.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        in_progress.add(id(node))
        stack.append((node, True))
        for v in node.inputs:
            parent = v.parent
            if parent is None:
                continue
            if id(parent) in in_progress:
                raise CycleDetected(f"cycle through {parent.kind}")
            if id(parent) not in seen:
                stack.append((parent, False))
    nodes.sort(key=lambda n: n.seq)
    return nodes


def forward(root: Variable, clear_buffer: bool = False) -> None:
    """Execute all ancestors of root in creation order, populating root.data.

    With clear_buffer=True, intermediate activations that no remaining
    forward step and no backward implementation will read are released.
    Parameters, leaves, persistent variables and root itself are kept.
    """
    nodes = _ancestors(root)
    if not nodes:
        if not root.data.is_set:
            raise UninitializedInput("forward on a leaf with no data")
        return

    executed: set[int] = set()
    node_set = {id(n) for n in nodes}
    for node in nodes:
        _execute_node(node)
        executed.add(id(node))
        if clear_buffer:
            _release_done_activations(node, executed, node_set, root)


def _release_done_activations(node, executed, node_set, root) -> None:
    for v in node.inputs:
        if v.parent is None or v.persistent or v is root or not v.data.is_set:
            continue
        if any(id(c) not in node_set for c in v._consumers):
            continue  # consumed by another graph head; keep
        if not all(id(c) in executed for c in v._consumers):
            continue
        reads = any(
            c.impl.backward_reads_input(i)
            for c in v._consumers
            for i, u in enumerate(c.inputs)
            if u is v
        )
        if not reads:
            v.data.release()


def backward(root: Variable, grad_seed: float = 1.0, clear_buffer: bool = False) -> None:
    """Reverse-mode pass from root.

    Seeds root.grad with grad_seed (uniform fill over root's shape), zeroes
    the gradients of every other reachable variable that participates, then
    accumulates in reverse creation order. Gradients are reset on every
    call, never carried over between calls.
    """
    nodes = _ancestors(root)
    for node in nodes:
        if not node.fwd_done:
            raise ForwardNotRun(f"{node.kind} node has not run forward")
    if root.parent is not None and not root.data.is_set:
        raise ForwardNotRun("root has no forward value")

    # which variables take part in gradient propagation: need_grad leaves,
    # plus everything downstream of one
    active: set[int] = set()
    by_id: dict[int, Variable] = {}
    for node in nodes:
        node_active = False
        for v in node.inputs:
            if v.parent is None and v.need_grad and id(v) not in active:
                active.add(id(v))
                by_id[id(v)] = v
            if id(v) in active:
                node_active = True
        if node_active:
            for out in node.outputs:
                active.add(id(out))
                by_id[id(out)] = out

    # reset pass: seed the root, zero everyone else
    for v in by_id.values():
        if v is not root:
            v.grad.fill(0.0)
    root.grad.fill(grad_seed)
    if id(root) not in active:
        # root itself may be a need_grad leaf or grad-less graph tip
        active.add(id(root))
        by_id[id(root)] = root

    for node in reversed(nodes):
        if not any(id(out) in active for out in node.outputs):
            continue
        gys = [out.grad.values for out in node.outputs]
        want = [id(v) in active for v in node.inputs]
        if not any(want):
            continue
        gxs = node.impl.backward(node, gys, want)
        for v, gx in zip(node.inputs, gxs):
            if gx is not None and id(v) in active:
                v.grad.accumulate(gx)
        if clear_buffer:
            for out in node.outputs:
                if out is not root and not out.persistent:
                    out.grad.release()
