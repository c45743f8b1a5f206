"""The globally accessible dictionary of trainable variables.

Parameters are created on first use by their fully scoped name
("conv1/W", "block/conv2/b", ...) and fetched on every later request, so
network-building code never pre-declares weights. The active registry is
thread-local: tests and worker replicas can run against isolated
registries while user code keeps the convenient module-level entry
points.

Initialization is deterministic under the registry seed: weight draws
consume the registry's counter-based stream in creation order, so
rebuilding the same network against a cleared registry reproduces every
tensor bit for bit.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from .errors import ShapeConflict
from .graph import Variable
from .tensor import Dtype, RngState

__all__ = [
    "ParameterRegistry",
    "ParameterScope",
    "default_initializer",
    "current_registry",
    "registry_scope",
    "get_parameters",
    "parameter_scope",
    "clear_parameters",
]


def default_initializer(kind: str, shape: tuple, rng: RngState) -> np.ndarray:
    """Initial values by parameter leaf kind.

    Weights draw uniform(-L, L) with L = sqrt(6 / (fan_in + fan_out));
    biases, shifts and running means start at zero, scales and running
    variances at one.
    """
    if kind == "W":
        if len(shape) == 2:
            fan_in, fan_out = shape
        elif len(shape) == 4:
            receptive = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        else:
            fan_in = fan_out = int(np.prod(shape, dtype=np.int64))
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.next_uniform(shape, -limit, limit)
    if kind in ("gamma", "var"):
        return np.ones(shape, dtype=np.float32)
    return np.zeros(shape, dtype=np.float32)


class ParameterRegistry:
    """Ordered name -> Variable store with a scope stack and its own RNG."""

    def __init__(self, seed: int = 0):
        self.entries: dict[str, Variable] = {}
        self.scope_stack: list[str] = []
        self.rng = RngState(seed=seed)
        self.seed = seed

    def clear(self) -> None:
        """Drop all entries and restart the initialization stream."""
        self.entries.clear()
        self.scope_stack.clear()
        self.rng = RngState(seed=self.seed)

    def scoped_name(self, name: str) -> str:
        return "/".join(self.scope_stack + [name])

    @contextmanager
    def parameter_scope(self, name: str):
        """Push a scope segment; exits restore the stack even on error."""
        self.scope_stack.append(name)
        try:
            yield self
        finally:
            self.scope_stack.pop()

    def auto_name(self, base: str) -> str:
        """First unused scope name in the series base, base_1, base_2, ..."""
        candidate = base
        i = 0
        while any(full.startswith(self.scoped_name(candidate) + "/") for full in self.entries):
            i += 1
            candidate = f"{base}_{i}"
        return candidate

    def get_or_create(self, name: str, shape, initializer=None,
                      need_grad: bool = True, dtype: Dtype | None = None) -> Variable:
        """Fetch the variable registered under the scoped name, creating,
        initializing and registering it on first use.

        initializer may be None (use default_initializer keyed by the leaf
        name), a scalar fill value, an array of values, or a callable
        (rng, shape) -> array.
        """
        if not name:
            raise ShapeConflict("parameter name must be nonempty")
        full = self.scoped_name(name)
        shape = tuple(int(d) for d in shape)
        existing = self.entries.get(full)
        if existing is not None:
            if existing.shape != shape:
                raise ShapeConflict(
                    f"parameter {full!r} exists with shape {existing.shape}, requested {shape}")
            return existing
        if initializer is None:
            values = default_initializer(full.rsplit("/", 1)[-1], shape, self.rng)
        elif callable(initializer):
            values = initializer(self.rng, shape)
        elif np.isscalar(initializer):
            values = np.full(shape, initializer, dtype=np.float32)
        else:
            values = np.asarray(initializer, dtype=np.float32)
        var = Variable(shape, need_grad=need_grad, dtype=dtype, name=full)
        var.d = values
        var.persistent = True
        self.entries[full] = var
        return var

    def get_parameters(self, grad_only: bool = True) -> dict[str, Variable]:
        """Snapshot view in creation order."""
        return {name: v for name, v in self.entries.items() if v.need_grad or not grad_only}

    def __getitem__(self, name: str) -> "ParameterScope":
        """Explicit-handle front end: registry["conv1"] names a sub-scope."""
        return ParameterScope(self, (name,))

    def __len__(self) -> int:
        return len(self.entries)


class ParameterScope:
    """A (registry, absolute path) handle, the explicit alternative to the
    ambient scope stack. Indexing extends the path."""

    def __init__(self, registry: ParameterRegistry, path: tuple[str, ...]):
        self.registry = registry
        self.path = path

    def __getitem__(self, name: str) -> "ParameterScope":
        return ParameterScope(self.registry, self.path + (name,))

    def get_or_create(self, leaf: str, shape, initializer=None,
                      need_grad: bool = True, dtype: Dtype | None = None) -> Variable:
        full = "/".join(self.path + (leaf,))
        saved, self.registry.scope_stack = self.registry.scope_stack, []
        try:
            return self.registry.get_or_create(full, shape, initializer, need_grad, dtype)
        finally:
            self.registry.scope_stack = saved


# --- ambient registry --------------------------------------------------------

_local = threading.local()
_process_registry = ParameterRegistry()


def current_registry() -> ParameterRegistry:
    return getattr(_local, "registry", _process_registry)


@contextmanager
def registry_scope(registry: ParameterRegistry):
    """Bind an isolated registry for this thread."""
    prev = getattr(_local, "registry", None)
    _local.registry = registry
    try:
        yield registry
    finally:
        if prev is None:
            del _local.registry
        else:
            _local.registry = prev


def get_parameters(grad_only: bool = True) -> dict[str, Variable]:
    """All trainable parameters of the active registry, in creation order."""
    return current_registry().get_parameters(grad_only)


def parameter_scope(name: str):
    """Scope segment on the active registry: names resolve as outer/inner/leaf."""
    return current_registry().parameter_scope(name)


def clear_parameters() -> None:
    current_registry().clear()
