"""SGD updates with float32 master weights and loss-scale machinery.

The solver always keeps an authoritative float32 master copy of every
weight and applies updates there; the visible parameter array is rewritten
from the master after each step. Under the half-precision storage policy
that rewrite quantizes, so masters can accumulate deltas far below the
half resolution while the working copy stays on the binary16 grid.

Loss scaling comes in two flavours: a fixed-scale composition helper, and
a dynamic scaler that halves the scale (and skips the step) whenever a
gradient overflows to inf/NaN, and doubles it again after a configured
run of clean steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyParameterSet, NotSetup
from .graph import Variable
from .tensor import has_inf_or_nan

__all__ = [
    "SgdSolver",
    "DynamicLossScaler",
    "StepOutcome",
    "dynamic_step",
    "static_scaling_step",
]


@dataclass
class _Slot:
    param: Variable
    master: np.ndarray  # float32, authoritative values


@dataclass
class StepOutcome:
    """What a dynamic-scaling step did, for logs and tests."""

    applied: bool
    loss_scale_after: float
    reason: str  # "Applied" or "SkippedInfNan"


@dataclass
class DynamicLossScaler:
    """Adaptive loss-scale state; defaults follow the standard recipe."""

    loss_scale: float = 8.0
    scaling_factor: float = 2.0
    interval: int = 2000
    counter: int = 0

    def __post_init__(self):
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must stay positive")
        if self.scaling_factor <= 1:
            raise ValueError("scaling_factor must exceed 1")
        if self.interval < 1:
            raise ValueError("interval must be >= 1")


class SgdSolver:
    """Plain SGD: w <- w - lr * g, computed on float32 masters.

    An optional global-norm clip (off by default) is applied by the step
    helpers right after gradients are unscaled.
    """

    def __init__(self, lr: float, clip_norm: float | None = None):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.clip_norm = clip_norm
        self.slots: dict[str, _Slot] | None = None

    def setup(self, params: dict[str, Variable]) -> "SgdSolver":
        """Create update slots; replaces any previous setup."""
        items = list(params.items())
        if not items:
            raise EmptyParameterSet("solver needs at least one parameter")
        for name, v in items:
            if not v.need_grad:
                raise ValueError(f"parameter {name!r} is frozen (need_grad=False)")
        self.slots = {
            name: _Slot(param=v, master=v.d.astype(np.float32, copy=True))
            for name, v in items
        }
        return self

    def _require_setup(self) -> dict[str, _Slot]:
        if self.slots is None:
            raise NotSetup("call setup() before using the solver")
        return self.slots

    def update(self) -> None:
        """master <- master - lr * grad; working copy rewritten from master."""
        for slot in self._require_setup().values():
            slot.master -= np.float32(self.lr) * slot.param.grad.values
            slot.param.data.write(slot.master)

    def scale_grad(self, factor: float) -> None:
        """Multiply every slot gradient by factor (float32 math)."""
        for slot in self._require_setup().values():
            slot.param.grad.write(slot.param.grad.values * np.float32(factor))

    def zero_grad(self) -> None:
        for slot in self._require_setup().values():
            slot.param.grad.fill(0.0)

    def check_inf_or_nan_grad(self) -> bool:
        """True iff any slot gradient contains inf or NaN."""
        return any(has_inf_or_nan(slot.param.grad) for slot in self._require_setup().values())

    def clip_grad_by_norm(self) -> None:
        """Scale all gradients down so their global L2 norm is <= clip_norm."""
        if self.clip_norm is None:
            return
        slots = self._require_setup()
        total = np.sqrt(np.float32(sum(
            float(np.sum(np.square(s.param.grad.values, dtype=np.float32)))
            for s in slots.values()
        )))
        if total > self.clip_norm:
            self.scale_grad(self.clip_norm / float(total))


def dynamic_step(scaler: DynamicLossScaler, solver: SgdSolver) -> StepOutcome:
    """One adaptive-scale step; call after backward(grad_seed=scaler.loss_scale).

    On an overflowed gradient the update is skipped and the scale is
    halved; on a clean step gradients are unscaled, weights updated, and
    after a full interval of clean steps the scale doubles. The counter
    bookkeeping deliberately checks `counter > interval` before the
    unconditional increment, so with interval=N the first doubling lands
    on clean step N+2.
    """
    if solver.check_inf_or_nan_grad():
        scaler.loss_scale /= scaler.scaling_factor
        scaler.counter = 0
        return StepOutcome(applied=False, loss_scale_after=scaler.loss_scale,
                           reason="SkippedInfNan")
    solver.scale_grad(1.0 / scaler.loss_scale)
    solver.clip_grad_by_norm()
    solver.update()
    if scaler.counter > scaler.interval:
        scaler.loss_scale *= scaler.scaling_factor
        scaler.counter = 0
    scaler.counter += 1
    assert scaler.loss_scale > 0
    return StepOutcome(applied=True, loss_scale_after=scaler.loss_scale, reason="Applied")


def static_scaling_step(loss: Variable, solver: SgdSolver, loss_scale: float = 8.0) -> None:
    """Fixed-scale composition: backward(loss_scale), unscale, update."""
    solver._require_setup()
    loss.backward(grad_seed=loss_scale)
    solver.scale_grad(1.0 / loss_scale)
    solver.clip_grad_by_norm()
    solver.update()
