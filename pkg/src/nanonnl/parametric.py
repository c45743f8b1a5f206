"""Layers with trainable parameters, fetched by scoped name on first use.

Two interchangeable front ends build identical graphs:

* builder style: pass name="conv1" (or nothing, to auto-name) and the
  parameters land in the ambient registry under the current scope;
* explicit style: pass params=registry["conv1"], mirroring front ends
  that hand a parameter directory into each call.

Both resolve to the same fully scoped names, draw from the same stream
in the same order, and therefore produce bit-identical networks.
"""

from __future__ import annotations

from . import functions as F
from .graph import Variable
from .parameters import ParameterScope, current_registry
from .tensor import Dtype

import numpy as np

__all__ = ["affine", "convolution", "batch_normalization"]


def _resolve_scope(base: str, name: str | None, params: ParameterScope | None) -> ParameterScope:
    if params is not None:
        return params
    registry = current_registry()
    return ParameterScope(
        registry,
        tuple(registry.scope_stack) + (name or registry.auto_name(base),),
    )


def affine(x: Variable, n_outmaps: int, name: str | None = None,
           params: ParameterScope | None = None) -> Variable:
    """y = x.W + b over the flattened non-batch axes of x."""
    scope = _resolve_scope("affine", name, params)
    fan_in = int(np.prod(x.shape[1:], dtype=np.int64))
    weight = scope.get_or_create("W", (fan_in, n_outmaps))
    bias = scope.get_or_create("b", (n_outmaps,))
    return F.affine(x, weight, bias)


def convolution(x: Variable, outmaps: int, kernel, stride=(1, 1), pad=(0, 0),
                name: str | None = None, params: ParameterScope | None = None) -> Variable:
    """2-D convolution with per-map bias over NCHW input."""
    scope = _resolve_scope("conv", name, params)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
    weight = scope.get_or_create("W", (outmaps, x.shape[1], kh, kw))
    bias = scope.get_or_create("b", (outmaps,))
    return F.convolution(x, weight, bias, stride=stride, pad=pad)


def batch_normalization(x: Variable, batch_stat: bool = True, eps: float = 1e-5,
                        momentum: float = 0.9, name: str | None = None,
                        params: ParameterScope | None = None) -> Variable:
    """Per-channel batch normalization.

    Scale/shift are trainable; the running statistics are registered
    frozen (need_grad=False). All four live in float32 regardless of the
    active precision policy.
    """
    scope = _resolve_scope("bn", name, params)
    c = x.shape[1]
    gamma = scope.get_or_create("gamma", (c,), dtype=Dtype.F32)
    beta = scope.get_or_create("beta", (c,), dtype=Dtype.F32)
    mean = scope.get_or_create("mean", (c,), need_grad=False, dtype=Dtype.F32)
    var = scope.get_or_create("var", (c,), need_grad=False, dtype=Dtype.F32)
    return F.batch_normalization(x, gamma, beta, mean, var,
                                 batch_stat=batch_stat, eps=eps, momentum=momentum)
