"""nanonnl: a desk-scale neural network library.

Reverse-mode autodiff over static and dynamic computation graphs, a
globally scoped parameter registry, mixed-precision training with
(dynamic) loss scaling on emulated binary16 storage, simulated
data-parallel all-reduce training, and a bit-exact model container with
converter tooling.
"""

from . import functions  # noqa: F401
from . import parametric  # noqa: F401
from .graph import (
    ExecutionContext,
    Mode,
    TypeConfig,
    Variable,
    context_scope,
    get_default_context,
    set_default_context,
)
from .parameters import (
    ParameterRegistry,
    clear_parameters,
    get_parameters,
    parameter_scope,
    registry_scope,
)
from .solver import DynamicLossScaler, SgdSolver, StepOutcome, dynamic_step, static_scaling_step
from .tensor import Dtype, NdArray, RngState, quantize_f16

__version__ = "0.1.0"

__all__ = [
    "ExecutionContext",
    "Mode",
    "TypeConfig",
    "Variable",
    "context_scope",
    "get_default_context",
    "set_default_context",
    "ParameterRegistry",
    "clear_parameters",
    "get_parameters",
    "parameter_scope",
    "registry_scope",
    "DynamicLossScaler",
    "SgdSolver",
    "StepOutcome",
    "dynamic_step",
    "static_scaling_step",
    "Dtype",
    "NdArray",
    "RngState",
    "quantize_f16",
    "functions",
    "parametric",
    "__version__",
]
