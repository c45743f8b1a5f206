"""Mixed precision: binary16 storage, float32 masters, loss scaling.

Under the Half policy every activation, weight and gradient buffer is
quantized to the binary16 grid on write, while dot products, reductions
and the solver update run in float32. Gradients smaller than 2^-24 flush
to zero in storage; scaling the backward seed keeps them alive, and the
solver divides the scale back out before updating the float32 masters.
"""

import numpy as np

import nanonnl as nn
from nanonnl import functions as F
from nanonnl.solver import DynamicLossScaler, SgdSolver, dynamic_step, static_scaling_step
from nanonnl.tensor import Dtype

HALF = nn.ExecutionContext(type_config=nn.TypeConfig.HALF)

print("== binary16 storage ==")
with nn.context_scope(HALF):
    v = nn.Variable((3,))
    v.d = [1.0, 1.0 + 2.0**-13, 70000.0]
    print("written [1, 1+2^-13, 7e4] ->", v.d, "(quantized on write)")


def tiny_gradient_chain():
    """Backward through two 2^-13 weights: the intermediate gradient is
    2^-26 at seed 1 (flushes to zero) but 2^-23 at seed 8 (survives)."""

    def const(values):
        arr = np.asarray(values, dtype=np.float32)
        v = nn.Variable(arr.shape, dtype=Dtype.F16)
        v.d = arr
        return v

    with nn.context_scope(HALF):
        x = const(np.full((8, 1), 1024.0))
        w1 = nn.Variable((1, 1), need_grad=True, dtype=Dtype.F16)
        w1.d = [[1.0]]
        h = F.affine(x, w1, const([0.0]))
        h = F.affine(h, const([[2.0**-13]]), const([0.0]))
        y = F.affine(h, const([[2.0**-13]]), const([0.0]))
    return y, w1, SgdSolver(lr=8.0).setup({"w1": w1})


print("\n== static loss scaling ==")
y, w1, solver = tiny_gradient_chain()
for _ in range(10):
    y.forward()
    y.backward()  # seed 1: gradient underflows f16 on the way down
    solver.update()
print("unscaled half run, 10 steps: w1 =", float(w1.d[0, 0]), "(stalled)")

y, w1, solver = tiny_gradient_chain()
for _ in range(10):
    y.forward()
    static_scaling_step(y, solver, loss_scale=8.0)
print("loss_scale=8 run,  10 steps: w1 =", float(w1.d[0, 0]), "(moving)")

print("\n== dynamic loss scaling ==")
w = nn.Variable((1,), need_grad=True)
w.d = [1.0]
solver = SgdSolver(lr=0.1).setup({"w": w})
scaler = DynamicLossScaler(loss_scale=8.0, scaling_factor=2.0, interval=2)
for step in range(6):
    w.g = [np.inf] if step == 0 else [0.01]
    outcome = dynamic_step(scaler, solver)
    print(f"step {step}: applied={outcome.applied} "
          f"loss_scale={outcome.loss_scale_after} ({outcome.reason})")
