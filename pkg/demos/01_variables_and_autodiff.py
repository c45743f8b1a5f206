"""Variables, functions and parametric functions.

Build a one-layer network, push data through it, and read gradients back
out. Trainable parameters are created on first use and land in a global
dictionary keyed by scoped names.
"""

import numpy as np

import nanonnl as nn
from nanonnl import parametric as PF

# define the input variable and the computation graph
x = nn.Variable((16, 10), need_grad=True)
y = PF.affine(x, 5)

# compute the output for some random input
x.d = np.random.default_rng(0).random(x.shape)
y.forward()
print("output shape:", y.shape)
print("first row:", y.d[0])

# compute gradients with respect to the input and the parameters
y.backward()
print("input grad shape:", x.g.shape)

# every trainable parameter the layers created, in creation order
for name, param in nn.get_parameters().items():
    print(f"{name}: shape={param.shape} grad_norm={np.abs(param.g).sum():.4f}")

nn.clear_parameters()
