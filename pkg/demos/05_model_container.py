"""The NNP model container: save, load, validate, query, normalize.

A model archive is a deterministic ZIP of three members: a version
stamp, a line-oriented network description, and a binary parameter
block (with genuine 16-bit words for half-precision tensors). Saving the
same model twice gives identical bytes, and loading rebuilds a graph
whose forward output matches the original bit for bit.
"""

import tempfile
import zipfile
from pathlib import Path

import nanonnl as nn
from nanonnl import nnp
from nanonnl.networks import lenet
from nanonnl.tensor import RngState

workdir = Path(tempfile.mkdtemp())

registry = nn.ParameterRegistry(seed=5)
with nn.registry_scope(registry):
    x = nn.Variable((2, 1, 28, 28), name="x")
    y = lenet(x, n_classes=3)
    model = nnp.model_from_graph({"x": x}, {"y": y}, registry)
    x.d = RngState(seed=6).next_uniform((2, 1, 28, 28), 0, 1)
    y.forward()
    original = y.d.copy()

path = workdir / "lenet.nnp"
nnp.save_nnp(model, path)
print("saved", path, f"({path.stat().st_size} bytes)")
with zipfile.ZipFile(path) as z:
    print("members:", z.namelist())
    print("--- network.nntxt, first lines ---")
    for line in z.read("network.nntxt").decode().splitlines()[:14]:
        print(" ", line)

loaded = nnp.load_nnp(path)
print("validate:", nnp.validate(loaded) or "clean")
print("unsupported functions:", nnp.query_unsupported(loaded) or "none")

binding = nnp.build_executor(loaded)
(xin,) = binding.inputs.values()
(yout,) = binding.outputs.values()
xin.d = RngState(seed=6).next_uniform((2, 1, 28, 28), 0, 1)
yout.forward()
print("loaded forward bitwise equal:", bool((yout.d == original).all()))

# normalize repairs models: drop the executor and watch it come back
loaded.executors = []
fixed = nnp.normalize(loaded)
print("synthesized executor:", fixed.executors[0].name,
      "inputs:", fixed.executors[0].inputs, "outputs:", fixed.executors[0].outputs)
