"""Reference networks used by the trainer, the examples and the tests."""

from __future__ import annotations

from . import functions as F
from . import parametric as PF
from .graph import Variable
from .parameters import ParameterScope

__all__ = ["lenet", "mlp"]


def lenet(x: Variable, n_classes: int = 10, params: ParameterScope | None = None) -> Variable:
    """The classic two-conv stack: 16-map 5x5 convolutions with 2x2 max
    pooling and ReLU, then 50-unit and n_classes-unit affine layers.

    From (B,1,28,28) the shapes run (B,16,24,24) -> (B,16,12,12) ->
    (B,16,8,8) -> (B,16,4,4) -> (B,50) -> (B,n_classes).

    With params=None the layers name themselves in the ambient registry
    (builder style); passing a registry handle selects the explicit style.
    Both produce identical graphs and parameter names.
    """

    def where(layer: str) -> dict:
        if params is None:
            return {"name": layer}
        return {"params": params[layer]}

    h = PF.convolution(x, 16, (5, 5), **where("conv1"))
    h = F.max_pooling(h, (2, 2))
    h = F.relu(h, inplace=False)
    h = PF.convolution(h, 16, (5, 5), **where("conv2"))
    h = F.max_pooling(h, (2, 2))
    h = F.relu(h, inplace=False)
    h = PF.affine(h, 50, **where("affine3"))
    h = F.relu(h, inplace=False)
    h = PF.affine(h, n_classes, **where("affine4"))
    return h


def mlp(x: Variable, n_classes: int, hidden: tuple[int, ...] = (32,),
        params: ParameterScope | None = None) -> Variable:
    """Fully connected classifier: affine+ReLU per hidden width, affine out."""

    def where(layer: str) -> dict:
        if params is None:
            return {"name": layer}
        return {"params": params[layer]}

    h = x
    for i, width in enumerate(hidden):
        h = PF.affine(h, width, **where(f"fc{i + 1}"))
        h = F.relu(h, inplace=False)
    return PF.affine(h, n_classes, **where("out"))
