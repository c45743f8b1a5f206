"""Function library: shape inference, forward and backward for every layer.

Each kind is a small class with three responsibilities: validate input
shapes and compute output shapes (no data needed), run forward on raw
float32 arrays, and run backward given upstream gradients. The module
registry doubles as the vocabulary of the model container's text format,
so kind names and argument names here are a stable wire-level API.

Layout conventions: row-major, images NCHW, convolution is
cross-correlation (no kernel flip), affine flattens everything after the
batch axis. There is no implicit broadcasting between operands; the only
broadcasts are the documented per-row bias add and per-channel scales.
"""

from __future__ import annotations

import numpy as np

from .errors import (
    DegenerateBatch,
    KernelTooLarge,
    LabelOutOfRange,
    ShapeMismatch,
)
from .graph import ExecutionContext, Variable, apply
from .tensor import Dtype

__all__ = [
    "REGISTRY",
    "supported_kinds",
    "affine",
    "convolution",
    "max_pooling",
    "relu",
    "softmax_cross_entropy",
    "batch_normalization",
]


def _pair(value, name: str) -> tuple[int, int]:
    if isinstance(value, int):
        value = (value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 2:
        raise ShapeMismatch(f"{name} must be an int or a pair, got {value!r}")
    return value


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ShapeMismatch(message)


class FunctionImpl:
    """Base for all function kinds. Subclasses define KIND and ARGS."""

    KIND: str = ""
    # serializable argument schema, in canonical emission order:
    # name -> one of {"int", "float", "bool", "pair"}
    ARGS: dict[str, str] = {}

    def infer_shapes(self, in_shapes: list[tuple]) -> list[tuple]:
        raise NotImplementedError

    def output_dtype(self, ctx: ExecutionContext) -> Dtype:
        return ctx.storage_dtype

    def forward(self, node, xs: list[np.ndarray]) -> list[np.ndarray]:
        raise NotImplementedError

    def backward(self, node, gys: list[np.ndarray], want: list[bool]) -> list[np.ndarray | None]:
        raise NotImplementedError

    def backward_reads_input(self, index: int) -> bool:
        """Whether backward reads input[index].data (drives buffer clearing)."""
        return True

    def args_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.ARGS}


class Affine(FunctionImpl):
    """y = x.W + b with x flattened after the batch axis (base axis 1)."""

    KIND = "Affine"
    ARGS = {"out_features": "int"}

    def __init__(self, out_features: int = 0):
        self.out_features = int(out_features)

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 3, f"Affine takes x, W, b; got {len(in_shapes)} inputs")
        xs, ws, bs = in_shapes
        _require(len(xs) >= 2, f"Affine input must have a batch axis, got {xs}")
        fan_in = int(np.prod(xs[1:], dtype=np.int64))
        _require(len(ws) == 2, f"Affine weight must be rank 2, got {ws}")
        _require(ws[0] == fan_in, f"Affine weight rows {ws[0]} != flattened input {fan_in}")
        if self.out_features == 0:
            self.out_features = ws[1]
        _require(ws[1] == self.out_features, f"Affine weight cols {ws[1]} != out_features {self.out_features}")
        _require(bs == (self.out_features,), f"Affine bias shape {bs} != ({self.out_features},)")
        return [(xs[0], self.out_features)]

    def forward(self, node, xs):
        x, w, b = xs
        x2d = x.reshape(x.shape[0], -1)
        return [x2d @ w + b]

    def backward(self, node, gys, want):
        gy = gys[0]
        x, w, _ = (v.data.values for v in node.inputs)
        x2d = x.reshape(x.shape[0], -1)
        gx = (gy @ w.T).reshape(x.shape) if want[0] else None
        gw = x2d.T @ gy if want[1] else None
        gb = gy.sum(axis=0) if want[2] else None
        return [gx, gw, gb]

    def backward_reads_input(self, index):
        return index in (0, 1)


def _conv_out_extent(extent: int, k: int, s: int, p: int) -> int:
    if extent + 2 * p < k:
        raise KernelTooLarge(f"window {k} exceeds padded extent {extent + 2 * p}")
    return (extent + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int, ph: int, pw: int,
            out_h: int, out_w: int) -> np.ndarray:
    """(B,C,H,W) -> (B, C*kh*kw, out_h*out_w) patch matrix."""
    b, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((b, c, kh, kw, out_h, out_w), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw]
    return cols.reshape(b, c * kh * kw, out_h * out_w)


def _col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int, out_h: int, out_w: int) -> np.ndarray:
    """Scatter-add inverse of _im2col."""
    b, c, h, w = x_shape
    cols6 = cols.reshape(b, c, kh, kw, out_h, out_w)
    gxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw] += cols6[:, :, i, j]
    return gxp[:, :, ph:ph + h, pw:pw + w]


class Convolution(FunctionImpl):
    """2-D cross-correlation over NCHW input with per-map bias."""

    KIND = "Convolution"
    ARGS = {"out_maps": "int", "kernel": "pair", "stride": "pair", "pad": "pair"}

    def __init__(self, out_maps: int = 0, kernel=(1, 1), stride=(1, 1), pad=(0, 0)):
        self.out_maps = int(out_maps)
        self.kernel = _pair(kernel, "kernel")
        self.stride = _pair(stride, "stride")
        self.pad = _pair(pad, "pad")
        _require(min(self.kernel) >= 1, f"kernel extents must be >= 1, got {self.kernel}")
        _require(min(self.stride) >= 1, f"stride extents must be >= 1, got {self.stride}")
        _require(min(self.pad) >= 0, f"pads must be >= 0, got {self.pad}")

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 3, f"Convolution takes x, W, b; got {len(in_shapes)} inputs")
        xs, ws, bs = in_shapes
        _require(len(xs) == 4, f"Convolution input must be (B,C,H,W), got {xs}")
        kh, kw = self.kernel
        if self.out_maps == 0:
            self.out_maps = ws[0] if len(ws) == 4 else 0
        _require(ws == (self.out_maps, xs[1], kh, kw),
                 f"Convolution weight shape {ws} != ({self.out_maps},{xs[1]},{kh},{kw})")
        _require(bs == (self.out_maps,), f"Convolution bias shape {bs} != ({self.out_maps},)")
        out_h = _conv_out_extent(xs[2], kh, self.stride[0], self.pad[0])
        out_w = _conv_out_extent(xs[3], kw, self.stride[1], self.pad[1])
        return [(xs[0], self.out_maps, out_h, out_w)]

    def _geometry(self, x_shape):
        kh, kw = self.kernel
        out_h = _conv_out_extent(x_shape[2], kh, self.stride[0], self.pad[0])
        out_w = _conv_out_extent(x_shape[3], kw, self.stride[1], self.pad[1])
        return kh, kw, out_h, out_w

    def forward(self, node, xs):
        x, w, b = xs
        kh, kw, out_h, out_w = self._geometry(x.shape)
        cols = _im2col(x, kh, kw, *self.stride, *self.pad, out_h, out_w)
        w2d = w.reshape(self.out_maps, -1)
        y = np.matmul(w2d, cols)  # (B, O, L)
        y += b[None, :, None]
        return [y.reshape(x.shape[0], self.out_maps, out_h, out_w)]

    def backward(self, node, gys, want):
        x, w = node.inputs[0].data.values, node.inputs[1].data.values
        kh, kw, out_h, out_w = self._geometry(x.shape)
        gy = gys[0].reshape(x.shape[0], self.out_maps, out_h * out_w)
        gx = gw = gb = None
        if want[0] or want[1]:
            w2d = w.reshape(self.out_maps, -1)
            if want[1]:
                cols = _im2col(x, kh, kw, *self.stride, *self.pad, out_h, out_w)
                gw = np.einsum("bol,bkl->ok", gy, cols).reshape(w.shape)
            if want[0]:
                gcols = np.matmul(w2d.T, gy)  # (B, C*kh*kw, L)
                gx = _col2im(gcols, x.shape, kh, kw, *self.stride, *self.pad, out_h, out_w)
        if want[2]:
            gb = gy.sum(axis=(0, 2))
        return [gx, gw, gb]

    def backward_reads_input(self, index):
        return index in (0, 1)


class MaxPooling(FunctionImpl):
    """Per-window maximum over NCHW input; ties go to the first element
    of the window in row-major scan order."""

    KIND = "MaxPooling"
    ARGS = {"kernel": "pair", "stride": "pair", "ignore_border": "bool", "pad": "pair"}

    def __init__(self, kernel=(1, 1), stride=None, ignore_border: bool = True, pad=(0, 0)):
        self.kernel = _pair(kernel, "kernel")
        self.stride = self.kernel if stride is None else _pair(stride, "stride")
        self.ignore_border = bool(ignore_border)
        self.pad = _pair(pad, "pad")
        _require(min(self.kernel) >= 1, f"kernel extents must be >= 1, got {self.kernel}")
        _require(min(self.stride) >= 1, f"stride extents must be >= 1, got {self.stride}")
        _require(min(self.pad) >= 0, f"pads must be >= 0, got {self.pad}")

    def _out_extent(self, extent: int, k: int, s: int, p: int) -> int:
        if extent + 2 * p < k:
            raise KernelTooLarge(f"window {k} exceeds padded extent {extent + 2 * p}")
        if self.ignore_border:
            return (extent + 2 * p - k) // s + 1
        return -((extent + 2 * p - k) // -s) + 1  # ceil division, edge windows clipped

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 1, "MaxPooling takes one input")
        xs = in_shapes[0]
        _require(len(xs) == 4, f"MaxPooling input must be (B,C,H,W), got {xs}")
        out_h = self._out_extent(xs[2], self.kernel[0], self.stride[0], self.pad[0])
        out_w = self._out_extent(xs[3], self.kernel[1], self.stride[1], self.pad[1])
        return [(xs[0], xs[1], out_h, out_w)]

    def forward(self, node, xs):
        x = xs[0]
        b, c, h, w = x.shape
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.pad
        out_h, out_w = self.infer_shapes([x.shape])[0][2:]
        # pad to cover clipped edge windows with -inf so they never win
        need_h = (out_h - 1) * sh + kh
        need_w = (out_w - 1) * sw + kw
        xp = np.full((b, c, max(need_h, h + 2 * ph), max(need_w, w + 2 * pw)),
                     -np.inf, dtype=np.float32)
        xp[:, :, ph:ph + h, pw:pw + w] = x
        windows = np.empty((b, c, out_h, out_w, kh * kw), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                windows[:, :, :, :, i * kw + j] = xp[:, :, i:i + sh * out_h:sh, j:j + sw * out_w:sw]
        arg = windows.argmax(axis=4)  # first max wins on ties
        # map window-local indices to flat positions in the padded array
        oh = np.arange(out_h)[:, None]
        ow = np.arange(out_w)[None, :]
        row = oh * sh + arg // kw
        col = ow * sw + arg % kw
        node.state["flat_index"] = (row * xp.shape[3] + col).reshape(b, c, -1)
        node.state["padded_shape"] = xp.shape
        node.state["x_shape"] = x.shape
        return [windows.max(axis=4)]

    def backward(self, node, gys, want):
        if not want[0]:
            return [None]
        gy = gys[0]
        b, c, h, w = node.state["x_shape"]
        pshape = node.state["padded_shape"]
        ph, pw = self.pad
        flat = node.state["flat_index"]
        gxp = np.zeros((b, c, pshape[2] * pshape[3]), dtype=np.float32)
        np.add.at(gxp, (np.arange(b)[:, None, None], np.arange(c)[None, :, None], flat),
                  gy.reshape(b, c, -1))
        gxp = gxp.reshape(b, c, pshape[2], pshape[3])
        return [gxp[:, :, ph:ph + h, pw:pw + w]]

    def backward_reads_input(self, index):
        return False


class ReLU(FunctionImpl):
    """Elementwise max(x, 0); the gate is closed at exactly 0."""

    KIND = "ReLU"
    ARGS = {"inplace": "bool"}  # accepted and ignored: execution is always out-of-place

    def __init__(self, inplace: bool = False):
        self.inplace = bool(inplace)

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 1, "ReLU takes one input")
        return [in_shapes[0]]

    def forward(self, node, xs):
        return [np.maximum(xs[0], 0.0)]

    def backward(self, node, gys, want):
        if not want[0]:
            return [None]
        x = node.inputs[0].data.values
        return [gys[0] * (x > 0)]

    def backward_reads_input(self, index):
        return True


class SoftmaxCrossEntropy(FunctionImpl):
    """Mean over the batch of -log softmax(logits)[label], stabilized by
    max subtraction. Output is a rank-0 scalar."""

    KIND = "SoftmaxCrossEntropy"
    ARGS = {}

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 2, "SoftmaxCrossEntropy takes logits and labels")
        ls, ts = in_shapes
        _require(len(ls) == 2, f"logits must be (B,K), got {ls}")
        _require(ts == (ls[0],), f"labels must be ({ls[0]},), got {ts}")
        return [()]

    def forward(self, node, xs):
        logits, labels = xs
        k = logits.shape[1]
        ids = labels.astype(np.int64)
        if not np.array_equal(ids, labels) or ids.min(initial=0) < 0 or ids.max(initial=0) >= k:
            raise LabelOutOfRange(f"labels must be integers in [0, {k})")
        z = logits - logits.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
        logp = z - logsum
        node.state["probs"] = np.exp(logp)
        node.state["labels"] = ids
        picked = logp[np.arange(logits.shape[0]), ids]
        return [np.float32(-picked.mean())]

    def backward(self, node, gys, want):
        probs = node.state["probs"]
        ids = node.state["labels"]
        glogits = None
        if want[0]:
            b = probs.shape[0]
            glogits = probs.copy()
            glogits[np.arange(b), ids] -= 1.0
            glogits *= np.float32(gys[0]) / b
        return [glogits, None]

    def backward_reads_input(self, index):
        return False


class BatchNormalization(FunctionImpl):
    """Per-channel normalization: statistics, scale/shift math and
    gradients always run in float32 regardless of the storage policy.

    Train mode (batch_stat=True) normalizes with batch statistics and
    updates the running mean/var inputs in place; eval mode applies the
    stored statistics as a fixed affine transform.
    """

    KIND = "BatchNormalization"
    ARGS = {"eps": "float", "momentum": "float", "batch_stat": "bool"}

    def __init__(self, eps: float = 1e-5, momentum: float = 0.9, batch_stat: bool = True):
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.batch_stat = bool(batch_stat)

    def infer_shapes(self, in_shapes):
        _require(len(in_shapes) == 5, "BatchNormalization takes x, gamma, beta, mean, var")
        xs = in_shapes[0]
        _require(len(xs) >= 2, f"input must have batch and channel axes, got {xs}")
        c = xs[1]
        for name, s in zip(("gamma", "beta", "mean", "var"), in_shapes[1:]):
            _require(s == (c,), f"{name} shape {s} != ({c},)")
        if self.batch_stat:
            n = int(np.prod(xs, dtype=np.int64)) // c
            if n <= 1:
                raise DegenerateBatch(f"cannot take batch statistics over {n} element(s)")
        return [xs]

    @staticmethod
    def _axes(ndim: int) -> tuple:
        return (0,) + tuple(range(2, ndim))

    @staticmethod
    def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, node, xs):
        x, gamma, beta, mean, var = xs
        axes = self._axes(x.ndim)
        if self.batch_stat:
            mu = x.mean(axis=axes)
            vb = x.var(axis=axes)
            m = np.float32(self.momentum)
            node.inputs[3].data.write(m * mean + (1 - m) * mu)
            node.inputs[4].data.write(m * var + (1 - m) * vb)
        else:
            mu, vb = mean, var
        istd = 1.0 / np.sqrt(vb + np.float32(self.eps))
        xhat = (x - self._bcast(mu, x.ndim)) * self._bcast(istd, x.ndim)
        node.state["xhat"] = xhat
        node.state["istd"] = istd
        return [self._bcast(gamma, x.ndim) * xhat + self._bcast(beta, x.ndim)]

    def backward(self, node, gys, want):
        gy = gys[0]
        xhat = node.state["xhat"]
        istd = node.state["istd"]
        gamma = node.inputs[1].data.values
        axes = self._axes(gy.ndim)
        gbeta = gy.sum(axis=axes)
        ggamma = (gy * xhat).sum(axis=axes)
        gx = None
        if want[0]:
            g = self._bcast(gamma * istd, gy.ndim)
            if self.batch_stat:
                n = gy.size // gy.shape[1]
                gx = (g / n) * (n * gy - self._bcast(gbeta, gy.ndim)
                                - xhat * self._bcast(ggamma, gy.ndim))
            else:
                gx = g * gy
        return [gx,
                ggamma if want[1] else None,
                gbeta if want[2] else None,
                None, None]

    def backward_reads_input(self, index):
        return index == 1


REGISTRY: dict[str, type[FunctionImpl]] = {
    cls.KIND: cls
    for cls in (Affine, Convolution, MaxPooling, ReLU, SoftmaxCrossEntropy, BatchNormalization)
}


def supported_kinds() -> set[str]:
    """Kinds this build can execute; the default set for unsupported-function queries."""
    return set(REGISTRY)


# --- graph-building wrappers -------------------------------------------------

def affine(x: Variable, weight: Variable, bias: Variable) -> Variable:
    return apply("Affine", [x, weight, bias], {"out_features": weight.shape[1]})[0]


def convolution(x: Variable, weight: Variable, bias: Variable,
                stride=(1, 1), pad=(0, 0)) -> Variable:
    args = {"out_maps": weight.shape[0], "kernel": weight.shape[2:4],
            "stride": stride, "pad": pad}
    return apply("Convolution", [x, weight, bias], args)[0]


def max_pooling(x: Variable, kernel, stride=None, ignore_border: bool = True,
                pad=(0, 0)) -> Variable:
    args = {"kernel": kernel, "stride": stride, "ignore_border": ignore_border, "pad": pad}
    return apply("MaxPooling", [x], args)[0]


def relu(x: Variable, inplace: bool = False) -> Variable:
    return apply("ReLU", [x], {"inplace": inplace})[0]


def softmax_cross_entropy(logits: Variable, labels: Variable) -> Variable:
    return apply("SoftmaxCrossEntropy", [logits, labels])[0]


def batch_normalization(x: Variable, gamma: Variable, beta: Variable,
                        mean: Variable, var: Variable, batch_stat: bool = True,
                        eps: float = 1e-5, momentum: float = 0.9) -> Variable:
    args = {"eps": eps, "momentum": momentum, "batch_stat": batch_stat}
    return apply("BatchNormalization", [x, gamma, beta, mean, var], args)[0]
