"""Small layer-indexed networks: forward, cached partial inference, and an
analytic backward pass that streams gradients from the classifier inward.

Parameterized layers are indexed back-end-first: ``l = 1`` is the layer that
produces the logits and ``l = L`` is the one nearest the input. Activations,
ReLU, pooling and flatten layers carry no index.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .tensor_core import DimensionError, FormatError, as_f32, fake_quantize, gemm, read_tensor, write_tensor

KINDS = ("dense", "conv2d", "relu", "maxpool2d", "flatten", "softmax_head")
PARAM_KINDS = ("dense", "conv2d")

MODEL_MAGIC = b"FCBM"
MODEL_VERSION = 1


class CacheMissError(KeyError):
    pass


@dataclass
class Layer:
    """One layer. Geometry by kind:

    dense ``(in, out)``; conv2d ``(in_c, out_c, k, stride, in_h, in_w)``;
    maxpool2d ``(k,)``; softmax_head ``(classes,)``; relu/flatten ``()``.
    Dense weights are stored ``(in, out)``, conv weights ``(out_c, in_c, k, k)``.
    """

    kind: str
    geometry: tuple[int, ...] = ()
    params: list[np.ndarray] = field(default_factory=list)
    eligible: list[bool] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        self.geometry = tuple(int(g) for g in self.geometry)
        if self.params and not self.eligible:
            self.eligible = [True] * len(self.params)

    @property
    def has_params(self) -> bool:
        return self.kind in PARAM_KINDS

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            fan_in, fan_out = self.geometry
            return [(fan_in, fan_out), (fan_out,)]
        if self.kind == "conv2d":
            in_c, out_c, k = self.geometry[:3]
            return [(out_c, in_c, k, k), (out_c,)]
        return []

    def conv_out_hw(self) -> tuple[int, int]:
        _, _, k, stride, in_h, in_w = self.geometry
        return (in_h - k) // stride + 1, (in_w - k) // stride + 1

    def forward_macs(self) -> int:
        """Multiply-accumulates for one sample."""
        if self.kind == "dense":
            return self.geometry[0] * self.geometry[1]
        if self.kind == "conv2d":
            in_c, out_c, k = self.geometry[:3]
            oh, ow = self.conv_out_hw()
            return oh * ow * out_c * in_c * k * k
        return 0


class Model:
    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int]):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self._positions = [i for i, layer in enumerate(self.layers) if layer.has_params]
        self._check()

    def _check(self):
        if not self._positions:
            raise DimensionError("model has no parameterized layers")
        shape = self.input_shape
        for layer in self.layers:
            if layer.has_params:
                for p, want in zip(layer.params, layer.param_shapes()):
                    if p.shape != want:
                        raise DimensionError(f"{layer.kind} param shape {p.shape} != {want}")
                if len(layer.params) != 2:
                    raise DimensionError(f"{layer.kind} needs weight and bias")
            shape = _out_shape(layer, shape)

    @property
    def L(self) -> int:
        return len(self._positions)

    @property
    def num_classes(self) -> int:
        return _out_shape_chain(self.layers, self.input_shape)[-1][0]

    def position(self, l: int) -> int:
        """List position of parameterized layer ``l``."""
        if not 1 <= l <= self.L:
            raise IndexError(f"layer index {l} outside 1..{self.L}")
        return self._positions[self.L - l]

    def layer(self, l: int) -> Layer:
        return self.layers[self.position(l)]

    def index_of_position(self, pos: int) -> int | None:
        if pos in self._positions:
            return self.L - self._positions.index(pos)
        return None

    def indices(self) -> range:
        return range(1, self.L + 1)

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def param_count(self, l: int) -> int:
        return sum(p.size for p in self.layer(l).params)

    def same_params(self, other: "Model", l: int) -> bool:
        """Bitwise equality of layer ``l`` parameters."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.layer(l).params, other.layer(l).params)
        )


def _out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    g = layer.geometry
    if layer.kind == "dense":
        if shape != (g[0],):
            raise DimensionError(f"dense expects input ({g[0]},), got {shape}")
        return (g[1],)
    if layer.kind == "conv2d":
        if shape != (g[0], g[4], g[5]):
            raise DimensionError(f"conv2d expects input {(g[0], g[4], g[5])}, got {shape}")
        return (g[1], *layer.conv_out_hw())
    if layer.kind == "maxpool2d":
        c, h, w = shape
        if h % g[0] or w % g[0]:
            raise DimensionError(f"maxpool {g[0]} does not tile {h}x{w}")
        return (c, h // g[0], w // g[0])
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "softmax_head":
        if shape != (g[0],):
            raise DimensionError(f"softmax_head over {g[0]} classes got {shape}")
    return shape


def _out_shape_chain(layers, shape):
    shapes = []
    for layer in layers:
        shape = _out_shape(layer, shape)
        shapes.append(shape)
    return shapes


# -- model zoo ----------------------------------------------------------------

def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def mlp(in_dim: int, classes: int, hidden: Sequence[int] = (128, 64), seed: int = 0) -> Model:
    rng = np.random.default_rng(seed)
    layers, prev = [], in_dim
    for width in hidden:
        layers.append(Layer("dense", (prev, width), [_he(rng, (prev, width), prev), np.zeros(width, np.float32)]))
        layers.append(Layer("relu"))
        prev = width
    layers.append(Layer("dense", (prev, classes), [_he(rng, (prev, classes), prev), np.zeros(classes, np.float32)]))
    layers.append(Layer("softmax_head", (classes,)))
    return Model(layers, (in_dim,))


def tiny_cnn(input_shape=(1, 8, 8), classes: int = 5, channels=(4, 8), hidden: int = 32, seed: int = 0) -> Model:
    """conv3x3 -> relu -> conv3x3 -> relu -> maxpool2 -> dense -> relu -> dense."""
    rng = np.random.default_rng(seed)
    in_c, h, w = input_shape
    c1, c2 = channels
    conv1 = Layer("conv2d", (in_c, c1, 3, 1, h, w), [_he(rng, (c1, in_c, 3, 3), in_c * 9), np.zeros(c1, np.float32)])
    h1, w1 = conv1.conv_out_hw()
    conv2 = Layer("conv2d", (c1, c2, 3, 1, h1, w1), [_he(rng, (c2, c1, 3, 3), c1 * 9), np.zeros(c2, np.float32)])
    h2, w2 = conv2.conv_out_hw()
    flat = c2 * (h2 // 2) * (w2 // 2)
    layers = [
        conv1, Layer("relu"), conv2, Layer("relu"), Layer("maxpool2d", (2,)), Layer("flatten"),
        Layer("dense", (flat, hidden), [_he(rng, (flat, hidden), flat), np.zeros(hidden, np.float32)]),
        Layer("relu"),
        Layer("dense", (hidden, classes), [_he(rng, (hidden, classes), hidden), np.zeros(classes, np.float32)]),
        Layer("softmax_head", (classes,)),
    ]
    return Model(layers, input_shape)


def int8_view(model: Model) -> Model:
    """Copy whose parameters are replaced by their INT8 round-trip values."""
    q = model.copy()
    for layer in q.layers:
        layer.params = [fake_quantize(p) for p in layer.params]
    return q


# -- kernels per layer kind -----------------------------------------------------

def ordered_sum(a: np.ndarray, axis: int) -> np.ndarray:
    """f32 sum over ``axis`` accumulated strictly in index order."""
    a = np.moveaxis(a, axis, 0)
    acc = np.zeros(a.shape[1:], dtype=np.float32)
    for row in a:
        acc = acc + row
    return acc


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, H, W) -> (N, oh*ow, C*k*k), column order (c, dy, dx)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * k * k)


def _col2im(cols: np.ndarray, in_shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = in_shape
    cols = cols.reshape(n, oh, ow, c, k, k)
    out = np.zeros((n, c, h, w), dtype=np.float32)
    for dy in range(k):
        for dx in range(k):
            patch = cols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            out[:, :, dy:dy + stride * oh:stride, dx:dx + stride * ow:stride] += patch
    return out


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    kind = layer.kind
    if kind == "dense":
        w, b = layer.params
        return gemm(x, w) + b
    if kind == "conv2d":
        w, b = layer.params
        in_c, out_c, k, stride = layer.geometry[:4]
        oh, ow = layer.conv_out_hw()
        n = x.shape[0]
        cols = _im2col(x, k, stride).reshape(n * oh * ow, -1)
        y = gemm(cols, w.reshape(out_c, -1).T) + b
        return np.ascontiguousarray(y.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2))
    if kind == "relu":
        return np.maximum(x, np.float32(0))
    if kind == "maxpool2d":
        k = layer.geometry[0]
        n, c, h, w = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).max(axis=(3, 5))
    if kind == "flatten":
        return x.reshape(x.shape[0], -1)
    return x


def layer_backward(layer: Layer, x: np.ndarray, delta: np.ndarray, per_sample: bool, need_input_grad: bool = True):
    """Returns ``(delta_in, grads)``.

    ``grads`` is ``[gW, gb]`` with a leading sample axis when ``per_sample``,
    otherwise summed over the batch. ``delta_in`` is None when not requested.
    """
    kind = layer.kind
    if kind == "dense":
        w, _ = layer.params
        if per_sample:
            grads = [x[:, :, None] * delta[:, None, :], delta.copy()]
        else:
            grads = [gemm(x.T, delta), ordered_sum(delta, 0)]
        return (gemm(delta, w.T) if need_input_grad else None), grads
    if kind == "conv2d":
        w, _ = layer.params
        in_c, out_c, k, stride = layer.geometry[:4]
        oh, ow = layer.conv_out_hw()
        n = x.shape[0]
        cols = _im2col(x, k, stride)  # (N, P, K)
        dmat = np.ascontiguousarray(delta.transpose(0, 2, 3, 1)).reshape(n, oh * ow, out_c)
        if per_sample:
            gw = np.stack([gemm(cols[i].T, dmat[i]).T.reshape(out_c, in_c, k, k) for i in range(n)])
            gb = ordered_sum(dmat, 1)
        else:
            flat = cols.reshape(n * oh * ow, -1)
            gw = gemm(flat.T, dmat.reshape(n * oh * ow, out_c)).T.reshape(out_c, in_c, k, k)
            gb = ordered_sum(dmat.reshape(n * oh * ow, out_c), 0)
        grads = [np.ascontiguousarray(gw), gb]
        delta_in = None
        if need_input_grad:
            dcols = gemm(dmat.reshape(n * oh * ow, out_c), w.reshape(out_c, -1))
            delta_in = _col2im(dcols, x.shape, k, stride, oh, ow)
        return delta_in, grads
    if kind == "relu":
        return delta * (x > 0), []
    if kind == "maxpool2d":
        k = layer.geometry[0]
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        pick = np.argmax(win, axis=-1)
        spread = np.zeros_like(win)
        np.put_along_axis(spread, pick[..., None], delta[..., None], axis=-1)
        spread = spread.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return spread, []
    if kind == "flatten":
        return delta.reshape(x.shape), []
    return delta, []


# -- forward / cache / partial inference --------------------------------------

class ActivationCache:
    """Inputs to checkpointed layers, keyed by back-end index ``l``.

    Stored batched: ``entries[l][n]`` is the input tensor to layer ``l`` for
    sample ``n``.
    """

    def __init__(self):
        self.entries: dict[int, np.ndarray] = {}

    def __contains__(self, key) -> bool:
        l, n = key
        return l in self.entries and 0 <= n < len(self.entries[l])

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def layers(self) -> list[int]:
        return sorted(self.entries)

    def get(self, l: int, n: int) -> np.ndarray:
        if (l, n) not in self:
            raise CacheMissError(f"no cached input for layer {l}, sample {n}")
        return self.entries[l][n]

    def batch(self, l: int) -> np.ndarray:
        if l not in self.entries:
            raise CacheMissError(f"no cached input for layer {l}")
        return self.entries[l]

    def clear(self):
        self.entries.clear()


def _check_input(model: Model, x) -> np.ndarray:
    x = as_f32(x)
    if x.shape[1:] != model.input_shape:
        raise DimensionError(f"input batch {x.shape} does not match model input {model.input_shape}")
    return x


def forward_trace(model: Model, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the input to every layer position (what backward needs)."""
    x = _check_input(model, x)
    inputs = []
    for layer in model.layers:
        inputs.append(x)
        x = layer_forward(layer, x)
    return x, inputs


def cache_from_trace(model: Model, inputs: list[np.ndarray], cache_at) -> ActivationCache:
    cache = ActivationCache()
    for l in sorted(set(cache_at)):
        cache.entries[l] = inputs[model.position(l)]
    return cache


def forward(model: Model, x, cache_at=()) -> tuple[np.ndarray, ActivationCache]:
    logits, inputs = forward_trace(model, x)
    return logits, cache_from_trace(model, inputs, cache_at)


def predict_logits(model: Model, x, chunk: int = 1024) -> np.ndarray:
    x = _check_input(model, x)
    outs = []
    for start in range(0, len(x), chunk):
        h = x[start:start + chunk]
        for layer in model.layers:
            h = layer_forward(layer, h)
        outs.append(h)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes), np.float32)


def run_from(model: Model, l: int, h: np.ndarray) -> np.ndarray:
    """Run parameterized layer ``l`` and everything after it (toward the output)."""
    for layer in model.layers[model.position(l):]:
        h = layer_forward(layer, h)
    return h


def partial_inference(model: Model, cache: ActivationCache, l: int, n: int) -> np.ndarray:
    return run_from(model, l, cache.get(l, n)[None])[0]


def partial_inference_batch(model: Model, cache: ActivationCache, l: int) -> np.ndarray:
    return run_from(model, l, cache.batch(l))


def evaluate_accuracy(model: Model, x, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    return accuracy_from_logits(predict_logits(model, x), y)


def accuracy_from_logits(logits: np.ndarray, y) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty batch is undefined")
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return float(np.count_nonzero(np.argmax(logits, axis=1) == y)) / len(y)


# -- gradients ---------------------------------------------------------------

def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / ordered_sum(e, 1)[:, None]


def loglik_output_grad(logits: np.ndarray, labels) -> np.ndarray:
    """d ln p(label | x) / d logits = onehot - softmax."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise ValueError("label outside class range")
    g = -softmax(logits)
    g[np.arange(len(labels)), labels] += np.float32(1)
    return g


def iter_backward(model: Model, x, labels, inputs: list[np.ndarray] | None = None,
                  logits: np.ndarray | None = None, group: int = 1) -> Iterator[tuple[int, list[np.ndarray]]]:
    """Yield ``(l, grads)`` for l = 1, 2, ..., L.

    Gradients are of the mean ln p(label | x, theta) over consecutive groups
    of ``group`` samples (the last group may be short) and carry a leading
    group axis; ``group=1`` gives per-sample gradients. The signal propagated
    past layer ``l`` is computed before ``l`` is yielded, so callers may edit
    layer ``l`` in place without changing the gradients of deeper layers.
    """
    if group < 1:
        raise ValueError(f"group size must be >= 1, got {group}")
    if inputs is None:
        logits, inputs = forward_trace(model, x)
    delta = loglik_output_grad(logits, labels)
    deepest = model.position(model.L)
    for pos in range(len(model.layers) - 1, deepest - 1, -1):
        layer = model.layers[pos]
        need = pos > deepest
        if group == 1 or not layer.has_params:
            delta, grads = layer_backward(layer, inputs[pos], delta, per_sample=True, need_input_grad=need)
        else:
            deltas, parts = [], []
            for s in range(0, len(delta), group):
                d_in, g = layer_backward(layer, inputs[pos][s:s + group], delta[s:s + group],
                                         per_sample=False, need_input_grad=need)
                deltas.append(d_in)
                n = np.float32(min(group, len(delta) - s))
                parts.append([t / n for t in g])
            # samples propagate independently, so slicing leaves delta bit-identical
            delta = np.concatenate(deltas) if need else None
            grads = [np.stack(ts) for ts in zip(*parts)]
        if layer.has_params:
            yield model.index_of_position(pos), grads


def backward_loglik(model: Model, x, label: int) -> dict[int, list[np.ndarray]]:
    """Gradient of ln p(label | x) for one sample, keyed by layer index."""
    x = as_f32(x)[None]
    return {l: [g[0] for g in grads] for l, grads in iter_backward(model, x, [label])}


def batch_loss_grads(model: Model, x, labels) -> tuple[float, dict[int, list[np.ndarray]]]:
    """Mean cross-entropy and its batch-mean gradient (for training)."""
    logits, inputs = forward_trace(model, x)
    labels = np.asarray(labels)
    p = softmax(logits)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(len(labels)), labels], 1e-30))))
    delta = -loglik_output_grad(logits, labels) / np.float32(len(labels))
    grads = {}
    deepest = model.position(model.L)
    for pos in range(len(model.layers) - 1, deepest - 1, -1):
        layer = model.layers[pos]
        delta, g = layer_backward(layer, inputs[pos], delta, per_sample=False, need_input_grad=pos > deepest)
        if layer.has_params:
            grads[model.index_of_position(pos)] = g
    return loss, grads


# -- checkpoint file -------------------------------------------------------------

_KIND_CODE = {k: i for i, k in enumerate(KINDS)}


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        write_model(fh, model)


def write_model(fh, model: Model) -> None:
    fh.write(MODEL_MAGIC + struct.pack("<HH", MODEL_VERSION, len(model.layers)))
    fh.write(struct.pack("<B", len(model.input_shape)))
    fh.write(struct.pack(f"<{len(model.input_shape)}I", *model.input_shape))
    for layer in model.layers:
        flags = sum(1 << i for i, e in enumerate(layer.eligible) if e)
        fh.write(struct.pack("<BB", _KIND_CODE[layer.kind], len(layer.geometry)))
        fh.write(struct.pack(f"<{len(layer.geometry)}I", *layer.geometry))
        fh.write(struct.pack("<BB", len(layer.params), flags))
        for p in layer.params:
            write_tensor(fh, p)


def _unpack(fh, fmt):
    size = struct.calcsize(fmt)
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError("truncated checkpoint")
    return struct.unpack(fmt, buf)


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        version, count = _unpack(fh, "<HH")
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (rank,) = _unpack(fh, "<B")
        input_shape = _unpack(fh, f"<{rank}I")
        layers = []
        for _ in range(count):
            code, ngeom = _unpack(fh, "<BB")
            if code >= len(KINDS):
                raise FormatError(f"unknown layer kind code {code}")
            geometry = _unpack(fh, f"<{ngeom}I")
            nparams, flags = _unpack(fh, "<BB")
            params = [read_tensor(fh) for _ in range(nparams)]
            if any(not isinstance(p, np.ndarray) for p in params):
                raise FormatError("checkpoint parameters must be f32 records")
            eligible = [bool(flags >> i & 1) for i in range(nparams)]
            layers.append(Layer(KINDS[code], geometry, params, eligible))
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint")
    try:
        return Model(layers, input_shape)
    except DimensionError as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from exc
