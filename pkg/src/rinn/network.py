"""Model assembly: the base classifier, the rotated pose network, serialization.

A model is an ordered list of layers. Spatial layers (conv, pool) map
``[H, W, C]`` feature maps; the first cyclic or dense layer splits the
channel axis into per-orientation fibers ``[H, W, p, k]``, after which every
layer acts pointwise on the last axis. ReLU follows every parametric layer
except the last, whose output are the class logits.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .cyclic import CyclicConvLayer, cyclic_conv_backward, cyclic_conv_forward, identity_init
from .errors import (
    ConfigurationError,
    DimensionError,
    MalformedModelError,
    ModelShapeError,
    ModelVersionError,
)
from .filters import BaseBank, expand_bank, symmetrize_kernel
from .layers import (
    Conv2DLayer,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    softmax,
)
from .tensor import GroupLayout

FORMAT = "rinn-1"
KINDS = ("conv", "pool", "cyclic", "dense")


@dataclass
class LayerSpec:
    kind: str
    size: int = 1  # spatial kernel extent
    filters: int = 0  # base filters / output width
    period: int = 1  # orientation period once rotated


@dataclass
class ModelSpec:
    layers: tuple = (
        LayerSpec("conv", 7, 1, 6),
        LayerSpec("pool", 2),
        LayerSpec("conv", 14, 36, 12),
        LayerSpec("cyclic", 1, 36),
        LayerSpec("dense", 1, 24),
        LayerSpec("dense", 1, 15),
    )
    class_count: int = 15
    n: int = 12
    input_size: int = 34
    in_channels: int = 1

    def validate(self):
        kinds = [s.kind for s in self.layers]
        for k in kinds:
            if k not in KINDS:
                raise ConfigurationError(f"unknown layer kind {k!r}")
        if kinds.count("cyclic") != 1:
            raise ConfigurationError("exactly one cyclic layer is required")
        cyc = kinds.index("cyclic")
        if any(k in ("conv", "pool") for k in kinds[cyc:]):
            raise ConfigurationError("the cyclic layer must follow every conv and pool layer")
        if kinds[-1] != "dense" or self.layers[-1].filters != self.class_count:
            raise ConfigurationError("the last layer must be a dense layer of class_count width")
        for s in self.layers:
            if s.kind == "conv" and self.n % s.period:
                raise ConfigurationError(f"period {s.period} does not divide n={self.n}")


@dataclass
class Layer:
    kind: str
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    layout: GroupLayout = GroupLayout(1, 1)  # conv: output channels; cyclic: input channels
    frozen: bool = False

    @property
    def has_params(self) -> bool:
        return self.kind != "pool"

    @property
    def pointwise(self) -> bool:
        if self.kind == "dense":
            return True
        if self.kind in ("conv", "cyclic"):
            return self.weights.shape[:2] == (1, 1)
        return False


@dataclass
class PoseMap:
    scores: np.ndarray  # [Hy, Hx, p, C]

    @property
    def shape(self):
        return self.scores.shape


@dataclass
class Model:
    layers: list
    n: int = 12
    class_count: int = 15

    def copy(self) -> "Model":
        return Model(
            [Layer(l.kind, l.weights.copy(), l.bias.copy(), l.layout, l.frozen) for l in self.layers],
            self.n,
            self.class_count,
        )

    def param_layers(self):
        return [i for i, l in enumerate(self.layers) if l.has_params]

    def param_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers if l.has_params)

    def conv_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind == "conv" and not self._after_split(i)]

    def cyclic_index(self):
        for i, l in enumerate(self.layers):
            if l.kind == "cyclic":
                return i
        return None

    def _after_split(self, index):
        return any(l.kind in ("cyclic", "dense") for l in self.layers[:index])

    def grid(self) -> tuple[int, float]:
        """Return (stride, offset): output cell i is centered on input pixel offset + stride*i."""
        stride, offset = 1, 0.0
        for l in self.layers:
            if l.kind == "pool":
                offset += 0.5 * stride
                stride *= 2
            elif l.kind in ("conv", "cyclic") and not l.pointwise:
                offset += (l.weights.shape[0] - 1) / 2.0 * stride
        return stride, offset

    def frozen_prefix(self) -> int:
        """Number of leading layers without trainable parameters."""
        k = 0
        for l in self.layers:
            if (l.has_params and not l.frozen) or l.kind in ("cyclic", "dense"):
                break
            k += 1
        return k

    def stages_done(self) -> list:
        convs = self.conv_indices()
        done = ["base"]
        if convs and self.layers[convs[0]].layout.period > 1:
            done.append("rotate1")
        if len(convs) > 1 and self.layers[convs[-1]].layout.period > 1:
            done.append("rotate2")
        if self.cyclic_index() is not None:
            done.append("head")
        return done

    # forward / backward ---------------------------------------------------

    def forward(self, x, start: int = 0, keep: bool = False, cells: bool = False, stop: int | None = None):
        """Run layers ``start..`` on ``x`` and return logits ``[H, W, p, C]``.

        With ``stop`` the output of layer ``stop - 1`` is returned unchanged
        (a spatial map when the split has not happened yet).

        ``x`` is the raw image when ``start`` is 0, else the output of layer
        ``start - 1``. With ``cells`` the rows of ``x`` are independent
        feature cells stacked along H (only valid for a pointwise tail).
        With ``keep`` the per-layer inputs are cached for :meth:`backward`.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, :, None]
        layout = self.layout_before(start, x.shape[-1])
        last = self.param_layers()[-1]
        cache = []
        for idx in range(start, len(self.layers) if stop is None else stop):
            l = self.layers[idx]
            entry = {"x": x, "layout": layout}
            cache.append(entry)
            if l.kind == "pool":
                x, entry["argmax"] = maxpool2_forward(x)
                continue
            if l.kind == "conv" and x.ndim == 3:
                z = conv2d_forward(x, Conv2DLayer(l.weights, l.bias))
                layout = l.layout
            elif l.kind == "cyclic":
                if x.ndim != 3:
                    raise DimensionError(f"layer {idx}: cyclic layer after the fiber split")
                z = cyclic_conv_forward(x, CyclicConvLayer(l.weights, l.bias, l.layout))
                z = z.transpose(0, 1, 3, 2)
            else:
                if x.ndim == 3:
                    if l.kind == "dense" and x.shape[:2] != (1, 1) and not cells:
                        raise DimensionError(
                            f"layer {idx}: dense layer needs a 1x1 map, got {x.shape[:2]}; "
                            "convert it with fc_to_1x1"
                        )
                    x = split_orientations(x, layout)
                    entry["split"] = True
                if l.kind == "conv" and l.weights.shape[:2] != (1, 1):
                    raise DimensionError(f"layer {idx}: spatial conv after the fiber split")
                w = l.weights if l.kind == "dense" else l.weights[0, 0]
                if x.shape[-1] != w.shape[0]:
                    raise DimensionError(
                        f"layer {idx}: fiber width {x.shape[-1]} does not match {w.shape[0]} inputs"
                    )
                z = x @ w + l.bias
            entry["z"] = z
            x = z if idx == last else np.maximum(z, 0.0)
        if keep:
            self._cache = (start, cache)
        if stop is not None:
            return x
        if x.ndim == 3:
            x = split_orientations(x, layout)
        return x

    def layout_before(self, index: int, channels: int) -> GroupLayout:
        layout = GroupLayout(channels, 1)
        for i, l in enumerate(self.layers[:index]):
            if l.kind == "conv" and not self._after_split(i):
                layout = l.layout
        return layout

    def backward(self, dlogits, need_input_grad: bool = False):
        """Gradients for the last ``forward(keep=True)`` call.

        Returns ``{layer_index: (dW, dBias)}`` for every unfrozen layer.
        """
        start, cache = self._cache
        last = self.param_layers()[-1]
        trainable = [i for i in range(start, len(self.layers))
                     if self.layers[i].has_params and not self.layers[i].frozen]
        stop = start if need_input_grad else (trainable[0] if trainable else len(self.layers))
        grads = {}
        dy = np.asarray(dlogits, dtype=np.float64)
        for idx in range(len(self.layers) - 1, stop - 1, -1):
            l = self.layers[idx]
            entry = cache[idx - start]
            need_dx = idx > stop or need_input_grad
            if l.kind == "pool":
                dy = maxpool2_backward(entry["argmax"], dy)
                continue
            if idx != last:
                dy = relu_backward(entry["z"], dy)
            x = entry["x"]
            if l.kind == "conv" and x.ndim == 3:
                dx, dw, db = conv2d_backward(x, Conv2DLayer(l.weights, l.bias), dy, need_dx)
            elif l.kind == "cyclic":
                dx, dw, db = cyclic_conv_backward(
                    x, CyclicConvLayer(l.weights, l.bias, l.layout), dy.transpose(0, 1, 3, 2), need_dx
                )
            else:
                xin = split_orientations(x, entry["layout"]) if entry.get("split") else x
                w = l.weights if l.kind == "dense" else l.weights[0, 0]
                flat_x = xin.reshape(-1, xin.shape[-1])
                flat_dy = dy.reshape(-1, dy.shape[-1])
                dw = flat_x.T @ flat_dy
                if l.kind != "dense":
                    dw = dw[None, None]
                db = flat_dy.sum(axis=0)
                dx = dy @ w.T if need_dx else None
                if dx is not None and entry.get("split"):
                    dx = merge_orientations(dx)
            if not l.frozen:
                grads[idx] = (dw, db)
            dy = dx
        self.input_grad = dy if need_input_grad else None
        return grads

    def features(self, x, start: int = 0, cells: bool = False, layer: int = -1) -> np.ndarray:
        """Feature volume ``[H, W, p, d]`` entering ``layer`` (default: the pre-logits layer)."""
        self.forward(x, start=start, keep=True, cells=cells)
        _, cache = self._cache
        entry = cache[layer - start if layer >= 0 else layer]
        feats = entry["x"]
        if feats.ndim == 3:
            feats = split_orientations(feats, entry["layout"])
        self._cache = None
        return feats


def split_orientations(x, layout: GroupLayout) -> np.ndarray:
    """``[H, W, m*p]`` -> ``[H, W, p, m]`` fibers."""
    h, w, c = x.shape
    layout.check(c)
    return x.reshape(h, w, layout.groups, layout.period).transpose(0, 1, 3, 2)


def merge_orientations(x) -> np.ndarray:
    h, w, p, m = x.shape
    return x.transpose(0, 1, 3, 2).reshape(h, w, m * p)


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _bar_kernel(size):
    # horizontal ridge (second derivative of a Gaussian across rows); 180-degree symmetric
    r = np.arange(size) - (size - 1) / 2.0
    yy, xx = np.meshgrid(r, r, indexing="ij")
    s = size / 6.0
    k = (1.0 - yy**2 / s**2) * np.exp(-(yy**2) / (2 * s**2) - xx**2 / (2 * (2 * s) ** 2))
    return k / np.abs(k).sum()


def build_base_model(spec: ModelSpec | None = None, seed: int = 0) -> Model:
    """Base classifier: spatial layers sized so the last conv emits a 1x1 map, then dense layers."""
    spec = spec or ModelSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    size, channels = spec.input_size, spec.in_channels
    layers = []
    for pos, s in enumerate(spec.layers):
        name = f"layer {pos} ({s.kind})"
        if s.kind == "conv":
            if size < s.size:
                raise DimensionError(f"{name}: {s.size}x{s.size} kernel does not fit a {size}x{size} map")
            fan_in = s.size * s.size * channels
            w = _he(rng, (s.size, s.size, channels, s.filters), fan_in)
            if not layers:
                # first-layer filters start as oriented ridge detectors plus noise
                w = 0.5 * w + _bar_kernel(s.size)[:, :, None, None] * 4.0
            layers.append(Layer("conv", w, np.zeros(s.filters), GroupLayout(s.filters, 1)))
            size, channels = size - s.size + 1, s.filters
        elif s.kind == "pool":
            if size % 2:
                raise DimensionError(f"{name}: cannot pool an odd {size}x{size} map")
            layers.append(Layer("pool"))
            size //= 2
        elif s.kind == "cyclic":
            if size != 1:
                raise DimensionError(
                    f"{name}: the spatial layers leave a {size}x{size} map; the head needs 1x1"
                )
        else:
            w = _he(rng, (channels, s.filters), channels)
            layers.append(Layer("dense", w, np.zeros(s.filters)))
            channels = s.filters
    return Model(layers, spec.n, spec.class_count)


def fc_to_1x1(weights, bias=None) -> Conv2DLayer:
    """Reuse dense weights ``[d_in, d_out]`` as a 1x1 convolution."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise DimensionError(f"dense weights must be [d_in, d_out], got {weights.shape}")
    bias = np.zeros(weights.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return Conv2DLayer(weights[None, None].copy(), bias.copy())


def fully_convolutional(model: Model) -> Model:
    """Copy of ``model`` with every dense layer replaced by its 1x1 convolution."""
    out = model.copy()
    for l in out.layers:
        if l.kind == "dense":
            conv = fc_to_1x1(l.weights, l.bias)
            l.kind, l.weights = "conv", conv.weights
            l.layout = GroupLayout(conv.weights.shape[3], 1)
    return out


def widen_input(model: Model, index: int, layout: GroupLayout) -> None:
    """Replicate the input channels of conv ``index`` across ``layout.period`` orientation copies.

    Weights are scaled by 1/period so a uniform response across copies
    reproduces the narrow layer's activation.
    """
    l = model.layers[index]
    if l.weights.shape[2] != layout.groups:
        raise DimensionError(
            f"layer {index} consumes {l.weights.shape[2]} channels, expected {layout.groups} groups"
        )
    l.weights = np.repeat(l.weights, layout.period, axis=2) / layout.period


def rotate_conv(model: Model, index: int, n: int, p: int) -> None:
    """Replace conv ``index`` by its rotated bank (in place) and freeze it."""
    l = model.layers[index]
    if l.layout.period != 1:
        raise ConfigurationError(f"layer {index} is already rotated")
    if n % p:
        raise ConfigurationError(f"period {p} must divide n={n}")
    in_layout = model.layout_before(index, l.weights.shape[2])
    kernels = symmetrize_kernel(l.weights, n // p) if n // p > 1 else l.weights
    bank = expand_bank(BaseBank(kernels, in_layout), n, p)
    l.weights = bank.kernels
    l.bias = np.repeat(l.bias, p)
    l.layout = bank.layout
    l.frozen = True


def insert_cyclic(model: Model, kernels: int | None = None) -> None:
    """Insert an identity-initialized cyclic layer after the last spatial layer and convert dense layers."""
    if model.cyclic_index() is not None:
        raise ConfigurationError("model already has a cyclic layer")
    pos = next(i for i, l in enumerate(model.layers) if l.kind == "dense")
    layout = model.layout_before(pos, 1)
    cyc = identity_init(layout)
    if kernels is not None and kernels != cyc.kernel_count:
        raise ConfigurationError("identity initialization needs one cyclic kernel per group")
    model.layers.insert(pos, Layer("cyclic", cyc.kernels, cyc.bias, layout))
    for l in model.layers[pos + 1:]:
        if l.kind == "dense":
            l.kind, l.weights = "conv", fc_to_1x1(l.weights).weights


def build_pose_model(base: Model, n: int = 12, periods=(6, 12)) -> Model:
    """Rotate every conv of ``base``, insert the identity cyclic layer and a 1x1 head."""
    model = base.copy()
    model.n = n
    convs = model.conv_indices()
    if len(periods) != len(convs):
        raise ConfigurationError(f"{len(convs)} conv layers but {len(periods)} periods")
    for r, (idx, p) in enumerate(zip(convs, periods)):
        if n % p or n // p > 2:
            raise ConfigurationError(f"period {p} incompatible with n={n}")
        if r > 0:
            widen_input(model, idx, model.layers[convs[r - 1]].layout)
        rotate_conv(model, idx, n, p)
    insert_cyclic(model)
    return model


def forward_pose(model: Model, img) -> PoseMap:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    first = model.layers[0]
    if img.ndim != 3 or img.shape[2] != first.weights.shape[2]:
        raise DimensionError(f"input shape {img.shape} does not match the model")
    return PoseMap(softmax(model.forward(img)))


def cell_center(model: Model, i, j):
    stride, offset = model.grid()
    return offset + stride * np.asarray(i, dtype=np.float64), offset + stride * np.asarray(j, dtype=np.float64)


def nearest_cell(model: Model, cy, cx):
    stride, offset = model.grid()
    return int(np.floor((cy - offset) / stride + 0.5)), int(np.floor((cx - offset) / stride + 0.5))


# serialization -------------------------------------------------------------


def _num(v: float) -> str:
    return format(float(v), ".17g")


def _arr(a) -> str:
    return "[" + ",".join(_num(v) for v in np.asarray(a, dtype=np.float64).ravel()) + "]"


def dumps_model(model: Model) -> str:
    parts = []
    for l in model.layers:
        shape = list(l.weights.shape) if l.has_params else [2, 2]
        weights = l.weights if l.has_params else np.zeros(0)
        parts.append(
            "{"
            f'"kind":{json.dumps(l.kind)},'
            f'"shape":{json.dumps(shape, separators=(",", ":"))},'
            f'"layout":{{"m":{l.layout.groups},"p":{l.layout.period}}},'
            f'"frozen":{"true" if l.frozen else "false"},'
            f'"weights":{_arr(weights)},'
            f'"bias":{_arr(l.bias)}'
            "}"
        )
    return (
        f'{{"format":"{FORMAT}","n":{model.n},"class_count":{model.class_count},'
        f'"layers":[{",".join(parts)}]}}'
    )


def loads_model(text: str) -> Model:
    try:
        doc = json.loads(text, parse_int=float)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedModelError(f"not a model document: {e}") from None
    if not isinstance(doc, dict) or "format" not in doc:
        raise MalformedModelError("missing format field")
    if doc["format"] != FORMAT:
        raise ModelVersionError(f"unsupported model format {doc['format']!r}, expected {FORMAT!r}")
    try:
        layers = []
        for rec in doc["layers"]:
            kind = rec["kind"]
            if kind not in KINDS:
                raise MalformedModelError(f"unknown layer kind {kind!r}")
            shape = tuple(int(s) for s in rec["shape"])
            layout = GroupLayout(int(rec["layout"]["m"]), int(rec["layout"]["p"]))
            w = np.array(rec["weights"], dtype=np.float64)
            b = np.array(rec["bias"], dtype=np.float64)
            if kind == "pool":
                layers.append(Layer("pool", layout=layout, frozen=bool(rec["frozen"])))
                continue
            if int(np.prod(shape)) != w.size or b.size != shape[-1]:
                raise ModelShapeError(f"layer {len(layers)}: array sizes do not match shape {shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise MalformedModelError(f"layer {len(layers)}: non-finite parameters")
            layers.append(Layer(kind, w.reshape(shape), b, layout, bool(rec["frozen"])))
        model = Model(layers, int(doc["n"]), int(doc["class_count"]))
    except (KeyError, TypeError, AttributeError) as e:
        raise MalformedModelError(f"malformed model document: {e!r}") from None
    except ValueError as e:
        if isinstance(e, (MalformedModelError, ModelShapeError)):
            raise
        raise ModelShapeError(str(e)) from None
    _check_composition(model)
    return model


def _check_composition(model: Model) -> None:
    width = None  # channel count (spatial) or fiber width (after the split)
    split = False
    for idx, l in enumerate(model.layers):
        if not l.has_params:
            continue
        if l.kind == "conv" and not split:
            c_in, width = l.weights.shape[2], l.weights.shape[3]
            if l.layout.channels != width:
                raise ModelShapeError(f"layer {idx}: layout does not match {width} channels")
            expected = c_in if idx == model.param_layers()[0] else prev_out
            prev_out = width
        else:
            c_in = l.weights.shape[2] if l.kind == "cyclic" else l.weights.shape[-2]
            if l.kind == "cyclic":
                expected = width
                if l.layout.channels != c_in:
                    raise ModelShapeError(f"layer {idx}: cyclic layout does not match its kernels")
            elif not split:
                expected = model.layout_before(idx, 1).groups
            else:
                expected = width
            split = True
            width = l.weights.shape[-1]
        if c_in != expected:
            raise ModelShapeError(f"layer {idx} expects {c_in} inputs, previous layer gives {expected}")


def save_model(model: Model, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(dumps_model(model))


def load_model(path) -> Model:
    with open(path, "rb") as f:
        raw = f.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedModelError("model file is not UTF-8") from None
    return loads_model(text)
