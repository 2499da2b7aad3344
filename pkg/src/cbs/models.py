"""Desk-scale reference architectures with per-conv smoothing slots.

Models are ordered layer lists. Each :class:`Conv` carries a ``smooth`` flag
decided at build time from the :class:`~cbs.smoothing.SmoothingConfig`; the
kernel itself lives on the model and is swapped by :meth:`Model.set_sigma`,
so baseline and smoothed builds of the same spec have identical parameters.
"""

import json
import math
import os

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, constant
from .data import Normalizer
from .exceptions import FormatError, ShapeError
from .nn_ops import (
    BatchNormState,
    batchnorm2d,
    conv2d,
    conv_output_size,
    global_avg_pool,
    linear,
    maxpool2d,
    relu,
    softmax_cross_entropy,
)
from .smoothing import SmoothingConfig, build_kernel, depthwise_blur
from .tensor import DTYPE, Rng, read_tensor, write_tensor

IDENTITY = build_kernel(0.0)


class _Context:
    __slots__ = ("kernel", "training", "capture")

    def __init__(self, kernel, training, capture=None):
        self.kernel = kernel
        self.training = training
        self.capture = capture


class Layer:
    def parameters(self):
        return []

    def buffers(self):
        return {}

    def out_shape(self, shape):
        return shape

    def children(self):
        return []


class Conv(Layer):
    def __init__(self, name, c_in, c_out, kernel_size=3, stride=1, padding=None, smooth=False):
        if min(c_in, c_out, kernel_size, stride) < 1:
            raise ShapeError(f"{name}: invalid conv geometry")
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        self.smooth = smooth
        self.weight = Parameter(np.zeros((c_out, c_in, kernel_size, kernel_size), DTYPE), f"{name}.weight")
        self.bias = Parameter(np.zeros(c_out, DTYPE), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"{self.name}: expects {self.c_in} channels, got {c}")
        ho = conv_output_size(h, self.kernel_size, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel_size, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small")
        return (self.c_out, ho, wo)

    def forward(self, x, ctx):
        h = conv2d(x, self.weight, self.bias, self.stride, self.padding)
        out = depthwise_blur(h, ctx.kernel) if self.smooth else h
        if ctx.capture is not None:
            raw = h.value if isinstance(h, ad.Node) else h
            ctx.capture.append((self.name, raw))
        return out


class InputBlur(Layer):
    name = "input_blur"

    def forward(self, x, ctx):
        return depthwise_blur(x, ctx.kernel)


class BatchNorm(Layer):
    def __init__(self, name, channels, momentum=0.1, eps=1e-5):
        self.name = name
        self.channels = channels
        self.gamma = Parameter(np.ones(channels, DTYPE), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, DTYPE), f"{name}.beta")
        self.state = BatchNormState.create(channels, momentum, eps)

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.state.running_mean,
                f"{self.name}.running_var": self.state.running_var}

    def load_buffer(self, key, value):
        setattr(self.state, key.rsplit(".", 1)[1], np.array(value, dtype=DTYPE))

    def out_shape(self, shape):
        if shape[0] != self.channels:
            raise ShapeError(f"{self.name}: expects {self.channels} channels, got {shape[0]}")
        return shape

    def forward(self, x, ctx):
        self.state.training = ctx.training
        return batchnorm2d(x, self.gamma, self.beta, self.state)


class MaxPool(Layer):
    def __init__(self, window=2, stride=None):
        self.window = window
        self.stride = window if stride is None else stride

    def out_shape(self, shape):
        c, h, w = shape
        if h < self.window or w < self.window:
            raise ShapeError(f"maxpool: input {h}x{w} smaller than window {self.window}")
        return (c, (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1)

    def forward(self, x, ctx):
        return maxpool2d(x, self.window, self.stride)


class ReLU(Layer):
    def forward(self, x, ctx):
        return relu(x)


class Flatten(Layer):
    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, ctx):
        return ad.flatten(x)


class GlobalAvgPool(Layer):
    def out_shape(self, shape):
        return (shape[0],)

    def forward(self, x, ctx):
        return global_avg_pool(x)


class Linear(Layer):
    def __init__(self, name, d_in, d_out):
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(np.zeros((d_in, d_out), DTYPE), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out, DTYPE), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def out_shape(self, shape):
        if shape != (self.d_in,):
            raise ShapeError(f"{self.name}: expects ({self.d_in},), got {shape}")
        return (self.d_out,)

    def forward(self, x, ctx):
        return linear(x, self.weight, self.bias)


class ResidualBlock(Layer):
    """Two 3x3 convs with an identity or 1x1-projection shortcut.

    ``relu(bn2(s(conv2(relu(bn1(s(conv1(x))))))) + shortcut(x))`` where ``s``
    is the blur when the conv's slot is on.
    """

    def __init__(self, name, c_in, c_out, stride, slots):
        self.name = name
        self.conv1 = Conv(f"{name}.conv1", c_in, c_out, 3, stride, smooth=slots[0])
        self.bn1 = BatchNorm(f"{name}.bn1", c_out)
        self.conv2 = Conv(f"{name}.conv2", c_out, c_out, 3, 1, smooth=slots[1])
        self.bn2 = BatchNorm(f"{name}.bn2", c_out)
        self.proj = None
        if stride != 1 or c_in != c_out:
            self.proj = Conv(f"{name}.proj", c_in, c_out, 1, stride, padding=0, smooth=slots[2])
            self.proj_bn = BatchNorm(f"{name}.proj_bn", c_out)

    def children(self):
        kids = [self.conv1, self.bn1, self.conv2, self.bn2]
        if self.proj is not None:
            kids += [self.proj, self.proj_bn]
        return kids

    def parameters(self):
        return [p for k in self.children() for p in k.parameters()]

    def out_shape(self, shape):
        main = self.bn2.out_shape(self.conv2.out_shape(self.bn1.out_shape(self.conv1.out_shape(shape))))
        side = shape if self.proj is None else self.proj_bn.out_shape(self.proj.out_shape(shape))
        if main != side:
            raise ShapeError(f"{self.name}: branch shapes {main} and {side} differ")
        return main

    def forward(self, x, ctx):
        h = relu(self.bn1.forward(self.conv1.forward(x, ctx), ctx))
        h = self.bn2.forward(self.conv2.forward(h, ctx), ctx)
        s = x if self.proj is None else self.proj_bn.forward(self.proj.forward(x, ctx), ctx)
        return relu(ad.add(h, s))


def _walk(layers):
    for layer in layers:
        yield layer
        yield from _walk(layer.children())


class Model:
    """Ordered layer list plus the current smoothing kernel."""

    def __init__(self, layers, input_shape, classes, smoothing, spec):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.classes = classes
        self.smoothing = smoothing
        self.spec = spec
        self.training = True
        self.sigma = None
        self.kernel = IDENTITY
        self.normalizer = None
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (classes,):
            raise ShapeError(f"model output shape {shape} != ({classes},)")

    # -- structure --------------------------------------------------------

    def modules(self):
        return list(_walk(self.layers))

    def convs(self):
        return [m for m in self.modules() if isinstance(m, Conv)]

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def n_params(self):
        return int(sum(p.value.size for p in self.parameters()))

    # -- modes ------------------------------------------------------------

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def set_sigma(self, sigma):
        """Rebuild the shared kernel when sigma changes."""
        if self.sigma is not None and sigma == self.sigma:
            return self.kernel
        self.sigma = float(sigma)
        if self.smoothing.enabled:
            self.kernel = build_kernel(self.sigma, self.smoothing.schedule.bypass_threshold)
        else:
            self.kernel = IDENTITY
        return self.kernel

    def _active_kernel(self):
        if not self.training and not self.smoothing.apply_at_eval:
            return IDENTITY
        return self.kernel

    # -- computation ------------------------------------------------------

    def forward(self, x, capture=None):
        x = np.asarray(x) if not isinstance(x, ad.Node) else x
        if not isinstance(x, ad.Node):
            if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
                raise ShapeError(f"expected input (N, {self.input_shape}), got {x.shape}")
            x = constant(x)
        ctx = _Context(self._active_kernel(), self.training, capture)
        h = x
        for layer in self.layers:
            h = layer.forward(h, ctx)
        return h

    def preprocess(self, images):
        """Apply the training-split normalization, if one is attached."""
        if self.normalizer is None:
            return np.asarray(images, dtype=DTYPE)
        return self.normalizer.normalize(images)

    def predict_logits(self, x, batch_size=256):
        """Logits for already-preprocessed inputs, computed without a tape."""
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(x[i : i + batch_size]).value)
        return np.concatenate(out, axis=0)

    def loss(self, x, y):
        return softmax_cross_entropy(self.forward(x), y)

    # -- state ------------------------------------------------------------

    def buffers(self):
        out = {}
        for m in self.modules():
            out.update(m.buffers())
        return out

    def state_dict(self):
        state = {p.name: p.value.copy() for p in self.parameters()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state):
        params = {p.name: p for p in self.parameters()}
        bns = {m.name: m for m in self.modules() if isinstance(m, BatchNorm)}
        for key, value in state.items():
            if key in params:
                p = params[key]
                if p.value.shape != tuple(np.shape(value)):
                    raise ShapeError(f"{key}: shape {np.shape(value)} != {p.value.shape}")
                p.value = np.array(value, dtype=DTYPE)
            else:
                owner = key.rsplit(".", 1)[0]
                if owner not in bns:
                    raise KeyError(f"unknown state entry {key}")
                bns[owner].load_buffer(key, value)


def _cfg(cfg):
    return SmoothingConfig(placement="none") if cfg is None else cfg


def build_simple_cnn3(in_channels=3, input_size=32, classes=10, cfg=None, channels=(32, 64, 128)):
    """Three ``conv3x3 -> (blur) -> maxpool2 -> relu`` stages, then a linear head."""
    cfg = _cfg(cfg)
    channels = tuple(int(c) for c in channels)
    if len(channels) != 3 or min(channels) < 1 or classes < 1 or in_channels < 1:
        raise ShapeError("simple3 needs three positive widths and classes >= 1")
    if input_size < 8:
        raise ShapeError(f"input {input_size}x{input_size} too small for three 2x2 pooling stages")
    layers = [InputBlur()] if cfg.smooth_input else []
    c_prev = in_channels
    for i, c in enumerate(channels, start=1):
        layers += [Conv(f"conv{i}", c_prev, c, 3, 1, 1, smooth=cfg.conv_slot(i)), MaxPool(2), ReLU()]
        c_prev = c
    side = input_size // 8
    layers += [Flatten(), Linear("fc", channels[-1] * side * side, classes)]
    spec = {"arch": "simple3", "in_channels": in_channels, "input_size": input_size,
            "classes": classes, "channels": list(channels), "smoothing": cfg.to_dict()}
    return Model(layers, (in_channels, input_size, input_size), classes, cfg, spec)


def build_mini_resnet(blocks=3, width=16, classes=10, cfg=None, in_channels=3, input_size=32):
    """Stem conv, ``blocks`` residual blocks, global average pool, linear head.

    Block 0 keeps the stem width; each later block doubles the width with
    stride 2 and a 1x1 projection shortcut.
    """
    cfg = _cfg(cfg)
    if blocks < 1 or width < 1 or classes < 1:
        raise ShapeError("mini resnet needs blocks >= 1, width >= 1, classes >= 1")
    counter = iter(range(1, 10_000))
    layers = [InputBlur()] if cfg.smooth_input else []
    layers += [Conv("stem", in_channels, width, 3, 1, 1, smooth=cfg.conv_slot(next(counter))),
               BatchNorm("stem_bn", width), ReLU()]
    c = width
    for b in range(blocks):
        c_out = width if b == 0 else c * 2
        stride = 1 if b == 0 else 2
        i1, i2 = next(counter), next(counter)
        has_proj = stride != 1 or c != c_out
        i3 = next(counter) if has_proj else None
        slots = (cfg.conv_slot(i1), cfg.conv_slot(i2),
                 has_proj and cfg.smooth_shortcuts and cfg.conv_slot(i3))
        layers.append(ResidualBlock(f"block{b + 1}", c, c_out, stride, slots))
        c = c_out
    layers += [GlobalAvgPool(), Linear("fc", c, classes)]
    spec = {"arch": "mini_resnet", "in_channels": in_channels, "input_size": input_size,
            "classes": classes, "blocks": blocks, "width": width, "smoothing": cfg.to_dict()}
    return Model(layers, (in_channels, input_size, input_size), classes, cfg, spec)


def build_model(spec):
    """Rebuild a model from its ``spec`` dict (as stored in checkpoints)."""
    spec = dict(spec)
    cfg = SmoothingConfig.from_dict(spec["smoothing"])
    if spec["arch"] == "simple3":
        return build_simple_cnn3(spec["in_channels"], spec["input_size"], spec["classes"], cfg,
                                 tuple(spec["channels"]))
    if spec["arch"] == "mini_resnet":
        return build_mini_resnet(spec["blocks"], spec["width"], spec["classes"], cfg,
                                 spec["in_channels"], spec["input_size"])
    raise ValueError(f"unknown architecture {spec['arch']!r}")


def init_params(model, rng, scheme="kaiming", zero_head=True):
    """Draw conv/linear weights; zero biases; BatchNorm gamma=1, beta=0.

    ``kaiming``: N(0, 2 / fan_in). ``xavier``: N(0, 2 / (fan_in + fan_out)).

    With ``zero_head`` the final classifier weight starts at zero so the first
    loss is exactly ``ln(classes)``; its random draw is still consumed, so the
    rest of the parameters do not depend on the flag.
    """
    if scheme not in ("kaiming", "xavier"):
        raise ValueError(f"unknown init scheme {scheme!r}")
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    for m in model.modules():
        if isinstance(m, Conv):
            rf = m.kernel_size * m.kernel_size
            fan_in, fan_out = m.c_in * rf, m.c_out * rf
        elif isinstance(m, Linear):
            fan_in, fan_out = m.d_in, m.d_out
        elif isinstance(m, BatchNorm):
            m.gamma.value = np.ones(m.channels, DTYPE)
            m.beta.value = np.zeros(m.channels, DTYPE)
            m.state.running_mean = np.zeros(m.channels, DTYPE)
            m.state.running_var = np.ones(m.channels, DTYPE)
            continue
        else:
            continue
        var = 2.0 / fan_in if scheme == "kaiming" else 2.0 / (fan_in + fan_out)
        m.weight.value = rng.normal(m.weight.value.shape, 0.0, math.sqrt(var)).astype(DTYPE)
        m.bias.value = np.zeros_like(m.bias.value)
    head = model.layers[-1]
    if zero_head and isinstance(head, Linear):
        head.weight.value = np.zeros_like(head.weight.value)
    ad.zero_grads(model.parameters())
    return model


# ----------------------------------------------------------------------
# checkpoints: <dir>/manifest.json + <dir>/tensors.bin
# ----------------------------------------------------------------------


def save_checkpoint(path, model, manifest=None, extra_tensors=None):
    """Write the model spec, run metadata, and every tensor in a fixed order."""
    os.makedirs(path, exist_ok=True)
    tensors = dict(model.state_dict())
    for k, v in (extra_tensors or {}).items():
        tensors[f"extra/{k}"] = v
    names = list(tensors)
    meta = dict(manifest or {})
    meta.update({"model_spec": model.spec, "sigma": model.sigma, "tensors": names,
                 "normalizer": None if model.normalizer is None else model.normalizer.to_dict()})
    with open(os.path.join(path, "tensors.bin"), "wb") as fh:
        for name in names:
            write_tensor(fh, tensors[name])
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Return ``(model, manifest, extra_tensors)`` from :func:`save_checkpoint` output."""
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            meta = json.load(fh)
        model = build_model(meta["model_spec"])
        tensors = {}
        with open(os.path.join(path, "tensors.bin"), "rb") as fh:
            for name in meta["tensors"]:
                tensors[name] = read_tensor(fh)
    except (KeyError, EOFError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint at {path}: {exc}") from exc
    extra = {k[len("extra/"):]: v for k, v in tensors.items() if k.startswith("extra/")}
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("extra/")})
    if meta.get("sigma") is not None:
        model.set_sigma(meta["sigma"])
    if meta.get("normalizer"):
        model.normalizer = Normalizer.from_dict(meta["normalizer"])
    return model, meta, extra
