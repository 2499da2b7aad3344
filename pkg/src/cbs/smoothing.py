"""Gaussian feature-map smoothing and the sigma-annealing curriculum.

Every smoothed conv layer computes ``relu(pool(bn(blur_sigma(conv(x)))))``.
The blur is a fixed depthwise Gaussian with unit DC gain; it has no trainable
parameters but sits in the autodiff graph so gradients flow through it. As
sigma is annealed to zero the blur becomes an exact identity and training
reduces to an ordinary CNN.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Node, constant, forward_record
from .nn_ops import batchnorm2d, conv2d, maxpool2d, relu
from .tensor import DTYPE

DEFAULT_BYPASS = 0.05

PLACEMENTS = ("none", "after_every_conv", "image_only", "image_and_features", "listed_layers")


@dataclass(frozen=True, eq=False)
class GaussianKernel:
    sigma: float
    size: int
    weights: np.ndarray  # [size, size], sums to 1
    factor: np.ndarray  # [size], 1-d factor with outer(factor, factor) == weights

    @property
    def half_width(self):
        return self.size // 2

    @property
    def is_identity(self):
        return self.size == 1

    def __repr__(self):
        return f"GaussianKernel(sigma={self.sigma:g}, size={self.size})"


def kernel_half_width(sigma):
    return max(1, math.ceil(2 * sigma))


def build_kernel(sigma, bypass_threshold=DEFAULT_BYPASS, size=None):
    """Discretize ``exp(-(x^2 + y^2) / 2 sigma^2) / (2 pi sigma^2)`` on integer offsets.

    The support is ``2h + 1`` with ``h = max(1, ceil(2 sigma))`` unless
    ``size`` overrides it. Weights are divided by their sum so constants pass
    unchanged. Any ``sigma <= bypass_threshold`` yields the 1x1 delta kernel.
    """
    sigma = float(sigma)
    if sigma < 0 or math.isnan(sigma):
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0 or sigma <= bypass_threshold:
        one = np.ones((1, 1), dtype=DTYPE)
        return GaussianKernel(sigma, 1, one, np.ones(1, dtype=DTYPE))
    if size is None:
        h = kernel_half_width(sigma)
    else:
        if size < 1 or size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {size}")
        h = size // 2
    offs = np.arange(-h, h + 1, dtype=np.float64)
    r2 = offs[:, None] ** 2 + offs[None, :] ** 2
    w = np.exp(-r2 / (2 * sigma**2)) / (2 * math.pi * sigma**2)
    w = w / w.sum()
    g = np.exp(-(offs**2) / (2 * sigma**2))
    g = g / g.sum()
    return GaussianKernel(sigma, 2 * h + 1, w.astype(DTYPE), g.astype(DTYPE))


def _blur_array(x, k):
    # Separable pass along W then H on a zero-padded copy; equals the direct
    # 2-d correlation with ``k.weights`` up to float rounding.
    h = k.half_width
    H, W = x.shape[-2:]
    g = k.factor.astype(x.dtype)
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(0, 0), (h, h)])
    rows = g[0] * xp[..., :, 0:W]
    for j in range(1, k.size):
        rows += g[j] * xp[..., :, j : j + W]
    rp = np.pad(rows, pad + [(h, h), (0, 0)])
    out = g[0] * rp[..., 0:H, :]
    for i in range(1, k.size):
        out += g[i] * rp[..., i : i + H, :]
    return out


def blur_direct(x, k):
    """Reference 2-d depthwise correlation with zero 'same' padding."""
    x = np.asarray(x)
    h = k.half_width
    H, W = x.shape[-2:]
    pad = [(0, 0)] * (x.ndim - 2)
    xp = np.pad(x, pad + [(h, h), (h, h)])
    out = np.zeros_like(x)
    wts = k.weights.astype(x.dtype)
    for i in range(k.size):
        for j in range(k.size):
            out += wts[i, j] * xp[..., i : i + H, j : j + W]
    return out


def depthwise_blur(x, k):
    """Blur every channel of an NCHW tensor (array or graph node) independently.

    Spatial dims are preserved with zero padding, so borders lose some mass.
    A delta kernel returns ``x`` itself, making the sigma -> 0 limit exact.
    """
    if k.is_identity:
        return x
    if not isinstance(x, Node):
        return _blur_array(np.asarray(x), k)
    # The kernel is symmetric, so the adjoint of the blur is the blur itself.
    return forward_record("blur", _blur_array(x.value, k), (x,), lambda g: (_blur_array(g, k),))


@dataclass(frozen=True)
class SigmaSchedule:
    """Stepwise geometric decay ``sigma0 * decay_factor ** (t // decay_every)``.

    With ``granularity="epoch"`` the step ``t`` is the epoch. With
    ``"iteration"`` each epoch is split into ``steps_per_epoch`` windows and
    ``t`` counts windows, so the default of 2 updates sigma at the first
    iteration and at the midpoint of every epoch.
    """

    sigma0: float = 1.0
    decay_factor: float = 0.9
    decay_every: int = 5
    granularity: str = "epoch"
    bypass_threshold: float = DEFAULT_BYPASS
    steps_per_epoch: int = 2

    def __post_init__(self):
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be > 0")
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be >= 1")
        if self.granularity not in ("epoch", "iteration"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.bypass_threshold < 0:
            raise ValueError("bypass_threshold must be >= 0")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")

    def sigma_at(self, t):
        return sigma_at(self, t)

    def step_index(self, epoch, batch_index=0, n_batches=1):
        if self.granularity == "epoch":
            return epoch
        return epoch * self.steps_per_epoch + (batch_index * self.steps_per_epoch) // n_batches


def sigma_at(schedule, t):
    if t < 0:
        raise ValueError("t must be >= 0")
    return schedule.sigma0 * schedule.decay_factor ** (t // schedule.decay_every)


@dataclass(frozen=True)
class SmoothingConfig:
    """Where blurs go and which sigma they use.

    ``placement``:
      * ``none`` - plain CNN, no blur anywhere
      * ``after_every_conv`` - blur after every conv (full curriculum)
      * ``image_only`` - blur the input image only
      * ``image_and_features`` - blur the input image and after every conv
      * ``listed_layers`` - blur after the 1-based conv indices in ``layers``

    A set ``constant_sigma`` overrides the schedule.
    """

    placement: str = "after_every_conv"
    schedule: SigmaSchedule = field(default_factory=SigmaSchedule)
    constant_sigma: float = None
    layers: tuple = ()
    apply_at_eval: bool = True
    smooth_shortcuts: bool = True

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}; choose from {PLACEMENTS}")
        if self.placement == "listed_layers" and not self.layers:
            raise ValueError("listed_layers placement needs at least one layer index")
        if any(i < 1 for i in self.layers):
            raise ValueError("layer indices are 1-based")
        if self.constant_sigma is not None and self.constant_sigma < 0:
            raise ValueError("constant_sigma must be >= 0")

    @property
    def enabled(self):
        return self.placement != "none"

    @property
    def smooth_input(self):
        return self.placement in ("image_only", "image_and_features")

    def conv_slot(self, index):
        """Whether the ``index``-th conv (1-based) gets a blur after it."""
        if self.placement in ("after_every_conv", "image_and_features"):
            return True
        if self.placement == "listed_layers":
            return index in self.layers
        return False

    def sigma_at(self, t):
        if self.constant_sigma is not None:
            return float(self.constant_sigma)
        return self.schedule.sigma_at(t)

    def kernel_at(self, t):
        return build_kernel(self.sigma_at(t), self.schedule.bypass_threshold)

    def to_dict(self):
        d = asdict(self)
        d["layers"] = list(self.layers)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["schedule"] = SigmaSchedule(**d.get("schedule", {}))
        d["layers"] = tuple(d.get("layers", ()))
        return cls(**d)


def cbs_layer_forward(x, conv, kernel, bn=None, pool=None):
    """One smoothed conv layer: conv -> blur -> batchnorm -> maxpool -> relu.

    ``conv`` is a :class:`~cbs.nn_ops.Conv2dParams`; ``bn`` is an optional
    ``(gamma, beta, BatchNormState)`` triple and ``pool`` an optional window.
    """
    h = conv2d(x, conv.weight, conv.bias, conv.stride, conv.padding)
    h = depthwise_blur(h, kernel)
    if bn is not None:
        h = batchnorm2d(h, *bn)
    if pool is not None:
        h = maxpool2d(h, pool)
    return relu(constant(h))
