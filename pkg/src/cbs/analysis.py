"""Frequency-domain measurements of images and feature maps.

The DFT here is evaluated directly from its definition (as products with the
DFT matrices, no FFT), which is cheap enough for maps up to 64x64 and keeps
the measurement independent of any FFT library.
"""

from dataclasses import dataclass

import numpy as np

from .smoothing import build_kernel, depthwise_blur


def _dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def dft2(x):
    """2-D DFT over the last two axes: ``X[u,v] = sum x[m,n] exp(-2 pi i (um/H + vn/W))``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or min(x.shape[-2:]) < 1:
        raise ValueError("dft2 needs at least a 2-d input")
    h, w = x.shape[-2:]
    return _dft_matrix(h) @ x @ _dft_matrix(w).T


def radial_frequency(h, w):
    """Normalized radial frequency (cycles/pixel) of every DFT bin, in [0, sqrt(0.5)]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    return np.sqrt(fy**2 + fx**2)


@dataclass
class SpectrumReport:
    histogram: np.ndarray  # energy per radial bin over [0, 0.5]
    bin_edges: np.ndarray
    hf_ratio: float
    cutoff: float
    total_energy: float


def power(x):
    """Per-bin energy ``|X|^2 / (H W)``, which sums to ``sum(x**2)``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    return np.abs(dft2(x)) ** 2 / (h * w)


def spectrum(x, cutoff=0.25, bins=16):
    """Radial energy histogram and high-frequency ratio, pooled over leading axes.

    Bins split [0, 0.5] evenly; corner frequencies beyond 0.5 land in the last bin.
    """
    if not 0 < cutoff < 0.5:
        raise ValueError("cutoff must lie in (0, 0.5)")
    p = power(x)
    h, w = p.shape[-2:]
    p = p.reshape(-1, h, w).sum(axis=0)
    r = radial_frequency(h, w)
    idx = np.minimum((r / 0.5 * bins).astype(int), bins - 1)
    hist = np.bincount(idx.ravel(), weights=p.ravel(), minlength=bins)
    total = float(p.sum())
    high = float(p[r > cutoff].sum())
    ratio = high / total if total > 0 else 0.0
    return SpectrumReport(hist, np.linspace(0, 0.5, bins + 1), min(max(ratio, 0.0), 1.0), cutoff, total)


def hf_ratio(x, cutoff=0.25):
    """Fraction of spectral energy at radial frequency above ``cutoff``."""
    return spectrum(x, cutoff).hf_ratio


def map_hf_ratios(maps, cutoff=0.25):
    """hf_ratio of every individual map in an ``[..., H, W]`` stack."""
    maps = np.asarray(maps, dtype=np.float64)
    h, w = maps.shape[-2:]
    p = power(maps).reshape(-1, h, w)
    high = p[:, radial_frequency(h, w) > cutoff].sum(axis=1)
    total = p.reshape(len(p), -1).sum(axis=1)
    return np.divide(high, total, out=np.zeros_like(high), where=total > 0)


def conv_outputs(model, x):
    """Raw (pre-blur) output of every conv layer for input ``x``, in eval mode."""
    was = model.training
    model.eval()
    capture = []
    try:
        model.forward(x, capture=capture)
    finally:
        model.training = was
    return capture


def feature_noise_probe(model_untrained, model_trained, x, sigma=1.0, cutoff=0.25):
    """Mean per-map hf_ratio of each conv output, raw and blurred at ``sigma``.

    Both models must share a spec. Returns one dict per conv layer with keys
    ``layer``, ``untrained_raw``, ``untrained_blurred``, ``trained_raw``,
    ``trained_blurred``.
    """
    if model_untrained.spec["arch"] != model_trained.spec["arch"]:
        raise ValueError("models must share an architecture")
    kernel = build_kernel(sigma)
    rows = []
    results = {}
    for tag, model in (("untrained", model_untrained), ("trained", model_trained)):
        for name, raw in conv_outputs(model, x):
            blurred = depthwise_blur(raw, kernel)
            results.setdefault(name, {})[f"{tag}_raw"] = float(map_hf_ratios(raw, cutoff).mean())
            results[name][f"{tag}_blurred"] = float(map_hf_ratios(blurred, cutoff).mean())
    for name, vals in results.items():
        rows.append({"layer": name, **vals})
    return rows
