"""Color decoupling and the learnable soft histogram layer.

RGB pixels are decoupled into luminance plus two chromaticity coordinates so
that brightness context and color context can be histogrammed separately.
Each of the three channels then votes into B soft bins with a triangle kernel
whose centers and half-widths are trainable, which is what lets the context
features adapt during end-to-end training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from renderpipe.errors import ConfigurationError
from renderpipe.ops import check_nhwc

# Keeps the chromaticity quotient finite on pure black pixels.
CHROMA_EPSILON = 1e-8

N_VALUE_CHANNELS = 3


def rgb_to_lrg(x: np.ndarray) -> np.ndarray:
    """Map RGB to (luminance, red chromaticity, green chromaticity).

    Luminance is the plain channel mean; the chromaticities are R and G each
    divided by the channel sum, so the pair is invariant to exposure scaling.
    """
    check_nhwc(x, "rgb input")
    if x.shape[3] != 3:
        raise ConfigurationError(f"rgb input must have 3 channels, got {x.shape[3]}")
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    s = r + g + b
    d = s + CHROMA_EPSILON
    return np.stack([s / 3.0, r / d, g / d], axis=3)


def rgb_to_lrg_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Adjoint of rgb_to_lrg via the quotient rule on the chromaticities."""
    if grad_out.shape != x.shape:
        raise ConfigurationError(f"grad_out shape {grad_out.shape} does not match input {x.shape}")
    r, g = x[..., 0], x[..., 1]
    d = x[..., 0] + x[..., 1] + x[..., 2] + CHROMA_EPSILON
    gl, gr, gg = grad_out[..., 0], grad_out[..., 1], grad_out[..., 2]
    d2 = d * d
    common = gl / 3.0 - gr * r / d2 - gg * g / d2
    grad = np.empty_like(x)
    grad[..., 0] = common + gr / d
    grad[..., 1] = common + gg / d
    grad[..., 2] = common
    return grad


@dataclass
class HistogramParams:
    """Trainable triangle-bin parameters, one (channel, bin) grid each.

    ``half_widths`` holds the distance from a bin center to the edge of its
    support: a vote is max(0, 1 - |x - center| / half_width).  Setting
    ``multiplicative_width`` flips to the alternative reading where the width
    parameter multiplies the distance instead of dividing it; in that mode a
    larger parameter means a narrower bin.
    """

    centers: np.ndarray
    half_widths: np.ndarray
    multiplicative_width: bool = False

    def __post_init__(self):
        if self.centers.shape != self.half_widths.shape:
            raise ConfigurationError(
                f"centers {self.centers.shape} and half_widths {self.half_widths.shape} must match"
            )
        if self.centers.ndim != 2 or self.centers.shape[0] != N_VALUE_CHANNELS:
            raise ConfigurationError(f"expected (3, bins) parameter grids, got {self.centers.shape}")
        if not np.all(self.half_widths > 0):
            raise ConfigurationError("half_widths must be strictly positive")

    @property
    def bins(self) -> int:
        return self.centers.shape[1]

    def copy(self) -> "HistogramParams":
        return HistogramParams(self.centers.copy(), self.half_widths.copy(), self.multiplicative_width)


def init_default(bins: int = 6, dtype=np.float32) -> HistogramParams:
    """Evenly spaced centers over [0, 1] with half-width equal to the spacing.

    Adjacent triangles then overlap so that every value in [0, 1] receives
    votes summing to exactly one.
    """
    if bins < 2:
        raise ConfigurationError(f"need at least 2 bins, got {bins}")
    spacing = 1.0 / (bins - 1)
    centers = np.tile(np.linspace(0.0, 1.0, bins, dtype=dtype), (N_VALUE_CHANNELS, 1))
    half_widths = np.full((N_VALUE_CHANNELS, bins), spacing, dtype=dtype)
    return HistogramParams(centers, half_widths)


def _votes(lrg: np.ndarray, params: HistogramParams):
    delta = lrg[..., :, None] - params.centers
    if params.multiplicative_width:
        t = 1.0 - np.abs(delta) * params.half_widths
    else:
        t = 1.0 - np.abs(delta) / params.half_widths
    return delta, t


def hist_forward(lrg: np.ndarray, params: HistogramParams) -> np.ndarray:
    """Per-pixel soft histogram votes, shape (n, h, w, 3 * bins).

    Output channel k * bins + b is channel k's vote into bin b, so the three
    channel blocks stay contiguous.
    """
    check_nhwc(lrg, "lrg input")
    if lrg.shape[3] != N_VALUE_CHANNELS:
        raise ConfigurationError(f"lrg input must have 3 channels, got {lrg.shape[3]}")
    _, t = _votes(lrg, params)
    out = np.maximum(t, 0.0)
    n, h, w = lrg.shape[:3]
    return out.reshape(n, h, w, N_VALUE_CHANNELS * params.bins)


def hist_backward(
    lrg: np.ndarray, params: HistogramParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of hist_forward: gradients for the values, centers, and widths.

    Outside a bin's support, and exactly at the peak and support boundary,
    all three partials are zero (sign(0) = 0 carries the peak case).
    Parameter gradients accumulate over every pixel of every batch item.
    """
    n, h, w = lrg.shape[:3]
    if grad_out.shape != (n, h, w, N_VALUE_CHANNELS * params.bins):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} does not match votes")
    delta, t = _votes(lrg, params)
    g = grad_out.reshape(n, h, w, N_VALUE_CHANNELS, params.bins)
    active = g * (t > 0)
    sgn = np.sign(delta)
    if params.multiplicative_width:
        grad_lrg = -(active * sgn * params.half_widths).sum(axis=4)
        grad_centers = (active * sgn * params.half_widths).sum(axis=(0, 1, 2))
        grad_widths = -(active * np.abs(delta)).sum(axis=(0, 1, 2))
    else:
        inv_w = 1.0 / params.half_widths
        grad_lrg = -(active * sgn * inv_w).sum(axis=4)
        grad_centers = (active * sgn * inv_w).sum(axis=(0, 1, 2))
        grad_widths = (active * np.abs(delta) * inv_w * inv_w).sum(axis=(0, 1, 2))
    return grad_lrg, grad_centers, grad_widths
