"""Multi-scale pooled context features and patch-aligned assembly.

The per-pixel histogram votes are pooled into a four-scale cascade: a 3x3
average at full resolution, two further 3x3 averages at stride 2, and a
global average.  For any pixel rectangle the assembly concatenates the pixel
colors with the context read from all four scales, using nearest lower-index
correspondence (integer division) between resolutions so that full-image and
patch-wise evaluation read exactly the same values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from renderpipe.errors import ConfigurationError
from renderpipe import ops

MIN_SIDE = 4
N_SCALES = 4


@dataclass
class PatchRect:
    """A rectangle of pixels at full resolution: origin (y, x), size h x w."""

    y: int
    x: int
    h: int = 32
    w: int = 32

    def __post_init__(self):
        if self.y < 0 or self.x < 0 or self.h < 1 or self.w < 1:
            raise ConfigurationError(f"invalid rect {self}")

    def check_inside(self, img_h: int, img_w: int) -> None:
        if self.y + self.h > img_h or self.x + self.w > img_w:
            raise IndexError(f"rect {self} does not fit inside {img_h}x{img_w}")


@dataclass
class PyramidFeatures:
    """Pooled context maps: full, half, quarter resolution, and global."""

    s1: np.ndarray
    s2: np.ndarray
    s3: np.ndarray
    s_global: np.ndarray

    @property
    def channels(self) -> int:
        return self.s1.shape[3]


def build_pyramid(hist_map: np.ndarray) -> PyramidFeatures:
    """Pool histogram votes through strides (1, 2, 2) plus a global average."""
    ops.check_nhwc(hist_map, "histogram map")
    _, h, w, _ = hist_map.shape
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ConfigurationError(f"pyramid needs at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
    s1 = ops.avgpool3_forward(hist_map, stride=1)
    s2 = ops.avgpool3_forward(s1, stride=2)
    s3 = ops.avgpool3_forward(s2, stride=2)
    s_global = ops.global_avgpool_forward(s3)
    return PyramidFeatures(s1, s2, s3, s_global)


def pyramid_backward(
    grads: "PyramidFeatures", hist_map_shape: tuple[int, ...]
) -> np.ndarray:
    """Push per-scale gradients back to the histogram map.

    The cascade is sequential, so the gradient reaching s3 is the sum of the
    direct reads and the global average's contribution, and so on downward.
    """
    gs3 = grads.s3 + ops.global_avgpool_backward(grads.s_global, grads.s3.shape)
    gs2 = grads.s2 + ops.avgpool3_backward(gs3, grads.s2.shape, stride=2)
    gs1 = grads.s1 + ops.avgpool3_backward(gs2, grads.s1.shape, stride=2)
    return ops.avgpool3_backward(gs1, hist_map_shape, stride=1)


def zero_pyramid_grads(pyr: PyramidFeatures) -> PyramidFeatures:
    return PyramidFeatures(
        np.zeros_like(pyr.s1),
        np.zeros_like(pyr.s2),
        np.zeros_like(pyr.s3),
        np.zeros_like(pyr.s_global),
    )


def feature_channels(context_channels: int) -> int:
    return 3 + N_SCALES * context_channels


def assemble_features(pyr: PyramidFeatures, rgb: np.ndarray, rect: PatchRect) -> np.ndarray:
    """Concatenate pixel colors with all four context scales over a rect.

    Channel layout: [rgb, s1, s2, s3, s_global].  Coarser scales are read at
    index floor(coordinate / 2^k), the global vector is broadcast.
    """
    ops.check_nhwc(rgb, "rgb")
    n, h, w, _ = rgb.shape
    if pyr.s1.shape[:3] != (n, h, w):
        raise ConfigurationError(f"pyramid {pyr.s1.shape[:3]} does not match image {(n, h, w)}")
    rect.check_inside(h, w)
    ys = np.arange(rect.y, rect.y + rect.h)
    xs = np.arange(rect.x, rect.x + rect.w)
    rgb_part = rgb[:, rect.y : rect.y + rect.h, rect.x : rect.x + rect.w, :]
    s1_part = pyr.s1[:, rect.y : rect.y + rect.h, rect.x : rect.x + rect.w, :]
    s2_part = pyr.s2[:, (ys // 2)[:, None], (xs // 2)[None, :], :]
    s3_part = pyr.s3[:, (ys // 4)[:, None], (xs // 4)[None, :], :]
    sg_part = np.broadcast_to(pyr.s_global, (n, rect.h, rect.w, pyr.channels))
    return ops.concat_channels([rgb_part, s1_part, s2_part, s3_part, sg_part])


def assemble_backward(
    grad_features: np.ndarray,
    rect: PatchRect,
    grad_rgb: np.ndarray,
    grad_pyr: PyramidFeatures,
) -> None:
    """Scatter-accumulate feature gradients into image and pyramid buffers.

    Accumulates in place so that overlapping patches and repeated coarse-cell
    reads sum correctly; duplicate indices within one rect are handled by
    unbuffered adds.
    """
    c = grad_pyr.channels
    if grad_features.shape[3] != feature_channels(c):
        raise ConfigurationError(
            f"feature gradient has {grad_features.shape[3]} channels, expected {feature_channels(c)}"
        )
    rect.check_inside(grad_rgb.shape[1], grad_rgb.shape[2])
    parts = ops.concat_channels_backward(grad_features, [3, c, c, c, c])
    ys = np.arange(rect.y, rect.y + rect.h)
    xs = np.arange(rect.x, rect.x + rect.w)
    grad_rgb[:, rect.y : rect.y + rect.h, rect.x : rect.x + rect.w, :] += parts[0]
    grad_pyr.s1[:, rect.y : rect.y + rect.h, rect.x : rect.x + rect.w, :] += parts[1]
    np.add.at(grad_pyr.s2, (slice(None), (ys // 2)[:, None], (xs // 2)[None, :]), parts[2])
    np.add.at(grad_pyr.s3, (slice(None), (ys // 4)[:, None], (xs // 4)[None, :]), parts[3])
    grad_pyr.s_global += parts[4].sum(axis=(1, 2), keepdims=True)
