"""Learned scene-dependent camera color rendering.

A small numpy library plus CLI that models the color rendering applied by a
camera between white-balanced RAW and the final sRGB output.  The mapping is
scene dependent, so every pixel is predicted from its own color together with
multi-scale color histogram context pooled over the whole image.  Both the
forward direction (RAW to sRGB) and the inverse (sRGB back to RAW) are trained
the same way.  All gradients are derived and composed by hand; there is no
autodiff framework underneath.
"""

from renderpipe.errors import ConfigurationError, DataError, NumericalError, RenderPipeError

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "NumericalError",
    "RenderPipeError",
    "__version__",
]
