"""Dense 4-D tensor kernels with hand-derived backward passes.

Every array is laid out (batch, height, width, channel), C-contiguous row
major, float32 during training and float64 inside gradient checks.  Each
forward operation has a matching backward that is its exact adjoint; the
network composes these explicitly rather than relying on an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from renderpipe.errors import ConfigurationError, NumericalError


def check_nhwc(x: np.ndarray, name: str = "tensor") -> None:
    """Validate the (n, h, w, c) layout with every dimension at least 1."""
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ConfigurationError(f"{name} must be a 4-D (n, h, w, c) array, got {getattr(x, 'shape', None)}")
    if min(x.shape) < 1:
        raise ConfigurationError(f"{name} has an empty dimension: {x.shape}")


# ---------------------------------------------------------------------------
# Convolution


@dataclass
class ConvFilter:
    """2-D convolution weights: kernel (kh, kw, c_in, c_out) plus bias (c_out,)."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ConfigurationError(f"kernel must be (kh, kw, c_in, c_out), got {self.kernel.shape}")
        kh, kw = self.kernel.shape[:2]
        if kh not in (1, 3) or kw not in (1, 3):
            raise ConfigurationError(f"kernel sides must be 1 or 3, got {kh}x{kw}")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ConfigurationError(f"bias shape {self.bias.shape} does not match c_out {self.kernel.shape[3]}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ConfigurationError(f"padding must be 'same' or 'valid', got {self.padding!r}")

    @property
    def c_in(self) -> int:
        return self.kernel.shape[2]

    @property
    def c_out(self) -> int:
        return self.kernel.shape[3]


def _conv_geometry(h: int, w: int, f: ConvFilter) -> tuple[int, int, int, int]:
    """Output size and leading pad for one filter, ceil-mode for same padding."""
    kh, kw = f.kernel.shape[:2]
    s = f.stride
    if f.padding == "same":
        oh, ow = -(-h // s), -(-w // s)
        pad_h = max((oh - 1) * s + kh - h, 0)
        pad_w = max((ow - 1) * s + kw - w, 0)
        return oh, ow, pad_h // 2, pad_w // 2
    oh, ow = (h - kh) // s + 1, (w - kw) // s + 1
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"valid convolution of {kh}x{kw} does not fit input {h}x{w}")
    return oh, ow, 0, 0


def _pad_zero(x: np.ndarray, pt: int, pb: int, pl: int, pr: int) -> np.ndarray:
    if pt == pb == pl == pr == 0:
        return x
    return np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))


# Conv GEMMs run on fixed-height row blocks: BLAS may pick a different
# reduction kernel per matrix shape, so feeding it one constant shape keeps
# every pixel's rounding independent of how many pixels are evaluated
# together.  That is what makes patch-wise evaluation bit-identical to
# cropping a whole-image pass.
_GEMM_ROWS = 2048


def _matmul_rows(x2d: np.ndarray, w: np.ndarray) -> np.ndarray:
    r, k = x2d.shape
    pad = (-r) % _GEMM_ROWS
    if pad:
        x2d = np.concatenate([x2d, np.zeros((pad, k), dtype=x2d.dtype)])
    out = np.empty((x2d.shape[0], w.shape[1]), dtype=np.result_type(x2d, w))
    for i in range(0, x2d.shape[0], _GEMM_ROWS):
        np.matmul(x2d[i : i + _GEMM_ROWS], w, out=out[i : i + _GEMM_ROWS])
    return out[:r] if pad else out


def conv2d_forward(x: np.ndarray, f: ConvFilter) -> np.ndarray:
    """Cross-correlate x with the filter bank and add the bias.

    The accumulation runs tap by tap in a fixed (ki, kj) order with a single
    fixed-shape GEMM per tap, so every output element is reduced in the same
    order no matter how large the spatial extent is.
    """
    check_nhwc(x, "conv input")
    n, h, w, ci = x.shape
    if ci != f.c_in:
        raise ConfigurationError(f"input has {ci} channels, filter expects {f.c_in}")
    kh, kw = f.kernel.shape[:2]
    s = f.stride
    oh, ow, pt, pl = _conv_geometry(h, w, f)
    if f.padding == "same":
        pad_h = max((oh - 1) * s + kh - h, 0)
        pad_w = max((ow - 1) * s + kw - w, 0)
        xp = _pad_zero(x, pt, pad_h - pt, pl, pad_w - pl)
    else:
        xp = x
    acc = np.zeros((n * oh * ow, f.c_out), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            xv = xp[:, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s, :]
            acc += _matmul_rows(xv.reshape(-1, ci), f.kernel[ki, kj])
    acc += f.bias
    return acc.reshape(n, oh, ow, f.c_out)


def conv2d_backward(
    x: np.ndarray, f: ConvFilter, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of conv2d_forward: gradients for the input, kernel, and bias."""
    check_nhwc(x, "conv input")
    check_nhwc(grad_out, "conv grad_out")
    n, h, w, ci = x.shape
    kh, kw = f.kernel.shape[:2]
    s = f.stride
    oh, ow, pt, pl = _conv_geometry(h, w, f)
    if grad_out.shape != (n, oh, ow, f.c_out):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} does not match output {(n, oh, ow, f.c_out)}")
    if f.padding == "same":
        pad_h = max((oh - 1) * s + kh - h, 0)
        pad_w = max((ow - 1) * s + kw - w, 0)
        xp = _pad_zero(x, pt, pad_h - pt, pl, pad_w - pl)
    else:
        pad_h = pad_w = 0
        xp = x
    g2 = grad_out.reshape(-1, f.c_out)
    grad_bias = grad_out.sum(axis=(0, 1, 2))
    grad_kernel = np.zeros_like(f.kernel)
    grad_xp = np.zeros_like(xp)
    for ki in range(kh):
        for kj in range(kw):
            rows = slice(ki, ki + s * (oh - 1) + 1, s)
            cols = slice(kj, kj + s * (ow - 1) + 1, s)
            xv = xp[:, rows, cols, :].reshape(-1, ci)
            grad_kernel[ki, kj] = xv.T @ g2
            grad_xp[:, rows, cols, :] += (g2 @ f.kernel[ki, kj].T).reshape(n, oh, ow, ci)
    if f.padding == "same" and (pad_h or pad_w):
        grad_x = grad_xp[:, pt : pt + h, pl : pl + w, :]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_kernel, grad_bias


# ---------------------------------------------------------------------------
# Pooling


def _pool_geometry(h: int, w: int, stride: int) -> tuple[int, int]:
    if stride not in (1, 2):
        raise ConfigurationError(f"avgpool stride must be 1 or 2, got {stride}")
    return -(-h // stride), -(-w // stride)


def avgpool3_forward(x: np.ndarray, stride: int) -> np.ndarray:
    """3x3 average pooling with edge-replicated padding of one pixel.

    Every output is the plain mean of its nine taps; taps that fall outside
    the image read the replicated border value, so border mass is never
    diluted by zeros.
    """
    check_nhwc(x, "avgpool input")
    n, h, w, c = x.shape
    oh, ow = _pool_geometry(h, w, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros((n, oh, ow, c), dtype=x.dtype)
    s = stride
    for ki in range(3):
        for kj in range(3):
            acc += xp[:, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s, :]
    return acc / 9


def avgpool3_backward(grad_out: np.ndarray, input_shape: tuple[int, ...], stride: int) -> np.ndarray:
    """Adjoint of avgpool3_forward; replicated border taps accumulate."""
    check_nhwc(grad_out, "avgpool grad_out")
    n, h, w, c = input_shape
    oh, ow = _pool_geometry(h, w, stride)
    if grad_out.shape != (n, oh, ow, c):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} does not match output {(n, oh, ow, c)}")
    gxp = np.zeros((n, h + 2, w + 2, c), dtype=grad_out.dtype)
    g9 = grad_out / 9
    s = stride
    for ki in range(3):
        for kj in range(3):
            gxp[:, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s, :] += g9
    gx = np.ascontiguousarray(gxp[:, 1 : h + 1, :, :])
    gx[:, 0, :, :] += gxp[:, 0, :, :]
    gx[:, h - 1, :, :] += gxp[:, h + 1, :, :]
    out = np.ascontiguousarray(gx[:, :, 1 : w + 1, :])
    out[:, :, 0, :] += gx[:, :, 0, :]
    out[:, :, w - 1, :] += gx[:, :, w + 1, :]
    return out


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    """Mean over the full spatial extent, kept as a (n, 1, 1, c) map."""
    check_nhwc(x, "global pool input")
    # np.mean reduces pairwise, which bounds accumulation drift on large maps.
    return x.mean(axis=(1, 2), keepdims=True)


def global_avgpool_backward(grad_out: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = input_shape
    if grad_out.shape != (n, 1, 1, c):
        raise ConfigurationError(f"grad_out shape {grad_out.shape} does not match output {(n, 1, 1, c)}")
    grad = np.empty(input_shape, dtype=grad_out.dtype)
    grad[:] = grad_out / (h * w)
    return grad


# ---------------------------------------------------------------------------
# Pointwise and structural ops


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Subgradient 0 at the kink: only strictly positive inputs pass gradient."""
    return grad_out * (x > 0)


def concat_channels(parts: Sequence[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ConfigurationError("concat_channels needs at least one part")
    first = parts[0].shape[:3]
    for i, p in enumerate(parts):
        check_nhwc(p, f"concat part {i}")
        if p.shape[:3] != first:
            raise ConfigurationError(f"concat part {i} has spatial shape {p.shape[:3]}, expected {first}")
    return np.concatenate(parts, axis=3)


def concat_channels_backward(grad_out: np.ndarray, channel_counts: Sequence[int]) -> list[np.ndarray]:
    if grad_out.shape[3] != sum(channel_counts):
        raise ConfigurationError(
            f"grad_out has {grad_out.shape[3]} channels, parts sum to {sum(channel_counts)}"
        )
    splits = np.cumsum(channel_counts)[:-1]
    return [np.ascontiguousarray(g) for g in np.split(grad_out, splits, axis=3)]


def slice_patch(x: np.ndarray, y: int, x0: int, ph: int, pw: int) -> np.ndarray:
    check_nhwc(x, "slice input")
    _, h, w, _ = x.shape
    if y < 0 or x0 < 0 or y + ph > h or x0 + pw > w:
        raise IndexError(f"patch (y={y}, x={x0}, {ph}x{pw}) is out of bounds for {h}x{w}")
    return np.ascontiguousarray(x[:, y : y + ph, x0 : x0 + pw, :])


def slice_patch_backward(
    grad_out: np.ndarray, input_shape: tuple[int, ...], y: int, x0: int
) -> np.ndarray:
    n, h, w, c = input_shape
    _, ph, pw, _ = grad_out.shape
    if y < 0 or x0 < 0 or y + ph > h or x0 + pw > w:
        raise IndexError(f"patch (y={y}, x={x0}, {ph}x{pw}) is out of bounds for {h}x{w}")
    grad = np.zeros(input_shape, dtype=grad_out.dtype)
    grad[:, y : y + ph, x0 : x0 + pw, :] = grad_out
    return grad


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    tolerance: float
    n_checked: int
    n_excluded: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        out = (
            f"{self.name:<28s} {status:>4s}  max rel err {self.max_rel_err:.3e}"
            f"  (tol {self.tolerance:.0e}, {self.n_checked} coords"
        )
        if self.n_excluded:
            out += f", {self.n_excluded} near kinks skipped"
        out += ")"
        if not self.passed and self.worst:
            out += f"  worst at {self.worst}"
        return out


def _run_forward(forward: Callable, inputs: dict) -> tuple[np.ndarray, tuple]:
    res = forward(inputs)
    if isinstance(res, tuple):
        out, sig = res
        return np.asarray(out), tuple(sig)
    return np.asarray(res), ()


def _same_signature(a: tuple, b: tuple) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    name: str,
    forward: Callable[[dict], "np.ndarray | tuple[np.ndarray, tuple]"],
    backward: Callable[[dict, np.ndarray], dict],
    inputs: dict[str, np.ndarray],
    *,
    wrt: Iterable[str] | None = None,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
    max_checks_per_input: int = 0,
) -> GradCheckResult:
    """Compare an analytic backward pass against central finite differences.

    ``forward`` maps the input dict to an output array, optionally paired with
    a kink signature (a tuple of arrays encoding which side of every
    non-smooth point the evaluation landed on).  A coordinate whose +/- eps
    perturbations change the signature sits inside a kink neighborhood where
    finite differences are meaningless, so it is skipped and counted.

    The comparison reduces the output through a fixed random projection, so a
    single pair of forward calls checks one coordinate of one input.  The
    relative error uses max(|analytic|, |numeric|, 1) as denominator.
    """
    out0, sig0 = _run_forward(forward, inputs)
    if not np.all(np.isfinite(out0)):
        raise NumericalError(f"{name}: forward produced non-finite values")
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out0.shape)
    analytic = backward(inputs, proj.astype(out0.dtype, copy=False))
    names = list(wrt) if wrt is not None else list(analytic.keys())

    max_err = 0.0
    worst = ""
    checked = 0
    excluded = 0
    pick = np.random.default_rng(seed + 1)
    for key in names:
        x = inputs[key]
        g = np.asarray(analytic[key])
        if g.shape != x.shape:
            raise ConfigurationError(f"{name}: gradient for {key} has shape {g.shape}, input is {x.shape}")
        idxs = np.arange(x.size)
        if max_checks_per_input and x.size > max_checks_per_input:
            idxs = np.sort(pick.choice(x.size, size=max_checks_per_input, replace=False))
        for i in idxs:
            orig = x.flat[i]
            x.flat[i] = orig + eps
            out_p, sig_p = _run_forward(forward, inputs)
            x.flat[i] = orig - eps
            out_m, sig_m = _run_forward(forward, inputs)
            x.flat[i] = orig
            if not (_same_signature(sig0, sig_p) and _same_signature(sig0, sig_m)):
                excluded += 1
                continue
            sp = float(np.vdot(proj, out_p.astype(np.float64, copy=False)))
            sm = float(np.vdot(proj, out_m.astype(np.float64, copy=False)))
            num = (sp - sm) / (2 * eps)
            ana = float(g.flat[i])
            if not (np.isfinite(num) and np.isfinite(ana)):
                return GradCheckResult(name, float("inf"), tolerance, checked, excluded, f"{key}[{i}] non-finite")
            err = abs(ana - num) / max(abs(ana), abs(num), 1.0)
            checked += 1
            if err > max_err:
                max_err = err
                worst = f"{key}[{i}] analytic={ana:.6g} numeric={num:.6g}"
    return GradCheckResult(name, max_err, tolerance, checked, excluded, worst)
