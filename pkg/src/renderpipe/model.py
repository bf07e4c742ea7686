"""The rendering network and its pixel-wise baselines.

The full model predicts each output pixel from its own color concatenated
with four scales of pooled histogram context.  The head is a 1x1 mixing
convolution followed by two 3x3 convolutions, with ReLU after all but the
last.  Training runs patch-wise: context is computed once over the whole
image, then only small patches flow through the head.  Patch evaluation is
bit-identical to cropping the full-image result because every patch carries
an apron sized to the head's receptive radius, and positions outside the
image are forced to zero after every layer exactly like the zero padding the
full-image pass sees.

Baselines share the head machinery: a pixel-wise MLP (three 1x1
convolutions) and a plain five-layer 3x3 convolutional network, both without
any context input.

Backward passes are composed explicitly in reverse order; nothing here
builds an autodiff graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from renderpipe import colorhist as ch
from renderpipe import ops
from renderpipe import pyramid as pyr
from renderpipe.errors import ConfigurationError, NumericalError

DIRECTIONS = ("raw_to_srgb", "srgb_to_raw")


@dataclass
class NetworkConfig:
    """Configuration of the full context-aware model."""

    direction: str
    bins: int = 6
    hidden_channels: int = 64
    context_frozen: bool = False
    multiplicative_width: bool = False

    kind = "full"

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.bins < 2 or self.hidden_channels < 1:
            raise ConfigurationError("bins must be >= 2 and hidden_channels >= 1")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "direction": self.direction,
            "bins": self.bins,
            "hidden_channels": self.hidden_channels,
            "context_frozen": self.context_frozen,
            "multiplicative_width": self.multiplicative_width,
        }


@dataclass
class BaselineConfig:
    """Configuration of a context-free baseline network."""

    kind: str
    direction: str
    hidden_channels: int = 64

    def __post_init__(self):
        if self.kind not in ("mlp", "srcnn"):
            raise ConfigurationError(f"baseline kind must be 'mlp' or 'srcnn', got {self.kind!r}")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "direction": self.direction, "hidden_channels": self.hidden_channels}


def config_from_dict(d: dict) -> "NetworkConfig | BaselineConfig":
    kind = d.get("kind", "full")
    if kind == "full":
        return NetworkConfig(
            direction=d["direction"],
            bins=int(d.get("bins", 6)),
            hidden_channels=int(d.get("hidden_channels", 64)),
            context_frozen=bool(d.get("context_frozen", False)),
            multiplicative_width=bool(d.get("multiplicative_width", False)),
        )
    return BaselineConfig(kind=kind, direction=d["direction"], hidden_channels=int(d.get("hidden_channels", 64)))


@dataclass
class ModelParams:
    """All trainable arrays of one network."""

    config: "NetworkConfig | BaselineConfig"
    convs: list[ops.ConvFilter]
    hist: ch.HistogramParams | None = None

    @property
    def kind(self) -> str:
        return self.config.kind

    @property
    def direction(self) -> str:
        return self.config.direction

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Stable name-to-array view used by the optimizer and checkpoints."""
        out: dict[str, np.ndarray] = {}
        if self.hist is not None:
            out["hist.centers"] = self.hist.centers
            out["hist.half_widths"] = self.hist.half_widths
        for i, f in enumerate(self.convs):
            out[f"conv{i}.kernel"] = f.kernel
            out[f"conv{i}.bias"] = f.bias
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(
            config=self.config,
            convs=[ops.ConvFilter(f.kernel.copy(), f.bias.copy(), f.stride, f.padding) for f in self.convs],
            hist=self.hist.copy() if self.hist is not None else None,
        )


@dataclass
class Gradients:
    """Parameter gradients mirroring ModelParams, plus the input gradient."""

    conv_grads: list[tuple[np.ndarray, np.ndarray]]
    hist_centers: np.ndarray | None = None
    hist_half_widths: np.ndarray | None = None
    image: np.ndarray | None = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        if self.hist_centers is not None:
            out["hist.centers"] = self.hist_centers
            out["hist.half_widths"] = self.hist_half_widths
        for i, (gk, gb) in enumerate(self.conv_grads):
            out[f"conv{i}.kernel"] = gk
            out[f"conv{i}.bias"] = gb
        return out

    def iadd(self, other: "Gradients") -> None:
        for i, (gk, gb) in enumerate(other.conv_grads):
            self.conv_grads[i][0].__iadd__(gk)
            self.conv_grads[i][1].__iadd__(gb)
        if self.hist_centers is not None:
            self.hist_centers += other.hist_centers
            self.hist_half_widths += other.hist_half_widths

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.named_arrays().values())


def _kaiming_uniform(rng: np.random.Generator, kh: int, kw: int, ci: int, co: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (kh * kw * ci))
    return rng.uniform(-bound, bound, (kh, kw, ci, co)).astype(dtype)


def _conv_stack(config) -> list[tuple[int, int, int]]:
    """(kernel side, c_in, c_out) for each layer of the given network."""
    hidden = config.hidden_channels
    if config.kind == "full":
        c_feat = pyr.feature_channels(ch.N_VALUE_CHANNELS * config.bins)
        return [(1, c_feat, hidden), (3, hidden, hidden), (3, hidden, 3)]
    if config.kind == "mlp":
        return [(1, 3, hidden), (1, hidden, hidden), (1, hidden, 3)]
    return [(3, 3, hidden), (3, hidden, hidden), (3, hidden, hidden), (3, hidden, hidden), (3, hidden, 3)]


def init_params(config, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform kernels, zero biases, evenly spread histogram bins."""
    convs = [
        ops.ConvFilter(_kaiming_uniform(rng, k, k, ci, co, dtype), np.zeros(co, dtype=dtype))
        for k, ci, co in _conv_stack(config)
    ]
    hist = None
    if config.kind == "full":
        hist = ch.init_default(config.bins, dtype=dtype)
        hist.multiplicative_width = config.multiplicative_width
    return ModelParams(config=config, convs=convs, hist=hist)


def head_margin(params: ModelParams) -> int:
    """Receptive radius of the head: apron pixels needed around a patch."""
    return sum((f.kernel.shape[0] - 1) // 2 for f in params.convs)


# ---------------------------------------------------------------------------
# Forward passes


@dataclass
class ContextCache:
    lrg: np.ndarray
    hist_map: np.ndarray
    pyramid: pyr.PyramidFeatures


def compute_context(params: ModelParams, image: np.ndarray) -> ContextCache:
    """Whole-image context: decoupled values, histogram votes, pooled pyramid."""
    if params.kind != "full":
        raise ConfigurationError(f"{params.kind} model has no context stage")
    lrg = ch.rgb_to_lrg(image)
    hist_map = ch.hist_forward(lrg, params.hist)
    return ContextCache(lrg, hist_map, pyr.build_pyramid(hist_map))


def _validate_image(image: np.ndarray) -> None:
    ops.check_nhwc(image, "image")
    if image.shape[3] != 3:
        raise ConfigurationError(f"image must have 3 channels, got {image.shape[3]}")
    if not np.all(np.isfinite(image)):
        raise NumericalError("image contains non-finite values")


def _head_forward(convs, x, mask=None):
    """Run the conv stack with ReLU between layers.

    ``mask`` marks which positions of a patch canvas lie inside the source
    image; positions outside are forced back to zero after every layer so a
    later 3x3 tap reads exactly the zero padding the full-image pass would.
    Returns the prediction, per-layer inputs, and pre-activations.
    """
    inputs = []
    preacts = []
    h = x
    for i, f in enumerate(convs):
        inputs.append(h)
        a = ops.conv2d_forward(h, f)
        preacts.append(a)
        if i < len(convs) - 1:
            h = ops.relu_forward(a)
            if mask is not None:
                h = h * mask
    return preacts[-1], inputs, preacts


def _head_backward(convs, inputs, preacts, grad_out, mask=None):
    g = grad_out
    conv_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(convs)  # type: ignore[list-item]
    for i in range(len(convs) - 1, -1, -1):
        gx, gk, gb = ops.conv2d_backward(inputs[i], convs[i], g)
        conv_grads[i] = (gk, gb)
        if i > 0:
            if mask is not None:
                gx = gx * mask
            g = ops.relu_backward(preacts[i - 1], gx)
    return gx, conv_grads


def forward_full(params: ModelParams, image: np.ndarray, *, pyramid_edit=None) -> np.ndarray:
    """Predict the whole image in one pass.

    ``pyramid_edit`` optionally rewrites the pooled context before the head
    runs; the histogram swap analysis uses it to substitute the global
    vector of another image.
    """
    _validate_image(image)
    if params.kind == "full":
        ctx = compute_context(params, image)
        p = ctx.pyramid if pyramid_edit is None else pyramid_edit(ctx.pyramid)
        rect = pyr.PatchRect(0, 0, image.shape[1], image.shape[2])
        x = pyr.assemble_features(p, image, rect)
    else:
        x = image
    out, _, _ = _head_forward(params.convs, x)
    return out


def forward_baseline(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Whole-image prediction for a context-free baseline network."""
    if params.kind == "full":
        raise ConfigurationError("forward_baseline expects an mlp or srcnn model")
    return forward_full(params, image)


@dataclass
class PatchCache:
    """Everything backward() needs to replay one patch-wise forward pass."""

    image: np.ndarray
    rects: list[pyr.PatchRect]
    margin: int
    regions: list[tuple[int, int, int, int, int, int, int, int]]
    mask: "np.ndarray | None"
    head_inputs: list[np.ndarray]
    head_preacts: list[np.ndarray]
    context: "ContextCache | None"


def forward_patchwise(
    params: ModelParams, image: np.ndarray, rects: list[pyr.PatchRect]
) -> tuple[np.ndarray, PatchCache]:
    """Predict a batch of patches of one image, bit-identical to cropping
    forward_full at the same rectangles.

    Context is computed once over the whole image.  Each patch canvas is the
    rectangle expanded by the head's receptive radius; canvas positions that
    fall outside the image stay zero throughout.
    """
    _validate_image(image)
    if image.shape[0] != 1:
        raise ConfigurationError("patch-wise forward expects a single image (batch size 1)")
    if not rects:
        raise ConfigurationError("need at least one patch rect")
    ph, pw = rects[0].h, rects[0].w
    _, h, w, _ = image.shape
    for r in rects:
        if (r.h, r.w) != (ph, pw):
            raise ConfigurationError("all patches in one batch must share a size")
        r.check_inside(h, w)

    ctx = compute_context(params, image) if params.kind == "full" else None
    m = head_margin(params)
    ch_in = params.convs[0].c_in
    canvases = np.zeros((len(rects), ph + 2 * m, pw + 2 * m, ch_in), dtype=image.dtype)
    needs_mask = False
    regions = []
    for k, r in enumerate(rects):
        gy0, gx0 = r.y - m, r.x - m
        iy0, iy1 = max(gy0, 0), min(r.y + r.h + m, h)
        ix0, ix1 = max(gx0, 0), min(r.x + r.w + m, w)
        cy0, cx0 = iy0 - gy0, ix0 - gx0
        cy1, cx1 = cy0 + (iy1 - iy0), cx0 + (ix1 - ix0)
        regions.append((iy0, iy1, ix0, ix1, cy0, cy1, cx0, cx1))
        if (cy0, cx0) != (0, 0) or (cy1, cx1) != canvases.shape[1:3]:
            needs_mask = True
        sub_rect = pyr.PatchRect(iy0, ix0, iy1 - iy0, ix1 - ix0)
        if params.kind == "full":
            sub = pyr.assemble_features(ctx.pyramid, image, sub_rect)
        else:
            sub = image[:, iy0:iy1, ix0:ix1, :]
        canvases[k, cy0:cy1, cx0:cx1, :] = sub[0]

    mask = None
    if needs_mask and m > 0:
        mask = np.zeros((len(rects), ph + 2 * m, pw + 2 * m, 1), dtype=image.dtype)
        for k, (_, _, _, _, cy0, cy1, cx0, cx1) in enumerate(regions):
            mask[k, cy0:cy1, cx0:cx1, 0] = 1.0

    out, inputs, preacts = _head_forward(params.convs, canvases, mask)
    preds = np.ascontiguousarray(out[:, m : m + ph, m : m + pw, :])
    cache = PatchCache(image, list(rects), m, regions, mask, inputs, preacts, ctx)
    return preds, cache


def backward(params: ModelParams, cache: PatchCache, grad_preds: np.ndarray) -> Gradients:
    """Hand-composed adjoint of forward_patchwise.

    Head gradients flow back through the assembly scatter, the pooling
    cascade, the histogram layer, and the color decoupling; with
    context_frozen the histogram parameter gradients are zeroed after the
    fact so the context stays fixed while gradients still reach the image.
    """
    m = cache.margin
    rects = cache.rects
    ph, pw = rects[0].h, rects[0].w
    n_p, sh, sw, _ = cache.head_inputs[0].shape
    if grad_preds.shape != (n_p, ph, pw, 3):
        raise ConfigurationError(f"grad_preds shape {grad_preds.shape} does not match patches")
    g_canvas_out = np.zeros((n_p, sh, sw, 3), dtype=grad_preds.dtype)
    g_canvas_out[:, m : m + ph, m : m + pw, :] = grad_preds
    g_feats, conv_grads = _head_backward(
        params.convs, cache.head_inputs, cache.head_preacts, g_canvas_out, cache.mask
    )

    grad_image = np.zeros_like(cache.image)
    if params.kind == "full":
        ctx = cache.context
        gp = pyr.zero_pyramid_grads(ctx.pyramid)
        for k, (iy0, iy1, ix0, ix1, cy0, cy1, cx0, cx1) in enumerate(cache.regions):
            sub = g_feats[k : k + 1, cy0:cy1, cx0:cx1, :]
            pyr.assemble_backward(sub, pyr.PatchRect(iy0, ix0, iy1 - iy0, ix1 - ix0), grad_image, gp)
        ghmap = pyr.pyramid_backward(gp, ctx.hist_map.shape)
        glrg, gc, gw = ch.hist_backward(ctx.lrg, params.hist, ghmap)
        grad_image += ch.rgb_to_lrg_backward(cache.image, glrg)
        if params.config.context_frozen:
            gc = np.zeros_like(gc)
            gw = np.zeros_like(gw)
        return Gradients(conv_grads=conv_grads, hist_centers=gc, hist_half_widths=gw, image=grad_image)

    for k, (iy0, iy1, ix0, ix1, cy0, cy1, cx0, cx1) in enumerate(cache.regions):
        grad_image[0, iy0:iy1, ix0:ix1, :] += g_feats[k, cy0:cy1, cx0:cx1, :]
    return Gradients(conv_grads=conv_grads, image=grad_image)


def zero_gradients(params: ModelParams) -> Gradients:
    """A zero-filled gradient holder matching the parameter shapes."""
    conv_grads = [(np.zeros_like(f.kernel), np.zeros_like(f.bias)) for f in params.convs]
    if params.hist is not None:
        return Gradients(
            conv_grads=conv_grads,
            hist_centers=np.zeros_like(params.hist.centers),
            hist_half_widths=np.zeros_like(params.hist.half_widths),
        )
    return Gradients(conv_grads=conv_grads)


def kink_signature(params: ModelParams, cache: PatchCache) -> tuple:
    """Arrays identifying which side of every non-smooth point a forward pass
    landed on; used by gradient checks to skip kink-straddling coordinates."""
    sig = []
    for a in cache.head_preacts[:-1]:
        s = a > 0
        if cache.mask is not None:
            s = s & (cache.mask > 0)
        sig.append(s)
    if params.kind == "full":
        delta = cache.context.lrg[..., :, None] - params.hist.centers
        if params.hist.multiplicative_width:
            support = np.abs(delta) * params.hist.half_widths < 1.0
        else:
            support = np.abs(delta) < params.hist.half_widths
        sig.append(np.sign(delta))
        sig.append(support)
    return tuple(sig)
