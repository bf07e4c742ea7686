"""Patch-based training loop and PSNR evaluation.

Each optimizer step draws a few images, samples a set of square patches from
every one of them, runs the patch-wise forward/backward, and applies one
bias-corrected Adam update over the joint patch batch.  Context features are
always computed on the whole image, so the sampled patches see the same
global statistics the full-image pass would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import model
from .errors import ConfigurationError, NumericalError
from .pyramid import PatchRect

PSNR_CAP = 99.0
MIN_HALF_WIDTH = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_images: int = 4
    patches_per_image: int = 16
    patch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    direction: str = "raw_to_srgb"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_images < 1 or self.patches_per_image < 1:
            raise ConfigurationError("epochs, batch_images and patches_per_image must be >= 1")
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")
        if self.lr < 0.0:
            raise ConfigurationError("learning rate must be >= 0")
        if self.direction not in model.DIRECTIONS:
            raise ConfigurationError(f"direction must be one of {model.DIRECTIONS}, got {self.direction!r}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_images": self.batch_images,
            "patches_per_image": self.patches_per_image,
            "patch_size": self.patch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "seed": self.seed,
            "direction": self.direction,
        }


def sample_patches(
    rng: np.random.Generator, image_size: tuple[int, int], count: int = 16, size: int = 32
) -> list[PatchRect]:
    """Random patches whose coverage does not starve the image borders.

    Drawing origins uniformly over the valid range covers a corner pixel
    once per (h - size + 1)^2 draws versus size^2 for an interior pixel, a
    thousandfold gap that leaves borders untrained.  Virtual origins drawn
    from the widened range [1 - size, h - 1] and clamped into the valid
    range put mass size on every border pixel; interior pixels receive at
    most about twice that (the clamp concentrates on the two extreme
    origins, whose patches span the first and last size pixels).  Overlap
    is allowed.
    """
    h, w = image_size
    if h < size or w < size:
        raise ConfigurationError(f"image {h}x{w} is smaller than the {size}x{size} patch size")
    ys = np.clip(rng.integers(1 - size, h, count), 0, h - size)
    xs = np.clip(rng.integers(1 - size, w, count), 0, w - size)
    return [PatchRect(int(y), int(x), size, size) for y, x in zip(ys, xs)]


def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared error summed within each batch entry, averaged over entries.

    The gradient 2*(pred - target)/n is the exact adjoint under that
    normalization, with n the number of batch entries.
    """
    if pred.shape != target.shape:
        raise ConfigurationError(f"pred shape {pred.shape} does not match target shape {target.shape}")
    n = pred.shape[0]
    diff = pred - target
    d64 = diff.astype(np.float64)
    loss = float(np.vdot(d64, d64)) / n
    grad = diff * (2.0 / n)
    return loss, grad


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam(params: model.ModelParams) -> AdamState:
    named = params.named_arrays()
    return AdamState(
        m={k: np.zeros_like(a) for k, a in named.items()},
        v={k: np.zeros_like(a) for k, a in named.items()},
    )


def adam_step(
    params: model.ModelParams, grads: model.Gradients, state: AdamState, cfg: TrainConfig
) -> model.ModelParams:
    """One bias-corrected Adam update, applied in place.

    Histogram half-widths are clamped from below afterwards so a bin can
    narrow under training pressure but never collapse to zero width.
    """
    gnamed = grads.named_arrays()
    bad = [k for k, g in gnamed.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericalError("non-finite gradients for " + ", ".join(bad))
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.named_arrays().items():
        g = gnamed[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * np.square(g)
        denom = np.sqrt(v / c2)
        denom += cfg.eps
        p -= (cfg.lr / c1) * m / denom
    if params.hist is not None:
        np.maximum(params.hist.half_widths, MIN_HALF_WIDTH, out=params.hist.half_widths)
    return params


# ---------------------------------------------------------------------------
# Epoch loop


def split_train_val(count: int, val_frac: float = 0.2, seed: int = 0) -> tuple[list[int], list[int]]:
    """Shuffled index split; the validation share rounds to whole images and
    always leaves at least one training image."""
    if count < 1:
        raise ConfigurationError("cannot split an empty dataset")
    if not 0.0 <= val_frac < 1.0:
        raise ConfigurationError(f"val_frac must be in [0, 1), got {val_frac}")
    perm = np.random.default_rng(seed).permutation(count)
    n_val = min(int(round(count * val_frac)), count - 1)
    val = sorted(int(i) for i in perm[:n_val])
    train = sorted(int(i) for i in perm[n_val:])
    return train, val


def dataset_mse(params: model.ModelParams, pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Per-value mean squared error of whole-image predictions, averaged over
    the dataset."""
    if not pairs:
        raise ConfigurationError("dataset is empty")
    total = 0.0
    for inp, tgt in pairs:
        pred = model.forward_full(params, inp)
        d = pred.astype(np.float64) - tgt.astype(np.float64)
        total += float(np.mean(d * d))
    return total / len(pairs)


@dataclass
class TrainResult:
    params: model.ModelParams
    best_params: model.ModelParams
    best_epoch: int
    best_val: float
    history: list[tuple[int, float, float]]


def train(
    params: model.ModelParams,
    train_pairs: list[tuple[np.ndarray, np.ndarray]],
    val_pairs: list[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    checkpoint_path=None,
) -> TrainResult:
    """Run the epoch loop and return final params, best-validation params,
    and the loss history.

    Pairs are (input, target) tensors already oriented for the model's
    direction.  An empty validation list falls back to the training images so
    best-checkpoint selection stays meaningful on small overfit runs.  Both
    history columns are per-value mean squared errors, putting the training
    curve (sampled patches) and the validation curve (whole images) on the
    same scale.  When ``checkpoint_path`` is given, every new best is saved
    there immediately, so an interrupted run keeps its best model.
    """
    if not train_pairs:
        raise ConfigurationError("training split is empty")
    if cfg.direction != params.direction:
        raise ConfigurationError(
            f"training direction {cfg.direction!r} does not match the model's {params.direction!r}"
        )
    val_set = val_pairs if val_pairs else train_pairs
    rng = np.random.default_rng(cfg.seed)
    state = init_adam(params)
    values_per_patch = float(cfg.patch_size * cfg.patch_size * 3)
    history: list[tuple[int, float, float]] = []
    best_val = math.inf
    best_epoch = -1
    best_params = params.copy()
    n = len(train_pairs)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_images):
            batch = perm[start : start + cfg.batch_images]
            grads = model.zero_gradients(params)
            step_loss = 0.0
            for idx in batch:
                inp, tgt = train_pairs[idx]
                rects = sample_patches(rng, inp.shape[1:3], cfg.patches_per_image, cfg.patch_size)
                preds, cache = model.forward_patchwise(params, inp, rects)
                targets = np.stack([tgt[0, r.y : r.y + r.h, r.x : r.x + r.w, :] for r in rects])
                loss, gpred = l2_loss(preds, targets)
                step_loss += loss / len(batch)
                gpred *= 1.0 / len(batch)
                grads.iadd(model.backward(params, cache, gpred))
            step = start // cfg.batch_images
            if not math.isfinite(step_loss):
                raise NumericalError(f"training loss became non-finite at epoch {epoch}, step {step}")
            try:
                adam_step(params, grads, state, cfg)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, step {step}: {exc}") from exc
            epoch_loss += step_loss * len(batch) / n
        val_loss = dataset_mse(params, val_set)
        history.append((epoch, epoch_loss / values_per_patch, val_loss))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = params.copy()
            if checkpoint_path is not None:
                ckpt.save_checkpoint(checkpoint_path, best_params)
    return TrainResult(params, best_params, best_epoch, best_val, history)


# ---------------------------------------------------------------------------
# Evaluation


def compute_psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Fidelity in dB on clamped [0, 1] predictions; 10*log10(1/MSE), capped
    at 99 dB for exact matches."""
    p = np.clip(pred.astype(np.float64), 0.0, 1.0)
    mse = float(np.mean((p - target.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class EvalReport:
    ids: list[str]
    psnrs: list[float]

    @property
    def mean(self) -> float:
        # Summing in sorted order makes the statistic bitwise independent of
        # dataset ordering, not just equal up to rounding.
        return float(np.mean(np.sort(self.psnrs)))

    @property
    def median(self) -> float:
        return float(np.median(self.psnrs))

    @property
    def minimum(self) -> float:
        return float(np.min(self.psnrs))

    @property
    def maximum(self) -> float:
        return float(np.max(self.psnrs))

    def stat_rows(self) -> list[tuple[str, float]]:
        return [("Mean", self.mean), ("Median", self.median), ("Min", self.minimum), ("Max", self.maximum)]


def evaluate(
    params: model.ModelParams,
    pairs: list[tuple[np.ndarray, np.ndarray]],
    ids: list[str] | None = None,
) -> EvalReport:
    """Whole-image PSNR per pair; statistics are recomputed on demand from
    the per-image list, so they are invariant to dataset ordering."""
    if not pairs:
        raise ConfigurationError("evaluation set is empty")
    if ids is None:
        ids = [f"img_{i:03d}" for i in range(len(pairs))]
    if len(ids) != len(pairs):
        raise ConfigurationError("ids and pairs must have the same length")
    psnrs = [compute_psnr(model.forward_full(params, inp), tgt) for inp, tgt in pairs]
    return EvalReport(list(ids), psnrs)
