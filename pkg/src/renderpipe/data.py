"""Dataset plumbing and analysis transforms.

Covers the manifest format, 16-bit/8-bit PNG image I/O, white balancing,
resize-and-crop preprocessing, a procedural generator of linear/rendered
image pairs whose rendering depends on global scene statistics, and the
global-histogram swap used to probe what a trained model learned.
"""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import model
from . import pyramid as pyr
from .errors import ConfigurationError, DataError

MANIFEST_FIELDS = ("id", "raw_path", "srgb_path", "wb_r", "wb_g", "wb_b")


# ---------------------------------------------------------------------------
# Manifest


@dataclass
class PairRecord:
    """One manifest row; paths are kept exactly as written in the file and
    resolved against the manifest's directory on demand."""

    id: str
    raw_path: str
    srgb_path: str
    wb_gains: tuple[float, float, float]
    root: str = field(default="", compare=False)

    def raw_abspath(self) -> str:
        return os.path.normpath(os.path.join(self.root, self.raw_path))

    def srgb_abspath(self) -> str:
        return os.path.normpath(os.path.join(self.root, self.srgb_path))


def load_manifest(path) -> list[PairRecord]:
    path = os.fspath(path)
    root = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != list(MANIFEST_FIELDS):
        raise DataError(f"manifest {path} must start with the header {','.join(MANIFEST_FIELDS)}")

    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(MANIFEST_FIELDS):
            raise DataError(f"manifest {path} line {lineno}: expected {len(MANIFEST_FIELDS)} fields, got {len(row)}")
        gains = []
        for name, cell in zip(MANIFEST_FIELDS[3:], row[3:]):
            try:
                g = float(cell)
            except ValueError:
                raise DataError(f"manifest {path} line {lineno}: field {name} is not a number: {cell.strip()!r}")
            if not np.isfinite(g) or g <= 0:
                raise DataError(f"manifest {path} line {lineno}: field {name} must be finite and positive, got {g}")
            gains.append(g)
        rec = PairRecord(row[0].strip(), row[1].strip(), row[2].strip(), tuple(gains), root=root)
        for p in (rec.raw_abspath(), rec.srgb_abspath()):
            if not os.path.isfile(p):
                raise DataError(f"manifest {path} line {lineno}: missing file {p}")
        records.append(rec)
    return records


def save_manifest(path, records: list[PairRecord]) -> None:
    path = os.fspath(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            writer.writerow([r.id, r.raw_path, r.srgb_path, repr(r.wb_gains[0]), repr(r.wb_gains[1]), repr(r.wb_gains[2])])


# ---------------------------------------------------------------------------
# Image files


def read_image(path) -> np.ndarray:
    """PNG file to a float32 (h, w, 3) array in [0, 1], RGB channel order."""
    path = os.fspath(path)
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {path}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"image {path} must have exactly 3 channels")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise DataError(f"image {path} has unsupported dtype {img.dtype}")
    return np.ascontiguousarray(img[:, :, ::-1]).astype(np.float32) / np.float32(scale)


def write_image(path, img: np.ndarray, bits: int) -> None:
    """Store a float [0, 1] RGB image as an 8- or 16-bit PNG."""
    path = os.fspath(path)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ConfigurationError(f"expected an (h, w, 3) image, got shape {img.shape}")
    if bits == 8:
        q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    elif bits == 16:
        q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    else:
        raise ConfigurationError(f"bit depth must be 8 or 16, got {bits}")
    if not cv2.imwrite(path, np.ascontiguousarray(q[:, :, ::-1])):
        raise DataError(f"cannot write image {path}")


def image_bits(path) -> int:
    """Stored bit depth of a PNG file, without keeping the pixels."""
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"cannot read image {os.fspath(path)}")
    return 16 if img.dtype == np.uint16 else 8


# ---------------------------------------------------------------------------
# Pairs and preprocessing


@dataclass
class ImagePair:
    id: str
    raw: np.ndarray
    srgb: np.ndarray
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)


def apply_white_balance(raw: np.ndarray, gains) -> np.ndarray:
    """Channelwise gains followed by renormalization to max 1.

    With unit gains on an image that already attains 1.0 this is bitwise a
    no-op, so generated datasets survive the loading path unchanged.
    """
    g = np.asarray(gains, dtype=raw.dtype)
    if g.shape != (3,) or not np.all(np.isfinite(g)) or np.any(g <= 0):
        raise ConfigurationError(f"white balance gains must be 3 positive finite values, got {gains}")
    out = raw * g
    m = float(out.max())
    if m > 0:
        out = out / out.dtype.type(m)
    return out


def load_pair(record: PairRecord, *, white_balance: bool = True) -> ImagePair:
    raw = read_image(record.raw_abspath())
    srgb = read_image(record.srgb_abspath())
    if raw.shape != srgb.shape:
        raise DataError(
            f"pair {record.id}: raw {raw.shape[:2]} and srgb {srgb.shape[:2]} dimensions differ"
        )
    if white_balance:
        raw = apply_white_balance(raw, record.wb_gains)
    return ImagePair(record.id, raw, srgb, record.wb_gains)


def _resize_short_side(img: np.ndarray, target: int) -> np.ndarray:
    h, w = img.shape[:2]
    if min(h, w) == target:
        return img
    if h <= w:
        nh, nw = target, int(round(w * target / h))
    else:
        nh, nw = int(round(h * target / w)), target
    return cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR)


def preprocess(pair: ImagePair, target: int = 512) -> ImagePair | None:
    """Bilinear downsize of the short side to ``target`` followed by a center
    crop, identically on both images.  Too-small images are skipped with a
    warning rather than upsampled."""
    h, w = pair.raw.shape[:2]
    if min(h, w) < target:
        warnings.warn(f"skipping pair {pair.id}: {h}x{w} is smaller than the {target} crop")
        return None
    raw = _resize_short_side(pair.raw, target)
    srgb = _resize_short_side(pair.srgb, target)
    y0 = (raw.shape[0] - target) // 2
    x0 = (raw.shape[1] - target) // 2
    raw = np.ascontiguousarray(raw[y0 : y0 + target, x0 : x0 + target])
    srgb = np.ascontiguousarray(srgb[y0 : y0 + target, x0 : x0 + target])
    return ImagePair(pair.id, raw, srgb, pair.wb_gains)


def oriented_tensors(pair: ImagePair, direction: str) -> tuple[np.ndarray, np.ndarray]:
    """(input, target) tensors with the batch axis, oriented for a model
    direction."""
    if direction not in model.DIRECTIONS:
        raise ConfigurationError(f"direction must be one of {model.DIRECTIONS}, got {direction!r}")
    inp, tgt = (pair.raw, pair.srgb) if direction == "raw_to_srgb" else (pair.srgb, pair.raw)
    return inp[None], tgt[None]


# ---------------------------------------------------------------------------
# Procedural pair generator

ARCHETYPES = ("low", "mid", "high", "bimodal")


@dataclass
class SynthConfig:
    count: int = 8
    size: int = 128
    seed: int = 0
    contrast_strength: float = 0.8
    saturation_strength: float = 0.5
    gamma: float = 1.0 / 2.2
    local_radius: int = 8

    def __post_init__(self):
        if self.count < 1 or self.size < 16:
            raise ConfigurationError("count must be >= 1 and size >= 16")
        if self.contrast_strength < 0 or self.saturation_strength < 0:
            raise ConfigurationError("strengths must be >= 0")
        if self.gamma <= 0 or self.local_radius < 0:
            raise ConfigurationError("gamma must be > 0 and local_radius >= 0")

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "size": self.size,
            "seed": self.seed,
            "contrast_strength": self.contrast_strength,
            "saturation_strength": self.saturation_strength,
            "gamma": self.gamma,
            "local_radius": self.local_radius,
        }


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    # Bilinear upsampling of a coarse random grid: smooth structure whose
    # spatial scale is set by the cell count.
    coarse = rng.random((cells, cells)).astype(np.float32)
    return cv2.resize(coarse, (size, size), interpolation=cv2.INTER_LINEAR)


def _octave_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    acc = np.zeros((size, size), np.float32)
    amp, total = 1.0, 0.0
    for cells in (4, 8, 16, 32):
        acc += np.float32(amp) * _value_noise(rng, size, cells)
        total += amp
        amp *= 0.5
    return acc / np.float32(total)


def generate_raw(rng: np.random.Generator, size: int, archetype: str = "mid") -> np.ndarray:
    """One linear scene: smooth fields, a gradient, soft color blobs, flat
    patches, exposure shaped by the archetype, plus small specular spots that
    pin the maximum at exactly 1."""
    if archetype not in ARCHETYPES:
        raise ConfigurationError(f"archetype must be one of {ARCHETYPES}, got {archetype!r}")
    grid = np.linspace(0.0, 1.0, size, dtype=np.float32)
    yy, xx = np.meshgrid(grid, grid, indexing="ij")

    base = _octave_noise(rng, size)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(float(ramp.max() - ramp.min()), 1e-9)
    gw = rng.uniform(0.0, 0.5)
    luma = (1.0 - gw) * base + gw * ramp

    tint = np.stack([_value_noise(rng, size, 4) for _ in range(3)], axis=-1)
    tint -= tint.mean(axis=-1, keepdims=True)
    img = luma[..., None] + np.float32(0.25) * tint

    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0.0, 1.0, 2)
        r = rng.uniform(0.05, 0.25)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / np.float32(2.0 * r * r))
        a = (np.float32(rng.uniform(0.3, 0.8)) * w)[..., None]
        img = img * (1.0 - a) + a * rng.uniform(0.0, 1.0, 3).astype(np.float32)

    for _ in range(int(rng.integers(0, 3))):
        hh = int(rng.integers(6, max(7, size // 4)))
        ww = int(rng.integers(6, max(7, size // 4)))
        y0 = int(rng.integers(0, size - hh))
        x0 = int(rng.integers(0, size - ww))
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        img[y0 : y0 + hh, x0 : x0 + ww] = 0.3 * img[y0 : y0 + hh, x0 : x0 + ww] + 0.7 * color

    img = np.clip(img, 0.0, 1.0)
    # The same monotone curve on every channel shifts the exposure without
    # disturbing chroma ordering.  Exponents are tuned so the archetypes,
    # seen after display gamma, really do spread from shadow-heavy to
    # highlight-heavy: linear 0.5 lands near display 0.35 for "low" but 0.93
    # for "high".
    if archetype == "low":
        img = img ** np.float32(rng.uniform(3.0, 4.5))
    elif archetype == "high":
        img = img ** np.float32(rng.uniform(0.33, 0.5))
    elif archetype == "bimodal":
        t = 2.0 * img - 1.0
        img = 0.5 + 0.5 * np.sign(t) * np.abs(t) ** np.float32(rng.uniform(0.25, 0.4))

    py = px = 0
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.01, 0.03)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / np.float32(2.0 * r * r))
        img = np.maximum(img, w[..., None])
        py, px = int(round(cy * (size - 1))), int(round(cx * (size - 1)))
    img[py, px, :] = 1.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_srgb(raw: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """Scene-dependent rendering of a linear image.

    Base gamma, then a tone adjustment whose shadow-lift and
    highlight-compression coefficients come from the global luminance
    histogram's tail masses, a saturation boost scaled by the global chroma
    spread, and a local contrast term driven by blurred luminance.  With both
    strengths at zero the output is exactly raw ** gamma.
    """
    v = raw ** np.float32(cfg.gamma)
    lum = v.mean(axis=-1)

    # Soft tail masses: fraction of luminance below 0.5 / above 0.7, with a
    # linear roll-off instead of hard counting so nearby scenes render
    # similarly.  Display gamma compresses darks hard (a value below 0.5
    # here is below 0.2 linear), so 0.5 is where shadow mass actually lives.
    # Terms whose coefficient is zero are skipped outright, which keeps the
    # zero-strength rendering bitwise equal to the pure gamma.
    p_shadow = float(np.mean(np.clip((0.5 - lum) / 0.5, 0.0, 1.0)))
    p_highlight = float(np.mean(np.clip((lum - 0.7) / 0.3, 0.0, 1.0)))
    a = cfg.contrast_strength * p_shadow
    b = cfg.contrast_strength * p_highlight
    if a > 0 or b > 0:
        v = v + np.float32(a) * v * (1.0 - v) ** 2 - np.float32(b) * v ** 2 * (1.0 - v)

    if cfg.saturation_strength > 0:
        mu = v.mean(axis=-1, keepdims=True)
        spread = float(np.mean(np.abs(v - mu)))
        # Typical mean chroma deviation of these scenes stays below 1/6, so
        # the boost saturates at 1 + saturation_strength.
        boost = 1.0 + cfg.saturation_strength * min(spread * 6.0, 1.0)
        v = mu + (v - mu) * np.float32(boost)

    if cfg.local_radius > 0 and cfg.contrast_strength > 0:
        k = 2 * cfg.local_radius + 1
        m = cv2.blur(v.mean(axis=-1), (k, k), borderType=cv2.BORDER_REPLICATE)
        d = np.float32(0.5 * cfg.contrast_strength)
        v = v + d * (0.5 - m)[..., None] * v * (1.0 - v)

    return np.clip(v, 0.0, 1.0).astype(np.float32)


def synth_generate(out_dir, cfg: SynthConfig) -> list[PairRecord]:
    """Write ``cfg.count`` raw/rendered pairs, a manifest, and a config
    sidecar into ``out_dir``; archetypes cycle so every corpus covers the
    full range of exposures."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    records = []
    for i in range(cfg.count):
        archetype = ARCHETYPES[i % len(ARCHETYPES)]
        raw = generate_raw(rng, cfg.size, archetype)
        srgb = render_srgb(raw, cfg)
        raw_name = f"raw_{i:03d}.png"
        srgb_name = f"srgb_{i:03d}.png"
        write_image(os.path.join(out_dir, raw_name), raw, bits=16)
        write_image(os.path.join(out_dir, srgb_name), srgb, bits=8)
        records.append(PairRecord(f"scene_{i:03d}", raw_name, srgb_name, (1.0, 1.0, 1.0), root=out_dir))
    save_manifest(os.path.join(out_dir, "manifest.csv"), records)
    with open(os.path.join(out_dir, "synth_config.json"), "w") as fh:
        json.dump({"config": cfg.to_dict(), "archetype_cycle": list(ARCHETYPES)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


# ---------------------------------------------------------------------------
# Global-histogram swap analysis


@dataclass
class SwapResult:
    baseline: np.ndarray
    manipulated: np.ndarray
    difference: np.ndarray

    @property
    def max_abs_difference(self) -> float:
        return float(np.abs(self.difference).max())


def swapped_global(dst: np.ndarray, src: np.ndarray, bins: int, luminance_only: bool) -> np.ndarray:
    """Copy of ``dst`` whose histogram channels are replaced by ``src``'s;
    the first ``bins`` channels hold the luminance histogram, the rest the
    two chroma histograms."""
    if dst.shape[-1] != src.shape[-1]:
        raise ConfigurationError(f"channel counts differ: {dst.shape[-1]} vs {src.shape[-1]}")
    out = dst.copy()
    if luminance_only:
        out[..., :bins] = src[..., :bins]
    else:
        out[...] = src
    return out


def swap_global_histogram(
    params: model.ModelParams,
    image_a: np.ndarray,
    image_b: np.ndarray,
    *,
    luminance_only: bool = True,
    all_scales: bool = False,
) -> SwapResult:
    """Predict image B under image A's global context.

    The pooled context of B is recomputed with its global descriptor (and,
    with ``all_scales``, every pooled scale) taken from A.  Context-free
    baselines have nothing to substitute, so their manipulated prediction is
    simply a second forward pass and the difference is exactly zero.
    """
    baseline = model.forward_full(params, image_b)
    if params.kind != "full":
        manipulated = model.forward_full(params, image_b)
        return SwapResult(baseline, manipulated, manipulated - baseline)

    bins = params.config.bins
    pyr_a = model.compute_context(params, image_a).pyramid

    def edit(p: pyr.PyramidFeatures) -> pyr.PyramidFeatures:
        sg = swapped_global(p.s_global, pyr_a.s_global, bins, luminance_only)
        if not all_scales:
            return pyr.PyramidFeatures(p.s1, p.s2, p.s3, sg)
        for mine, theirs in ((p.s1, pyr_a.s1), (p.s2, pyr_a.s2), (p.s3, pyr_a.s3)):
            if mine.shape != theirs.shape:
                raise ConfigurationError(
                    "all-scales swap needs images of identical size;"
                    f" pooled shapes {mine.shape} vs {theirs.shape}"
                )
        return pyr.PyramidFeatures(
            swapped_global(p.s1, pyr_a.s1, bins, luminance_only),
            swapped_global(p.s2, pyr_a.s2, bins, luminance_only),
            swapped_global(p.s3, pyr_a.s3, bins, luminance_only),
            sg,
        )

    manipulated = model.forward_full(params, image_b, pyramid_edit=edit)
    return SwapResult(baseline, manipulated, manipulated - baseline)
