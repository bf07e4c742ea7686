"""Command-line entry point.

Subcommands cover the whole workflow: synthesizing training pairs, training
a model, rendering single images, evaluating PSNR over a manifest, checking
every analytic gradient against finite differences, and probing a trained
model's context sensitivity by swapping global histograms between images.

Exit codes: 0 success, 1 usage or configuration problem, 2 data problem
(missing or malformed files), 3 numerical failure.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import colorhist as ch
from . import data
from . import model
from . import ops
from . import pyramid as pyr
from . import report
from . import trainer
from .errors import ConfigurationError, DataError, NumericalError

DIRECTION_FLAGS = {"raw2srgb": "raw_to_srgb", "srgb2raw": "srgb_to_raw"}


# ---------------------------------------------------------------------------
# Gradient-check battery

def _maybe_corrupt(name: str, corrupt: "str | None", grads: dict) -> dict:
    # Test hook: scaling one analytic gradient by 1.01 must make exactly the
    # named check fail, proving a broken backward cannot slip through.
    if corrupt == name:
        key = next(iter(grads))
        grads = dict(grads)
        grads[key] = grads[key] * 1.01
    return grads


def run_gradcheck(seed: int = 0, corrupt: "str | None" = None) -> list[ops.GradCheckResult]:
    """Finite-difference checks for every op and the composed network.

    All instances are double precision on toy sizes.  Smooth ops are held to
    1e-5 relative error; ops with kinks (relu, histogram, the full model) get
    1e-4 with kink neighborhoods excluded via evaluation signatures.
    """
    rng = np.random.default_rng(seed)
    results = []

    def conv_case(name, kh, kw, cin, cout, h, w):
        inputs = {
            "x": rng.uniform(-1, 1, (1, h, w, cin)),
            "kernel": rng.uniform(-0.5, 0.5, (kh, kw, cin, cout)),
            "bias": rng.uniform(-0.1, 0.1, (cout,)),
        }

        def fwd(d):
            return ops.conv2d_forward(d["x"], ops.ConvFilter(d["kernel"], d["bias"]))

        def bwd(d, g):
            gx, gk, gb = ops.conv2d_backward(d["x"], ops.ConvFilter(d["kernel"], d["bias"]), g)
            return _maybe_corrupt(name, corrupt, {"x": gx, "kernel": gk, "bias": gb})

        results.append(ops.gradient_check(name, fwd, bwd, inputs, eps=1e-6, tolerance=1e-5, seed=seed))

    conv_case("conv1x1", 1, 1, 4, 3, 6, 6)
    conv_case("conv3x3", 3, 3, 2, 3, 6, 6)

    for name, stride, h in (("avgpool3_stride1", 1, 6), ("avgpool3_stride2", 2, 7)):
        inputs = {"x": rng.uniform(-1, 1, (1, h, h, 2))}

        def fwd(d, stride=stride):
            return ops.avgpool3_forward(d["x"], stride)

        def bwd(d, g, name=name, stride=stride):
            return _maybe_corrupt(name, corrupt, {"x": ops.avgpool3_backward(g, d["x"].shape, stride)})

        results.append(ops.gradient_check(name, fwd, bwd, inputs, eps=1e-6, tolerance=1e-5, seed=seed))

    inputs = {"x": rng.uniform(-1, 1, (1, 5, 6, 3))}
    results.append(
        ops.gradient_check(
            "global_avgpool",
            lambda d: ops.global_avgpool_forward(d["x"]),
            lambda d, g: _maybe_corrupt(
                "global_avgpool", corrupt, {"x": ops.global_avgpool_backward(g, d["x"].shape)}
            ),
            inputs,
            eps=1e-6,
            tolerance=1e-5,
            seed=seed,
        )
    )

    inputs = {"x": rng.uniform(-1, 1, (1, 5, 5, 3))}
    results.append(
        ops.gradient_check(
            "relu",
            lambda d: (ops.relu_forward(d["x"]), (d["x"] > 0,)),
            lambda d, g: _maybe_corrupt("relu", corrupt, {"x": ops.relu_backward(d["x"], g)}),
            inputs,
            eps=1e-6,
            tolerance=1e-4,
            seed=seed,
        )
    )

    inputs = {
        "a": rng.uniform(-1, 1, (1, 6, 6, 2)),
        "b": rng.uniform(-1, 1, (1, 6, 6, 3)),
    }

    def concat_fwd(d):
        return ops.slice_patch(ops.concat_channels([d["a"], d["b"]]), 1, 2, 4, 3)

    def concat_bwd(d, g):
        full = ops.slice_patch_backward(g, (1, 6, 6, 5), 1, 2)
        ga, gb = ops.concat_channels_backward(full, [2, 3])
        return _maybe_corrupt("concat_slice", corrupt, {"a": ga, "b": gb})

    results.append(
        ops.gradient_check("concat_slice", concat_fwd, concat_bwd, inputs, eps=1e-6, tolerance=1e-5, seed=seed)
    )

    inputs = {"x": rng.uniform(0.05, 0.95, (1, 5, 5, 3))}
    results.append(
        ops.gradient_check(
            "rgb_to_lrg",
            lambda d: ch.rgb_to_lrg(d["x"]),
            lambda d, g: _maybe_corrupt("rgb_to_lrg", corrupt, {"x": ch.rgb_to_lrg_backward(d["x"], g)}),
            inputs,
            eps=1e-6,
            tolerance=1e-5,
            seed=seed,
        )
    )

    hp0 = ch.init_default(dtype=np.float64)
    inputs = {
        "lrg": rng.uniform(0.02, 0.98, (1, 5, 5, 3)),
        "centers": hp0.centers + rng.uniform(-0.02, 0.02, hp0.centers.shape),
        "half_widths": hp0.half_widths + rng.uniform(-0.02, 0.02, hp0.half_widths.shape),
    }

    def hist_fwd(d):
        p = ch.HistogramParams(d["centers"], d["half_widths"])
        out = ch.hist_forward(d["lrg"], p)
        delta = d["lrg"][..., :, None] - d["centers"]
        t = 1.0 - np.abs(delta) / d["half_widths"]
        return out, (np.sign(delta), t > 0)

    def hist_bwd(d, g):
        p = ch.HistogramParams(d["centers"], d["half_widths"])
        gl, gc, gw = ch.hist_backward(d["lrg"], p, g)
        return _maybe_corrupt(
            "histogram", corrupt, {"lrg": gl, "centers": gc, "half_widths": gw}
        )

    results.append(
        ops.gradient_check("histogram", hist_fwd, hist_bwd, inputs, eps=1e-6, tolerance=1e-4, seed=seed)
    )

    target = rng.uniform(size=(2, 4, 4, 3))
    inputs = {"pred": rng.uniform(size=(2, 4, 4, 3))}

    def loss_fwd(d):
        loss, _ = trainer.l2_loss(d["pred"], target)
        return np.array([loss])

    def loss_bwd(d, g):
        _, grad = trainer.l2_loss(d["pred"], target)
        return _maybe_corrupt("l2_loss", corrupt, {"pred": grad * float(g[0])})

    results.append(
        ops.gradient_check("l2_loss", loss_fwd, loss_bwd, inputs, eps=1e-6, tolerance=1e-5, seed=seed)
    )

    cfg = model.NetworkConfig("raw_to_srgb", hidden_channels=6)
    p64 = model.init_params(cfg, rng, dtype=np.float64)
    inputs = {"image": rng.uniform(0.05, 0.95, (1, 10, 10, 3))}
    inputs.update({k: v.copy() for k, v in p64.named_arrays().items()})
    rects = [pyr.PatchRect(0, 0, 8, 8), pyr.PatchRect(2, 2, 8, 8)]

    def rebuild(d):
        convs = []
        i = 0
        while f"conv{i}.kernel" in d:
            convs.append(ops.ConvFilter(d[f"conv{i}.kernel"], d[f"conv{i}.bias"]))
            i += 1
        hist = ch.HistogramParams(d["hist.centers"], d["hist.half_widths"])
        return model.ModelParams(config=cfg, convs=convs, hist=hist)

    def model_fwd(d):
        p = rebuild(d)
        preds, cache = model.forward_patchwise(p, d["image"], rects)
        return preds, model.kink_signature(p, cache)

    def model_bwd(d, g):
        p = rebuild(d)
        _, cache = model.forward_patchwise(p, d["image"], rects)
        grads = model.backward(p, cache, g)
        out = dict(grads.named_arrays())
        out["image"] = grads.image
        return _maybe_corrupt("full_model", corrupt, out)

    results.append(
        ops.gradient_check(
            "full_model",
            model_fwd,
            model_bwd,
            inputs,
            eps=1e-6,
            tolerance=1e-4,
            seed=seed,
            max_checks_per_input=150,
        )
    )
    return results


# ---------------------------------------------------------------------------
# Shared helpers

def _load_tensor_pairs(manifest_path, direction: str, crop: int):
    """Manifest -> oriented (input, target) tensors plus surviving ids."""
    records = data.load_manifest(manifest_path)
    tensors, ids = [], []
    for rec in records:
        pair = data.load_pair(rec)
        if crop:
            pair = data.preprocess(pair, crop)
            if pair is None:
                continue
        tensors.append(data.oriented_tensors(pair, direction))
        ids.append(rec.id)
    if not tensors:
        raise DataError(f"{manifest_path}: no usable pairs (all below the crop size?)")
    return tensors, ids


def _expect_bits(path, direction: str, end: str) -> np.ndarray:
    """Read an image, insisting its stored depth matches the model side.

    RAW files travel as 16-bit, rendered sRGB as 8-bit; a mismatch means the
    checkpoint and the image belong to different pipeline ends.
    """
    raw_side = (direction == "raw_to_srgb") == (end == "input")
    want = 16 if raw_side else 8
    have = data.image_bits(path)
    if have != want:
        raise DataError(
            f"{path}: stored at {have}-bit but a {direction} model expects "
            f"{want}-bit {end} images"
        )
    return data.read_image(path)


def _output_bits(direction: str) -> int:
    return 8 if direction == "raw_to_srgb" else 16


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> int:
    cfg = data.SynthConfig(
        count=args.count,
        size=args.size,
        seed=args.seed,
        contrast_strength=args.contrast_strength,
        saturation_strength=args.saturation_strength,
        local_radius=args.local_radius,
    )
    records = data.synth_generate(args.out, cfg)
    print(f"wrote {len(records)} pairs and manifest.csv under {args.out}")
    return 0


def cmd_train(args) -> int:
    direction = DIRECTION_FLAGS[args.direction]
    if args.arch == "full":
        mcfg = model.NetworkConfig(
            direction,
            hidden_channels=args.hidden,
            context_frozen=args.freeze_context,
        )
    else:
        if args.freeze_context:
            raise ConfigurationError("--freeze-context only applies to the full model")
        mcfg = model.BaselineConfig(args.arch, direction, hidden_channels=args.hidden)
    tcfg = trainer.TrainConfig(
        epochs=args.epochs,
        batch_images=args.batch_images,
        patches_per_image=args.patches,
        patch_size=args.patch_size,
        lr=args.lr,
        beta2=args.beta2,
        seed=args.seed,
        direction=direction,
    )
    print("effective configuration:")
    print(json.dumps({"model": mcfg.to_dict(), "train": tcfg.to_dict()}, indent=2, sort_keys=True))

    tensors, _ = _load_tensor_pairs(args.data, direction, args.crop)
    tr_idx, val_idx = trainer.split_train_val(len(tensors), args.val_frac, args.seed)
    train_pairs = [tensors[i] for i in tr_idx]
    val_pairs = [tensors[i] for i in val_idx]
    print(f"{len(train_pairs)} training pairs, {len(val_pairs)} validation pairs")

    params = model.init_params(mcfg, np.random.default_rng(args.seed))
    res = trainer.train(params, train_pairs, val_pairs, tcfg, checkpoint_path=args.out)

    base, ext = os.path.splitext(args.out)
    final_path = base + ".final" + (ext or ".ckpt")
    ckpt.save_checkpoint(final_path, res.params)
    report.write_loss_csv(base + "_loss.csv", res.history)
    report.loss_figure(base + "_loss.png", res.history)

    print(f"best epoch {res.best_epoch}: validation mse {res.best_val:.6e}")
    print(f"best checkpoint  {args.out}")
    print(f"final checkpoint {final_path}")
    print(f"loss curve       {base}_loss.csv / {base}_loss.png")
    return 0


def cmd_infer(args) -> int:
    params = ckpt.load_checkpoint(args.ckpt)
    direction = params.config.direction
    img = _expect_bits(args.input, direction, "input")
    pred = model.forward_full(params, img[None])[0]
    pred = np.clip(pred, 0.0, 1.0)
    bits = _output_bits(direction)
    data.write_image(args.out, pred, bits)
    h, w = pred.shape[:2]
    print(f"wrote {args.out} ({w}x{h}, {bits}-bit, {direction})")
    return 0


def cmd_eval(args) -> int:
    params = ckpt.load_checkpoint(args.ckpt)
    direction = params.config.direction
    tensors, ids = _load_tensor_pairs(args.data, direction, args.crop)
    rep = trainer.evaluate(params, tensors, ids=ids)
    print(report.format_eval_table(rep))
    if args.out:
        report.write_eval_csv(args.out + "_eval.csv", rep)
        report.eval_figure(args.out + "_eval.png", rep)
        print(f"wrote {args.out}_eval.csv / {args.out}_eval.png")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(seed=args.seed)
    for res in results:
        print(res.line())
    failed = [res for res in results if not res.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} gradient checks failed")
        return 3
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_analyze_swap(args) -> int:
    params = ckpt.load_checkpoint(args.ckpt)
    direction = params.config.direction
    src = _expect_bits(args.source, direction, "input")
    tgt = _expect_bits(args.target, direction, "input")
    result = data.swap_global_histogram(
        params,
        src[None],
        tgt[None],
        luminance_only=not args.all_channels,
        all_scales=args.all_scales,
    )

    os.makedirs(args.out, exist_ok=True)
    bits = _output_bits(direction)
    paths = {
        "baseline": os.path.join(args.out, "baseline_prediction.png"),
        "manipulated": os.path.join(args.out, "manipulated_prediction.png"),
        "heatmap": os.path.join(args.out, "difference_heatmap.png"),
        "summary": os.path.join(args.out, "summary.txt"),
    }
    data.write_image(paths["baseline"], np.clip(result.baseline[0], 0.0, 1.0), bits)
    data.write_image(paths["manipulated"], np.clip(result.manipulated[0], 0.0, 1.0), bits)
    magnitude = np.abs(result.difference[0]).mean(axis=2)
    report.heatmap_figure(paths["heatmap"], magnitude, title="mean abs prediction change")

    lines = [
        f"target image     {args.target}",
        f"histogram source {args.source}",
        f"luminance only   {not args.all_channels}",
        f"all scales       {args.all_scales}",
        f"max abs difference  {result.max_abs_difference:.6e}",
        f"mean abs difference {float(np.mean(np.abs(result.difference))):.6e}",
    ]
    with open(paths["summary"], "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {', '.join(paths.values())}")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="renderpipe",
        description="Scene-aware color rendering: synthesize data, train, render, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic RAW/sRGB training pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--contrast-strength", type=float, default=0.8)
    p.add_argument("--saturation-strength", type=float, default=0.5)
    p.add_argument("--local-radius", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest of image pairs")
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="best-checkpoint path")
    p.add_argument("--direction", choices=sorted(DIRECTION_FLAGS), default="raw2srgb")
    p.add_argument("--arch", choices=("full", "mlp", "srcnn"), default="full")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta2", type=float, default=0.999)
    p.add_argument("--batch-images", type=int, default=4)
    p.add_argument("--patches", type=int, default=16, help="patches per image")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--crop", type=int, default=0, help="short-side resize and center crop (0 = off)")
    p.add_argument("--freeze-context", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="render one image through a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="input image")
    p.add_argument("--out", required=True, help="output image")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="PSNR statistics over a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--crop", type=int, default=0)
    p.add_argument("--out", default="", help="prefix for CSV and figure outputs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze-swap", help="re-render an image under another image's global histogram")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True, help="image donating the global histogram")
    p.add_argument("--target", required=True, help="image being rendered")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--all-channels", action="store_true", help="swap chroma bins too, not just luminance")
    p.add_argument("--all-scales", action="store_true", help="also swap the pooled local scales")
    p.set_defaults(func=cmd_analyze_swap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
