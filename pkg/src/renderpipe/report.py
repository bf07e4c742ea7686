"""Run reporting: loss-curve and evaluation CSV files, a pretty statistics
table, and matplotlib figures rendered to files next to the delimited
outputs."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .trainer import EvalReport

LOSS_FIELDS = ("epoch", "train_loss", "val_loss")
EVAL_FIELDS = ("id", "psnr")


def write_loss_csv(path, history: list[tuple[int, float, float]]) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_FIELDS)
        for epoch, train_loss, val_loss in history:
            # repr keeps full float precision so curves parse back exactly.
            w.writerow([epoch, repr(float(train_loss)), repr(float(val_loss))])


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    path = os.fspath(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read loss curve {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != LOSS_FIELDS:
        raise DataError(f"loss curve {path} must start with the header {','.join(LOSS_FIELDS)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            out.append((int(row[0]), float(row[1]), float(row[2])))
        except (ValueError, IndexError) as exc:
            raise DataError(f"loss curve {path} line {lineno}: {exc}") from exc
    return out


def write_eval_csv(path, rep: EvalReport) -> None:
    with open(os.fspath(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_FIELDS)
        for image_id, psnr in zip(rep.ids, rep.psnrs):
            w.writerow([image_id, repr(float(psnr))])


def read_eval_csv(path) -> EvalReport:
    path = os.fspath(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read evaluation table {path}: {exc}") from exc
    if not rows or tuple(rows[0]) != EVAL_FIELDS:
        raise DataError(f"evaluation table {path} must start with the header {','.join(EVAL_FIELDS)}")
    ids, psnrs = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            ids.append(row[0])
            psnrs.append(float(row[1]))
        except (ValueError, IndexError) as exc:
            raise DataError(f"evaluation table {path} line {lineno}: {exc}") from exc
    return EvalReport(ids, psnrs)


def format_eval_table(rep: EvalReport) -> str:
    lines = [f"PSNR over {len(rep.psnrs)} image(s), dB", "-" * 26]
    for label, value in rep.stat_rows():
        lines.append(f"{label:<8s}{value:10.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Figures


def loss_figure(path, history: list[tuple[int, float, float]]) -> None:
    epochs = [r[0] for r in history]
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    ax.plot(epochs, [r[1] for r in history], label="train", color="#1f6fb2")
    ax.plot(epochs, [r[2] for r in history], label="validation", color="#c4551b")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-value MSE")
    ax.grid(True, which="both", alpha=0.25)
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.fspath(path))
    plt.close(fig)


def eval_figure(path, rep: EvalReport) -> None:
    idx = np.arange(len(rep.psnrs))
    fig, ax = plt.subplots(figsize=(max(6.0, 0.35 * len(idx) + 2.0), 4.0), dpi=120)
    ax.bar(idx, rep.psnrs, color="#1f6fb2")
    ax.axhline(rep.mean, color="#c4551b", linestyle="--", label=f"mean {rep.mean:.2f} dB")
    ax.set_xticks(idx)
    ax.set_xticklabels(rep.ids, rotation=90, fontsize=7)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(os.fspath(path))
    plt.close(fig)


def heatmap_figure(path, magnitude: np.ndarray, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4.5), dpi=120)
    im = ax.imshow(magnitude, cmap="magma", vmin=0.0)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(os.fspath(path))
    plt.close(fig)
