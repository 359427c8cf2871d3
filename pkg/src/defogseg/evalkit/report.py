"""CSV tables, plots and image strips for ablation results.

Layout under the report directory::

    tables/<preset>.csv          aggregated rows (schema below)
    tables/<preset>_seeds.csv    one row per (row, seed)
    plots/<preset>_miou.png      grouped mIoU bars with std error bars
    plots/<preset>_loss.png      fine-tuning loss curves (seed-averaged)
    overlays/*.png               fog | defogged | clean | prediction | ground truth

Segmentation colours (RGB): sky 70,130,180; ground 128,64,128; building
70,70,70; vehicle 0,0,142; vegetation 107,142,35; extra classes cycle a
fixed list; ignore pixels are black.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .ablation import METRIC_SPLITS

SCHEMA_VERSION = 1
TABLE_COLUMNS = ["schema_version", "preset", "label", "init", "flags", "n_seeds"] + [
    f"{s}_{stat}" for s in METRIC_SPLITS for stat in ("mean", "std")]

PALETTE = np.array([
    [70, 130, 180], [128, 64, 128], [70, 70, 70], [0, 0, 142], [107, 142, 35],
    [220, 20, 60], [250, 170, 30], [152, 251, 152], [190, 153, 153], [0, 80, 100],
], dtype=np.uint8)


def colorize(label):
    label = np.asarray(label)
    out = PALETTE[label % len(PALETTE)]
    out[label == 255] = 0
    return out


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _savefig(fig, path):
    # no timestamps or version strings, so reruns give identical bytes
    fig.savefig(path, dpi=80, metadata={"Software": None})


def write_table(result, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in result.rows:
            row = {"schema_version": SCHEMA_VERSION, "preset": result.preset}
            row.update({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
            w.writerow(row)


def write_seed_table(result, path):
    cols = ["schema_version", "preset", "label", "seed"] + list(METRIC_SPLITS)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in result.per_seed:
            row = {"schema_version": SCHEMA_VERSION, "preset": result.preset}
            row.update({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
            w.writerow(row)


def plot_miou(result, path):
    plt = _plt()
    labels = [r["label"] for r in result.rows]
    x = np.arange(len(labels))
    width = 0.8 / len(METRIC_SPLITS)
    fig, ax = plt.subplots(figsize=(1.8 * len(labels) + 2, 3.6))
    for j, s in enumerate(METRIC_SPLITS):
        ax.bar(x + j * width, [r[f"{s}_mean"] for r in result.rows], width,
               yerr=[r[f"{s}_std"] for r in result.rows], label=s, capsize=2)
    ax.set_xticks(x + width * (len(METRIC_SPLITS) - 1) / 2)
    ax.set_xticklabels(labels, rotation=15, fontsize=7)
    ax.set_ylabel("mIoU (%)")
    ax.set_title(f"{result.preset} ({len(result.seeds)} seeds)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)


def _smooth(y, k=25):
    if len(y) < k:
        return np.asarray(y)
    return np.convolve(y, np.ones(k) / k, mode="valid")


def plot_loss_curves(result, path):
    if not any(result.curves.values()):
        return False
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label, by_seed in result.curves.items():
        runs = [np.array([r["total"] for r in rows]) for rows in by_seed.values() if rows]
        if not runs:
            continue
        n = min(len(r) for r in runs)
        ax.plot(_smooth(np.mean([r[:n] for r in runs], axis=0)), label=label, lw=1)
    ax.set_xlabel("fine-tuning step")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _savefig(fig, path)
    plt.close(fig)
    return True


def image_strip(panels):
    """Concatenate H x W x 3 uint8 / [0,1] float panels horizontally."""
    out = []
    for p in panels:
        p = np.asarray(p)
        if p.dtype != np.uint8:
            p = np.round(np.clip(p, 0, 1) * 255).astype(np.uint8)
        out.append(p)
    return np.concatenate(out, axis=1)


def write_overlay(path, fog, defogged, clean, pred, label):
    from PIL import Image
    strip = image_strip([fog, defogged, clean, colorize(pred), colorize(label)])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip).save(path, format="PNG")
    return strip.shape


def emit_report(result, out_dir):
    """Write tables and plots for ``result``; returns the list of files written."""
    out = Path(out_dir)
    (out / "tables").mkdir(parents=True, exist_ok=True)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    files = [out / "tables" / f"{result.preset}.csv", out / "tables" / f"{result.preset}_seeds.csv",
             out / "plots" / f"{result.preset}_miou.png"]
    write_table(result, files[0])
    write_seed_table(result, files[1])
    plot_miou(result, files[2])
    loss_png = out / "plots" / f"{result.preset}_loss.png"
    if plot_loss_curves(result, loss_png):
        files.append(loss_png)
    cfg_path = out / "tables" / f"{result.preset}_config.json"
    cfg_path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "seeds": result.seeds,
                                    "run_config": result.config}, indent=1, sort_keys=True))
    files.append(cfg_path)
    return files
