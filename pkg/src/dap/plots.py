"""Static figure emission: every plot is written as a PNG plus a CSV of its data."""

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .binfmt import atomic_write_bytes, atomic_write_text  # noqa: E402


def _save_fig(fig, path):
    buf = io.BytesIO()
    # Fixed metadata keeps re-runs byte-identical.
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def norm_overlays(out_dir, images, norm_maps, masks, ids, limit=8):
    """Image, patch-norm map and ground-truth contour side by side per sample."""
    os.makedirs(out_dir, exist_ok=True)
    n = min(limit, len(images))
    if n == 0:
        return []
    fig, axes = plt.subplots(n, 2, figsize=(4, 2 * n), squeeze=False)
    rows = []
    for i in range(n):
        img = np.asarray(images[i])[0]
        nm = np.asarray(norm_maps[i])
        axes[i, 0].imshow(img, cmap="gray")
        axes[i, 0].contour(masks[i], levels=[0.5], colors="r", linewidths=0.6)
        axes[i, 1].imshow(nm, cmap="magma", extent=(0, img.shape[1], img.shape[0], 0))
        axes[i, 1].contour(masks[i], levels=[0.5], colors="c", linewidths=0.6)
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
        axes[i, 0].set_ylabel(str(ids[i]), fontsize=7)
        for (r, c), v in np.ndenumerate(nm):
            rows.append((ids[i], r, c, f"{v:.6g}"))
    axes[0, 0].set_title("image + mask", fontsize=8)
    axes[0, 1].set_title("patch norm", fontsize=8)
    fig.tight_layout()
    png = os.path.join(out_dir, "norm_overlays.png")
    _save_fig(fig, png)
    _write_csv(os.path.join(out_dir, "norm_overlays.csv"), ("id", "row", "col", "norm"), rows)
    return [png]


def cosine_histograms(out_dir, samples, tag="unprompted", bins=40):
    """FG vs BG cosine distributions for [IMG] and [CLS]; ``samples`` from alignment stats."""
    os.makedirs(out_dir, exist_ok=True)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    rows = []
    for ax, who in zip(axes, ("img", "cls")):
        for part, color in (("fg", "tab:red"), ("bg", "tab:blue")):
            vals = np.asarray(samples[f"{who}_{part}"], dtype=float)
            counts, _ = np.histogram(vals, bins=edges)
            ax.hist(vals, bins=edges, alpha=0.5, color=color, density=True, label=part.upper())
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                rows.append((who, part, f"{lo:.4f}", f"{hi:.4f}", int(c)))
        ax.set_title(f"cos([{who.upper()}], patch) {tag}", fontsize=9)
        ax.legend(fontsize=8)
    fig.tight_layout()
    png = os.path.join(out_dir, f"cosine_{tag}.png")
    _save_fig(fig, png)
    _write_csv(os.path.join(out_dir, f"cosine_{tag}.csv"), ("token", "part", "lo", "hi", "count"), rows)
    return [png]


def strata_plots(out_dir, strata):
    """Dice per area quintile and per lesion count."""
    os.makedirs(out_dir, exist_ok=True)
    area, count = strata["area"], strata["count"]
    _write_csv(os.path.join(out_dir, "strata_area.csv"),
               ("stratum", "n", "area_min", "area_max", "dice"),
               [(r["stratum"], r["n"], r["area_min"], r["area_max"], f"{r['dice']:.6f}") for r in area])
    _write_csv(os.path.join(out_dir, "strata_count.csv"), ("lesion_count", "n", "dice"),
               [(r["lesion_count"], r["n"], f"{r['dice']:.6f}") for r in count])
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].bar([str(r["stratum"]) for r in area], [r["dice"] for r in area])
    axes[0].set_xlabel("area quintile")
    axes[0].set_ylabel("Dice")
    axes[1].bar([str(r["lesion_count"]) for r in count], [r["dice"] for r in count])
    axes[1].set_xlabel("lesion count")
    fig.tight_layout()
    png = os.path.join(out_dir, "strata.png")
    _save_fig(fig, png)
    return [png]


def self_enhancement_scatter(out_dir, report):
    os.makedirs(out_dir, exist_ok=True)
    pairs = report["pairs"]
    dp = [p["dice_prompt"] for p in pairs]
    dm = [p["dice_model"] for p in pairs]
    _write_csv(os.path.join(out_dir, "self_enhancement.csv"), ("id", "dice_prompt", "dice_model"),
               [(p["id"], f"{p['dice_prompt']:.6f}", f"{p['dice_model']:.6f}") for p in pairs])
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(dp, dm, s=6)
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("Dice of prompt map")
    ax.set_ylabel("Dice of model")
    ax.set_title(f"above diagonal: {report['fraction_above']:.2f}", fontsize=9)
    fig.tight_layout()
    png = os.path.join(out_dir, "self_enhancement.png")
    _save_fig(fig, png)
    return [png]


def sweep_plot(out_dir, reports):
    """Dice and CNR versus corruption level; ``reports`` maps k -> MetricsReport."""
    os.makedirs(out_dir, exist_ok=True)
    ks = sorted(reports)
    _write_csv(os.path.join(out_dir, "sweep.csv"), ("k", "dice", "cnr", "pg", "iou"),
               [(k, f"{reports[k].dice:.6f}", f"{reports[k].cnr:.6f}", f"{reports[k].pg:.6f}",
                 f"{reports[k].iou:.6f}") for k in ks])
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ks, [reports[k].dice for k in ks], "o-", label="Dice")
    ax.plot(ks, [reports[k].cnr for k in ks], "s-", label="CNR")
    ax.set_xlabel("corrupted top-k (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    png = os.path.join(out_dir, "sweep.png")
    _save_fig(fig, png)
    return [png]
