"""Model-level analyses: norm-map overlap, intra-modal alignment, area/count strata."""

import numpy as np
import torch

from .data import Batchable, batches
from .errors import MaskCoverageError
from .metrics import DiagnosticsBlock, area_strata, dice
from .model import pairwise_cos, patch_norm_map
from .prompting import upsample_prompt


def patch_fg(masks, patch_size, coverage=0.5):
    """(N, H, W) pixel masks -> (N, rows*cols) bool, FG when >= ``coverage`` of pixels are FG."""
    m = torch.as_tensor(np.asarray(masks), dtype=torch.float64)[:, None]
    frac = torch.nn.functional.avg_pool2d(m, patch_size)[:, 0]
    return (frac >= coverage).reshape(frac.shape[0], -1).numpy()


def median_binarize(norm_map):
    """Entries >= the map's median become 1."""
    m = np.asarray(norm_map)
    return (m >= np.median(m)).astype(np.uint8)


@torch.no_grad()
def _norm_maps(model, data):
    out = []
    for idx in batches(len(data), 64):
        out.append(patch_norm_map(model.vision(data.images[idx])).numpy())
    return np.concatenate(out)


def norm_overlap(norm_maps, vg_masks, gt_masks, patch_size):
    """Mean Dice of (norm vs BG, VG vs norm, VG vs GT) from precomputed arrays."""
    rows = []
    for nm, vg, gt in zip(norm_maps, vg_masks, gt_masks):
        nb = upsample_prompt(torch.as_tensor(median_binarize(nm)), patch_size).numpy().astype(bool)
        gt = np.asarray(gt).astype(bool)
        vg = np.asarray(vg).astype(bool)
        rows.append((dice(nb, ~gt), dice(vg, nb), dice(vg, gt)))
    arr = np.array(rows, dtype=float)
    return tuple(float(v) for v in arr.mean(axis=0))


def norm_overlap_analysis(model, data: Batchable, threshold=0.5, scores=None):
    """(dice_norm_vs_bg, dice_vg_vs_norm, dice_vg_vs_gt) averaged over the set."""
    from .trainer import predict

    if scores is None:
        scores = predict(model, data)
    return norm_overlap(_norm_maps(model, data), scores > threshold, data.masks, model.cfg.patch_size)


def alignment_from_tokens(img, cls, patches, fg):
    """Cosine summaries of [IMG] / [CLS] against FG and BG patch populations.

    ``img``, ``cls`` (N, D); ``patches`` (N, n, D); ``fg`` (N, n) bool.
    """
    fg = np.asarray(fg, dtype=bool)
    if not fg.any():
        raise MaskCoverageError("no FG patches in the dataset")
    cos_img = pairwise_cos(patches, img[:, None, :]).numpy()
    cos_cls = pairwise_cos(patches, cls[:, None, :]).numpy()
    out = {}
    for name, arr in (("img", cos_img), ("cls", cos_cls)):
        for part, sel in (("fg", fg), ("bg", ~fg)):
            vals = arr[sel]
            out[f"cos_{name}_{part}_mean"] = float(vals.mean()) if vals.size else float("nan")
            out[f"cos_{name}_{part}_std"] = float(vals.std()) if vals.size else float("nan")
    out["samples"] = {"img_fg": cos_img[fg], "img_bg": cos_img[~fg],
                      "cls_fg": cos_cls[fg], "cls_bg": cos_cls[~fg]}
    return out


@torch.no_grad()
def alignment_stats(model, data: Batchable, prompted=False, prompts=None, prompt_layers=None,
                    coverage=0.5):
    """FG/BG cosine statistics for unprompted or prompted encodings.

    FG patches come from ground-truth masks. ``prompts`` (N, rows, cols) is
    required when ``prompted``.
    """
    if prompted and prompts is None:
        raise ValueError("prompted alignment needs prompt maps")
    layers = prompt_layers or "last"
    fg = patch_fg(data.masks, model.cfg.patch_size, coverage)
    imgs, clss, patches = [], [], []
    for idx in batches(len(data), 64):
        if prompted:
            bundle = model.vision(data.images[idx], torch.as_tensor(prompts[idx]), layers)
        else:
            bundle = model.vision(data.images[idx])
        imgs.append(bundle.img_token)
        patches.append(bundle.patch_tokens)
        clss.append(model.text([data.tokens[i] for i in idx]).cls_token)
    return alignment_from_tokens(torch.cat(imgs), torch.cat(clss), torch.cat(patches), fg)


def strata_table(per_sample_dice, areas, counts, groups=5):
    dices = np.asarray(per_sample_dice, dtype=float)
    areas = np.asarray(areas)
    counts = np.asarray(counts)
    area_rows = []
    for q, idx in enumerate(area_strata(areas, groups)):
        area_rows.append({"stratum": q, "n": int(len(idx)),
                          "area_min": int(areas[idx].min()), "area_max": int(areas[idx].max()),
                          "dice": float(dices[idx].mean())})
    count_rows = []
    for c in np.unique(counts):
        sel = counts == c
        count_rows.append({"lesion_count": int(c), "n": int(sel.sum()), "dice": float(dices[sel].mean())})
    return {"area": area_rows, "count": count_rows}


def stratified_eval(model, data: Batchable, threshold=0.5, scores=None):
    """Dice per area quintile and per lesion count."""
    from .trainer import predict

    if scores is None:
        scores = predict(model, data)
    dices = [dice(s > threshold, m) for s, m in zip(scores, data.masks)]
    return strata_table(dices, data.areas, data.counts)


def diagnostics_block(model, data: Batchable, cfg, scores=None, prompts=None):
    from .trainer import predict

    if scores is None:
        scores = predict(model, data)
    nb, vn, vg = norm_overlap_analysis(model, data, cfg.eval.threshold, scores)
    stats = alignment_stats(model, data, prompted=False)
    block = DiagnosticsBlock(dice_norm_vs_bg=nb, dice_vg_vs_norm=vn, dice_vg_vs_gt=vg,
                             **{k: v for k, v in stats.items() if k.startswith("cos_")})
    block.strata = stratified_eval(model, data, cfg.eval.threshold, scores)
    if prompts is not None:
        pstats = alignment_stats(model, data, prompted=True, prompts=prompts,
                                 prompt_layers=cfg.prompt.layers)
        block.prompted_alignment = {k: v for k, v in pstats.items() if k.startswith("cos_")}
    return block
