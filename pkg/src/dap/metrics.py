"""Grounding metrics and the serializable report."""

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import MaskCoverageError

EPS_VAR = 1e-8


def _np(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def cnr(heatmap, gt_mask, eps_var=EPS_VAR):
    """Signed contrast-to-noise ratio of a heatmap between mask FG and BG.

    (mean_FG - mean_BG) / sqrt(var_FG + var_BG + eps_var), population variances.
    """
    m = _np(heatmap).astype(np.float64)
    g = _np(gt_mask).astype(bool)
    if m.shape != g.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {g.shape}")
    if g.all() or not g.any():
        raise MaskCoverageError("CNR needs at least one FG and one BG pixel")
    # Shift by one entry so constant maps give an exact zero numerator.
    m = m - m.flat[0]
    fg, bg = m[g], m[~g]
    return float((fg.mean() - bg.mean()) / np.sqrt(fg.var() + bg.var() + eps_var))


def pointing_game(heatmap, gt_mask):
    """Hit when the first row-major argmax pixel lies inside the mask."""
    m = _np(heatmap)
    g = _np(gt_mask).astype(bool)
    if m.shape != g.shape:
        raise ValueError(f"shape mismatch {m.shape} vs {g.shape}")
    return bool(g.reshape(-1)[int(np.argmax(m.reshape(-1)))])


def dice(pred_mask, gt_mask):
    p = _np(pred_mask).astype(bool)
    g = _np(gt_mask).astype(bool)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def iou(pred_mask, gt_mask):
    p = _np(pred_mask).astype(bool)
    g = _np(gt_mask).astype(bool)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def area_strata(areas, groups=5):
    """Split sample indices into ``groups`` equal-count bins by ascending area.

    With fewer distinct areas than ``groups`` the bins are the distinct areas.
    """
    areas = np.asarray(areas)
    distinct = np.unique(areas)
    if len(distinct) < groups:
        if len(areas):
            warnings.warn(f"only {len(distinct)} distinct areas; using that many strata", stacklevel=2)
        return [np.flatnonzero(areas == a) for a in distinct]
    order = np.lexsort((np.arange(len(areas)), areas))
    return list(np.array_split(order, groups))


@dataclass
class DiagnosticsBlock:
    dice_norm_vs_bg: float = float("nan")
    dice_vg_vs_norm: float = float("nan")
    dice_vg_vs_gt: float = float("nan")
    cos_img_fg_mean: float = float("nan")
    cos_img_fg_std: float = float("nan")
    cos_img_bg_mean: float = float("nan")
    cos_img_bg_std: float = float("nan")
    cos_cls_fg_mean: float = float("nan")
    cos_cls_fg_std: float = float("nan")
    cos_cls_bg_mean: float = float("nan")
    cos_cls_bg_std: float = float("nan")
    strata: dict = field(default_factory=dict)
    prompted_alignment: dict = field(default_factory=dict)


@dataclass
class MetricsReport:
    cnr: float
    pg: float
    dice: float
    iou: float
    per_sample: list = field(default_factory=list)
    diagnostics: DiagnosticsBlock = None

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        diag = d.pop("diagnostics", None)
        return cls(diagnostics=DiagnosticsBlock(**diag) if diag is not None else None, **d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def score_sample(heatmap, gt_mask, threshold=0.5, ranking=None):
    """Per-sample metrics; ``ranking`` (e.g. pre-sigmoid logits) picks the PG argmax when given."""
    hm = _np(heatmap)
    pred = hm > threshold
    rank = hm if ranking is None else ranking
    return {"cnr": cnr(hm, gt_mask), "pg": pointing_game(rank, gt_mask),
            "dice": dice(pred, gt_mask), "iou": iou(pred, gt_mask)}


def summarize(per_sample, ids=None):
    """Aggregate per-sample records into a report (means; PG is the hit fraction)."""
    if ids is not None:
        per_sample = [dict(rec, id=i) for rec, i in zip(per_sample, ids)]
    if not per_sample:
        return MetricsReport(cnr=float("nan"), pg=float("nan"), dice=float("nan"), iou=float("nan"))
    keys = ("cnr", "pg", "dice", "iou")
    means = {k: float(np.mean([float(r[k]) for r in per_sample])) for k in keys}
    return MetricsReport(per_sample=per_sample, **means)
