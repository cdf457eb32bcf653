"""Global contrastive, local FG/BG contrastive and soft Dice objectives."""

import math

import torch

from .config import LossWeights
from .errors import (BatchSizeError, ConfigError, DegeneratePartitionError, NumericalError,
                     RangeError)
from .model import pairwise_cos


def _class_keys(class_sets, n):
    if class_sets is None:
        return list(range(n))
    return [frozenset(c) for c in class_sets]


def negative_mask(class_sets, n):
    """mask[i, j] is True when text j is a valid negative for sample i."""
    keys = _class_keys(class_sets, n)
    mask = torch.tensor([[keys[i] != keys[j] for j in range(n)] for i in range(n)], dtype=torch.bool)
    return mask


def global_contrastive(img, cls, temperature=1.0, class_sets=None, literal_denominator=False):
    """Mean over i of -log softmax of cos(img_i, cls_i) against negatives of i.

    Negatives are texts whose class set differs from sample i's. The positive
    term is part of the denominator unless ``literal_denominator``.
    """
    n = img.shape[0]
    if n < 2:
        raise BatchSizeError(f"global contrastive loss needs n >= 2, got {n}")
    if temperature <= 0:
        raise ConfigError("temperature > 0 violated")
    logits = pairwise_cos(img[:, None, :], cls[None, :, :]) / temperature
    neg = negative_mask(class_sets, n).to(logits.device)
    keep = neg.clone()
    if not literal_denominator:
        keep |= torch.eye(n, dtype=torch.bool)
    masked = logits.masked_fill(~keep, float("-inf"))
    denom = torch.logsumexp(masked, dim=1)
    return (denom - logits.diagonal()).mean()


def symmetric_contrastive(img, cls, temperature, class_sets=None):
    return 0.5 * (global_contrastive(img, cls, temperature, class_sets)
                  + global_contrastive(cls, img, temperature, class_sets))


def local_contrastive_batch(patches, cls, fg, temperature=1.0):
    """Batched local loss.

    ``patches`` (B, n, D), ``cls`` (B, D), ``fg`` (B, n) boolean. Samples with
    an empty FG or empty BG are skipped. Returns (mean loss over used
    samples, number used, number skipped); the loss is 0 when none are used.
    """
    if temperature <= 0:
        raise ConfigError("temperature > 0 violated")
    logits = pairwise_cos(patches, cls[:, None, :]) / temperature
    bg = ~fg
    usable = fg.any(dim=1) & bg.any(dim=1)
    lse_bg = torch.logsumexp(logits.masked_fill(~bg, float("-inf")), dim=1, keepdim=True)
    lse_bg = torch.where(usable[:, None], lse_bg, torch.zeros_like(lse_bg))
    per_token = torch.logaddexp(logits, lse_bg) - logits
    fgf = fg.to(logits.dtype)
    per_sample = (per_token * fgf).sum(dim=1) / fgf.sum(dim=1).clamp_min(1)
    used = int(usable.sum())
    skipped = int(usable.numel() - used)
    if used == 0:
        return logits.sum() * 0.0, 0, skipped
    return per_sample[usable].mean(), used, skipped


def local_contrastive(partition, cls, temperature=1.0):
    """Local loss for one image-text pair; returns (loss, skipped)."""
    if partition.bg_tokens.shape[0] == 0:
        raise DegeneratePartitionError("BG token set is empty")
    cls = cls.cls_token if hasattr(cls, "cls_token") else cls
    cls = cls.reshape(-1)
    if partition.fg_tokens.shape[0] == 0:
        return cls.sum() * 0.0, True
    tokens = torch.cat([partition.fg_tokens, partition.bg_tokens])[None]
    fg = torch.zeros(1, tokens.shape[1], dtype=torch.bool)
    fg[0, :partition.fg_tokens.shape[0]] = True
    loss, _, _ = local_contrastive_batch(tokens, cls[None], fg, temperature)
    return loss, False


def dice_loss(pred, target, eps=1.0):
    """1 - (2 sum(p t) + eps) / (sum p + sum t + eps), averaged over a leading batch dim."""
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise RangeError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    for name, t in (("pred", pred), ("target", target)):
        if t.numel() and (t.min() < 0 or t.max() > 1):
            raise RangeError(f"{name} values outside [0, 1]")
    if pred.dim() <= 2:
        pred, target = pred[None], target[None]
    p = pred.reshape(pred.shape[0], -1)
    t = target.reshape(target.shape[0], -1)
    score = (2 * (p * t).sum(1) + eps) / (p.sum(1) + t.sum(1) + eps)
    return (1 - score).mean()


def total_loss(glb, lcl, seg, weights=None):
    weights = weights or LossWeights()
    for name, value in (("glb", glb), ("lcl", lcl), ("seg", seg)):
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericalError(f"loss component {name} is {v}", component=name)
    return weights.w_glb * glb + weights.w_lcl * lcl + weights.w_seg * seg
