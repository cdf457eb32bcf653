"""Pixel decoder: patch tokens cross-attend to the text token, then upsample."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DimensionError


@dataclass
class GroundingMap:
    scores: torch.Tensor        # (B, H, W) in [0, 1]
    patch_scores: torch.Tensor  # (B, rows, cols), scores averaged over each patch
    logits: torch.Tensor = None  # (B, H, W) pre-sigmoid; same ranking as scores without saturation ties


class TextCrossAttention(nn.Module):
    """Multi-head attention of patch queries over {[CLS], null}.

    The null slot has a learned key and a zero value, so each patch decides
    per head how much of the text to absorb. Key/value projections carry no
    bias: a zero [CLS] contributes nothing.
    """

    def __init__(self, width, heads):
        super().__init__()
        if width % heads:
            raise DimensionError("decoder width must be divisible by heads")
        self.heads = heads
        self.ln_q = nn.LayerNorm(width)
        self.q = nn.Linear(width, width)
        self.k = nn.Linear(width, width, bias=False)
        self.v = nn.Linear(width, width, bias=False)
        self.null_key = nn.Parameter(torch.zeros(heads, width // heads))
        self.proj = nn.Linear(width, width)

    def forward(self, patches, cls):
        b, n, d = patches.shape
        hd = d // self.heads
        text = F.normalize(cls, dim=-1) * math.sqrt(d)
        q = self.q(self.ln_q(patches)).reshape(b, n, self.heads, hd).transpose(1, 2)
        k = self.k(text).reshape(b, self.heads, 1, hd)
        v = self.v(text).reshape(b, self.heads, 1, hd)
        null_k = self.null_key.to(q.dtype)[None, :, None, :].expand(b, -1, -1, -1)
        keys = torch.cat([k, null_k], dim=2)
        values = torch.cat([v, torch.zeros_like(v)], dim=2)
        attn = (q @ keys.transpose(-2, -1) / math.sqrt(hd)).softmax(dim=-1)
        out = (attn @ values).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class GroundingDecoder(nn.Module):
    def __init__(self, width, heads, patch_size, channels=16):
        super().__init__()
        self.width = width
        self.patch_size = patch_size
        self.cross = TextCrossAttention(width, heads)
        self.ln = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))
        self.to_channels = nn.Linear(width, channels)
        first = 2 if patch_size % 2 == 0 else 1
        second = patch_size // first
        self.up1 = nn.ConvTranspose2d(channels, channels, first, stride=first)
        self.up2 = nn.ConvTranspose2d(channels, channels // 2, second, stride=second)
        self.out = nn.Conv2d(channels // 2, 1, 3, padding=1)

    def fuse(self, patches, cls):
        x = patches + self.cross(patches, cls)
        return x + self.mlp(self.ln(x))

    def forward(self, bundle, cls):
        cls = cls.cls_token if hasattr(cls, "cls_token") else cls
        patches = bundle.patch_tokens
        if patches.shape[-1] != self.width or cls.shape[-1] != self.width:
            raise DimensionError(
                f"decoder width {self.width} vs patch {patches.shape[-1]} / text {cls.shape[-1]}")
        rows, cols = bundle.grid_shape
        x = self.to_channels(self.fuse(patches, cls))
        x = x.transpose(1, 2).reshape(x.shape[0], -1, rows, cols)
        x = F.gelu(self.up1(x))
        x = F.gelu(self.up2(x))
        logits = self.out(x)[:, 0]
        scores = torch.sigmoid(logits)
        patch_scores = F.avg_pool2d(scores[:, None], self.patch_size)[:, 0]
        return GroundingMap(scores=scores, patch_scores=patch_scores, logits=logits)


def binarize(grounding, threshold=0.5):
    """Pixels strictly above ``threshold`` become 1."""
    scores = grounding.scores if hasattr(grounding, "scores") else grounding
    if isinstance(scores, torch.Tensor):
        return (scores > threshold).to(torch.uint8)
    import numpy as np
    return (np.asarray(scores) > threshold).astype(np.uint8)
