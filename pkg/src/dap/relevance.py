"""Prompt maps from gradient-weighted attention relevance.

The relevance matrix starts at identity and is updated layer by layer with
the head-averaged, positively clamped product of each attention map and the
gradient of the image-text matching score with respect to it::

    R <- R + mean_h[(dA * A)^+] @ R

The [IMG] row of the final R, restricted to patch columns and min-max
normalised over the grid, is the prompt map.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InstrumentationError
from .model import pairwise_cos

SOURCES = ("relevance", "corrupted", "uniform", "external")
IMPORTANT = 0.3

# Incremented per relevance_map call; lets callers assert inference never extracts.
EXTRACTION_CALLS = 0


@dataclass
class PromptMap:
    weights: np.ndarray         # (rows, cols) or (B, rows, cols), entries in [0, 1]
    source: str = "relevance"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown prompt source {self.source!r}")

    def __getitem__(self, i):
        return PromptMap(self.weights[i], self.source)

    def __len__(self):
        return len(self.weights)


def uniform_prompt(grid_shape, batch=None):
    shape = tuple(grid_shape) if batch is None else (batch, *grid_shape)
    return PromptMap(np.ones(shape, dtype=np.float32), "uniform")


def normalize_minmax(raw):
    """Min-max normalise each map over its last two axes; constant maps become ones."""
    raw = torch.as_tensor(raw)
    flat = raw.reshape(*raw.shape[:-2], -1)
    lo = flat.min(dim=-1, keepdim=True).values
    hi = flat.max(dim=-1, keepdim=True).values
    span = hi - lo
    const = span <= 0
    out = torch.where(const, torch.ones_like(flat), (flat - lo) / torch.where(const, torch.ones_like(span), span))
    return out.reshape(raw.shape)


def rollout(attns, grads):
    """Relevance recurrence over layers; returns R of shape (B, N, N).

    ``attns`` and ``grads`` are per-layer (B, heads, N, N) tensors.
    """
    if not attns:
        raise InstrumentationError("no attention records to propagate")
    b, _, n, _ = attns[0].shape
    r = torch.eye(n, dtype=attns[0].dtype).expand(b, n, n).clone()
    for a, g in zip(attns, grads):
        cam = (g * a).clamp(min=0).mean(dim=1)
        r = r + cam @ r
    return r


def matching_score(model, images, tokens):
    """cos([IMG], [CLS]) of the unprompted pass, one value per pair."""
    bundle = model.encode_image(images)
    text = model.encode_text(tokens)
    return pairwise_cos(bundle.img_token, text.cls_token)


class GradientAttentionBackend:
    """Default interpretability rule: gradient-weighted attention rollout."""

    name = "gradient_attention"

    def __call__(self, model, images, tokens):
        with torch.enable_grad():
            bundle = model.encode_image(images, record=True)
            if not bundle.layer_trace:
                raise InstrumentationError("image encoder returned no layer trace")
            text = model.encode_text(tokens)
            score = pairwise_cos(bundle.img_token, text.cls_token)
            attns = [rec.attn for rec in bundle.layer_trace]
            grads = torch.autograd.grad(score.sum(), attns)
        r = rollout([a.detach() for a in attns], [g.detach() for g in grads])
        rows, cols = bundle.grid_shape
        return r[:, 0, 1:].reshape(-1, rows, cols)


BACKENDS = {GradientAttentionBackend.name: GradientAttentionBackend()}


def register_backend(name, backend):
    """Install another interpretability rule; it maps (model, images, tokens) to raw (B, rows, cols) maps."""
    BACKENDS[name] = backend


def relevance_map(model, images, tokens, backend="gradient_attention"):
    """Prompt maps for a batch of image-text pairs (images (B, C, H, W))."""
    global EXTRACTION_CALLS
    EXTRACTION_CALLS += 1
    images = torch.as_tensor(images, dtype=next(model.parameters()).dtype)
    if images.dim() == 3:
        images = images[None]
        tokens = [tokens]
    raw = BACKENDS[backend](model, images, tokens)
    return PromptMap(normalize_minmax(raw).cpu().numpy(), "relevance")


def corrupt_prompt(prompt, k_percent):
    """Zero the top ``k_percent`` of important entries (value > 0.3) of each map."""
    w = np.array(prompt.weights, copy=True)
    maps = w.reshape(-1, *w.shape[-2:]) if w.ndim >= 2 else w.reshape(1, -1)
    for m in maps:
        flat = m.reshape(-1)
        important = np.flatnonzero(flat > IMPORTANT)
        count = int(np.floor(len(important) * k_percent / 100.0 + 1e-9))
        if count == 0:
            continue
        order = important[np.argsort(-flat[important], kind="stable")]
        flat[order[:count]] = 0.0
    if k_percent == 0:
        return PromptMap(w, prompt.source)
    return PromptMap(w, "corrupted")
