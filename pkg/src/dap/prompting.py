"""Feature-space prompting with a relevance map and FG/BG token selection."""

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError

DEFAULT_THRESHOLD = 0.3


@dataclass
class FgBgPartition:
    fg_index: np.ndarray
    bg_index: np.ndarray
    fg_tokens: torch.Tensor     # (|FG|, D)
    bg_tokens: torch.Tensor     # (|BG|, D)
    threshold_used: float


def _weights(prompt):
    w = prompt.weights if hasattr(prompt, "weights") else prompt
    return torch.as_tensor(w)


def apply_prompt(tokens, prompt):
    """Scale each patch token by its prompt weight.

    ``tokens`` is (n, D) or (B, n, D) patch tokens only; the global token is
    never passed here. ``prompt`` supplies one weight per patch.
    """
    w = _weights(prompt).to(tokens.dtype)
    if tokens.dim() == 2:
        w = w.reshape(-1)
        if w.numel() != tokens.shape[0]:
            raise DimensionError(f"{w.numel()} prompt weights for {tokens.shape[0]} tokens")
        return tokens * w[:, None]
    w = w.reshape(w.shape[0] if w.dim() == 3 else 1, -1)
    if w.shape[-1] != tokens.shape[1]:
        raise DimensionError(f"{w.shape[-1]} prompt weights for {tokens.shape[1]} tokens")
    return tokens * w[..., None]


def fg_mask(prompt, threshold=DEFAULT_THRESHOLD):
    """Boolean FG indicator, flattened over the patch grid (batched or not)."""
    w = _weights(prompt)
    flat = w.reshape(w.shape[0], -1) if w.dim() == 3 else w.reshape(-1)
    return flat > threshold


def select_fg_bg(tokens, prompt, threshold=DEFAULT_THRESHOLD):
    """Split (n, D) patch tokens into FG (weight > threshold) and BG."""
    mask = fg_mask(prompt, threshold)
    if mask.dim() != 1 or mask.numel() != tokens.shape[0]:
        raise DimensionError(f"prompt with {mask.numel()} entries for {tokens.shape[0]} tokens")
    idx = torch.arange(tokens.shape[0])
    return FgBgPartition(fg_index=idx[mask].numpy(), bg_index=idx[~mask].numpy(),
                         fg_tokens=tokens[mask], bg_tokens=tokens[~mask],
                         threshold_used=float(threshold))


def upsample_prompt(prompt, patch_size):
    """Nearest-neighbour resample of a (.., rows, cols) map to pixel resolution."""
    w = _weights(prompt)
    return w.repeat_interleave(patch_size, dim=-2).repeat_interleave(patch_size, dim=-1)
