"""Two-tower vision-language model with feature-space prompting.

Both towers are small pre-norm transformers with a learned global slot at
position 0 ([IMG] for images, [CLS] for text). All image tokens pass through
the final LayerNorm and projection so patch tokens live in the shared space
alongside [IMG] and [CLS].
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import binfmt
from .config import ModelConfig
from .errors import DimensionError, LengthError, UndefinedSimilarityError
from .synthdata import MAX_TEXT_LEN, PAD_ID


@dataclass
class VisionEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    channels: int = 1
    depth: int = 4
    width: int = 64
    heads: int = 4
    embed_dim: int = 64
    mlp_ratio: int = 2
    pos_embed: bool = True
    pixel_mean: float = 0.0
    pixel_std: float = 1.0

    def validate(self):
        if self.pixel_std <= 0:
            raise DimensionError("pixel_std must be > 0")
        if self.width % self.heads:
            raise DimensionError("vision width must be divisible by heads")
        if self.depth < 1:
            raise DimensionError("vision depth must be >= 1")
        if self.image_size % self.patch_size:
            raise DimensionError("image_size must be divisible by patch_size")
        return self


@dataclass
class TextEncoderConfig:
    vocab_size: int = 64
    depth: int = 2
    width: int = 64
    heads: int = 4
    embed_dim: int = 64
    max_len: int = MAX_TEXT_LEN
    mlp_ratio: int = 2

    def validate(self):
        if self.width % self.heads:
            raise DimensionError("text width must be divisible by heads")
        if self.depth < 1:
            raise DimensionError("text depth must be >= 1")
        return self


@dataclass
class LayerRecord:
    tokens: torch.Tensor       # (B, N, width) residual stream entering the layer
    attn: torch.Tensor         # (B, heads, N, N)


@dataclass
class TokenBundle:
    img_token: torch.Tensor    # (B, D)
    patch_tokens: torch.Tensor  # (B, n, D)
    grid_shape: tuple
    layer_trace: list = field(default=None)

    def __post_init__(self):
        rows, cols = self.grid_shape
        if self.patch_tokens.shape[1] != rows * cols:
            raise DimensionError(
                f"{self.patch_tokens.shape[1]} patch tokens do not fill grid {self.grid_shape}")
        if self.img_token.shape[-1] != self.patch_tokens.shape[-1]:
            raise DimensionError("img_token and patch_tokens widths differ")


@dataclass
class TextEmbedding:
    cls_token: torch.Tensor    # (B, D)


class Attention(nn.Module):
    def __init__(self, width, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, pad_mask=None):
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-2, -1) / math.sqrt(d // self.heads)
        if pad_mask is not None:
            logits = logits.masked_fill(pad_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, width, heads, mlp_ratio=2):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(),
                                 nn.Linear(mlp_ratio * width, width))

    def forward(self, x, scale=None, pad_mask=None):
        # scale: (B, N) per-token weights; LayerNorm would cancel a residual-only
        # rescaling, so the normalized attention input is scaled as well.
        if scale is not None:
            x = x * scale[..., None]
            h = self.ln1(x) * scale[..., None]
        else:
            h = self.ln1(x)
        a, attn = self.attn(h, pad_mask)
        x = x + a
        x = x + self.mlp(self.ln2(x))
        return x, attn


def resolve_layers(spec, depth):
    """Map a layer preset name or explicit list to a sorted tuple of 1-based indices."""
    if isinstance(spec, (list, tuple, set, frozenset)):
        layers = sorted({int(v) for v in spec})
    else:
        text = str(spec).strip().lower()
        half = max(depth // 2, 1)
        presets = {
            "last": [depth],
            "first": [1],
            "first_half": list(range(1, half + 1)),
            "last_half": list(range(depth - half + 1, depth + 1)),
            "full": list(range(1, depth + 1)),
            "none": [],
        }
        if text in presets:
            layers = presets[text]
        else:
            try:
                layers = sorted({int(v) for v in text.split(",") if v.strip()})
            except ValueError as exc:
                raise DimensionError(f"unknown prompt layer spec {spec!r}") from exc
    bad = [l for l in layers if not 1 <= l <= depth]
    if bad:
        raise DimensionError(f"prompt layers {bad} outside 1..{depth}")
    return tuple(layers)


class VisionEncoder(nn.Module):
    def __init__(self, cfg: VisionEncoderConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.grid = cfg.image_size // cfg.patch_size
        n = self.grid * self.grid
        self.patch_embed = nn.Conv2d(cfg.channels, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.img_slot = nn.Parameter(torch.randn(1, 1, cfg.width) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, n + 1, cfg.width) * 0.02) if cfg.pos_embed else None
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim, bias=False)

    @property
    def grid_shape(self):
        return (self.grid, self.grid)

    def embed(self, images):
        if images.shape[-2:] != (self.cfg.image_size, self.cfg.image_size):
            raise DimensionError(f"image size {tuple(images.shape[-2:])} != {self.cfg.image_size}")
        images = (images - self.cfg.pixel_mean) / self.cfg.pixel_std
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = torch.cat([self.img_slot.expand(x.shape[0], -1, -1), x], dim=1)
        if self.pos is not None:
            x = x + self.pos
        return x

    def _scale(self, prompt, batch, dtype):
        weights = prompt.weights if hasattr(prompt, "weights") else prompt
        weights = torch.as_tensor(weights, dtype=dtype)
        n = self.grid * self.grid
        if weights.dim() == 2 and weights.shape == self.grid_shape:
            weights = weights.reshape(1, n).expand(batch, n)
        elif weights.dim() == 3:
            weights = weights.reshape(weights.shape[0], -1)
        if weights.dim() != 2 or weights.shape[1] != n or weights.shape[0] != batch:
            raise DimensionError(
                f"prompt shape {tuple(weights.shape)} does not match {batch} x {self.grid_shape} patch grid")
        ones = torch.ones(batch, 1, dtype=dtype)
        return torch.cat([ones, weights], dim=1)

    def _finish(self, x, trace):
        x = self.proj(self.ln_post(x))
        return TokenBundle(img_token=x[:, 0], patch_tokens=x[:, 1:], grid_shape=self.grid_shape,
                           layer_trace=trace)

    def forward(self, images, prompt=None, prompt_layers="last", record=False):
        x = self.embed(images)
        layers = resolve_layers(prompt_layers, self.cfg.depth) if prompt is not None else ()
        scale = self._scale(prompt, x.shape[0], x.dtype) if prompt is not None else None
        trace = [] if record else None
        for i, block in enumerate(self.blocks, start=1):
            entering = x
            x, attn = block(x, scale if i in layers else None)
            if record:
                trace.append(LayerRecord(tokens=entering, attn=attn))
        return self._finish(x, trace)

    def forward_pair(self, images, prompt, prompt_layers="last"):
        """Unprompted and prompted bundles sharing the layers before the first prompted one."""
        x = self.embed(images)
        layers = resolve_layers(prompt_layers, self.cfg.depth)
        scale = self._scale(prompt, x.shape[0], x.dtype)
        start = layers[0] if layers else self.cfg.depth + 1
        for block in self.blocks[:start - 1]:
            x, _ = block(x)
        plain, prompted = x, x
        for i, block in enumerate(self.blocks[start - 1:], start=start):
            plain, _ = block(plain)
            prompted, _ = block(prompted, scale if i in layers else None)
        return self._finish(plain, None), self._finish(prompted, None)


def pad_tokens(sequences, max_len=MAX_TEXT_LEN):
    """Right-pad token sequences into a LongTensor; overlong input raises."""
    if isinstance(sequences, torch.Tensor):
        if sequences.shape[-1] > max_len:
            raise LengthError(f"token sequence length {sequences.shape[-1]} exceeds {max_len}")
        return sequences.long()
    seqs = [list(s) for s in sequences]
    for s in seqs:
        if len(s) > max_len:
            raise LengthError(f"token sequence length {len(s)} exceeds {max_len}")
    width = max([len(s) for s in seqs] + [1])
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        if s:
            out[i, :len(s)] = torch.tensor(s, dtype=torch.long)
    return out


class TextEncoder(nn.Module):
    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.token_embed = nn.Embedding(cfg.vocab_size, cfg.width)
        self.cls_slot = nn.Parameter(torch.randn(1, 1, cfg.width) * 0.02)
        self.pos = nn.Parameter(torch.randn(1, cfg.max_len + 1, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.ln_post = nn.LayerNorm(cfg.width)
        self.proj = nn.Linear(cfg.width, cfg.embed_dim, bias=False)

    def forward(self, tokens):
        tokens = pad_tokens(tokens, self.cfg.max_len)
        if tokens.numel() and int(tokens.max()) >= self.cfg.vocab_size:
            raise DimensionError(f"token id {int(tokens.max())} >= vocab size {self.cfg.vocab_size}")
        b, n = tokens.shape
        x = self.token_embed(tokens)
        x = torch.cat([self.cls_slot.expand(b, -1, -1).to(x.dtype), x], dim=1) + self.pos[:, :n + 1]
        pad = torch.cat([torch.zeros(b, 1, dtype=torch.bool), tokens == PAD_ID], dim=1)
        for block in self.blocks:
            x, _ = block(x, pad_mask=pad)
        return TextEmbedding(cls_token=self.proj(self.ln_post(x[:, 0])))


class DAPModel(nn.Module):
    """Image tower, text tower and grounding decoder under one parameter tree."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        from .decoder import GroundingDecoder

        self.cfg = cfg
        self.vision = VisionEncoder(VisionEncoderConfig(
            image_size=cfg.image_size, patch_size=cfg.patch_size, channels=cfg.channels,
            depth=cfg.vision_depth, width=cfg.vision_width, heads=cfg.vision_heads,
            embed_dim=cfg.embed_dim, mlp_ratio=cfg.mlp_ratio, pos_embed=cfg.pos_embed,
            pixel_mean=cfg.pixel_mean, pixel_std=cfg.pixel_std))
        self.text = TextEncoder(TextEncoderConfig(
            vocab_size=cfg.vocab_size, depth=cfg.text_depth, width=cfg.text_width,
            heads=cfg.text_heads, embed_dim=cfg.embed_dim, max_len=cfg.max_len,
            mlp_ratio=cfg.mlp_ratio))
        self.decoder = GroundingDecoder(cfg.embed_dim, cfg.decoder_heads, cfg.patch_size,
                                        cfg.decoder_channels)

    def encode_image(self, images, prompt=None, prompt_layers="last", record=False):
        return self.vision(images, prompt, prompt_layers, record)

    def encode_text(self, tokens):
        return self.text(tokens)

    def ground(self, bundle, cls):
        return self.decoder(bundle, cls)


def encode_image(model, image, prompt=None, prompt_layers="last", record=False):
    """Encode one image (C, H, W) or a batch (B, C, H, W)."""
    x = torch.as_tensor(image, dtype=next(model.parameters()).dtype)
    if x.dim() == 3:
        x = x[None]
    vision = model.vision if hasattr(model, "vision") else model
    return vision(x, prompt, prompt_layers, record)


def encode_text(model, tokens):
    text = model.text if hasattr(model, "text") else model
    if len(tokens) == 0 or not isinstance(tokens[0], (list, tuple, torch.Tensor, np.ndarray)):
        tokens = [list(tokens)]
    return text(tokens)


def cosine_sim(a, b):
    """Cosine similarity of two non-zero vectors."""
    a = torch.as_tensor(a, dtype=torch.float64).reshape(-1)
    b = torch.as_tensor(b, dtype=torch.float64).reshape(-1)
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise UndefinedSimilarityError("cosine similarity of a zero vector is undefined")
    return float(torch.clamp((a @ b) / (na * nb), -1.0, 1.0))


def pairwise_cos(a, b, eps=1e-12):
    """Cosine along the last dim with broadcasting; differentiable."""
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(eps)


def patch_norm_map(bundle):
    """Euclidean norm of every patch token, shaped (B, rows, cols)."""
    norms = bundle.patch_tokens.norm(dim=-1)
    return norms.reshape(norms.shape[0], *bundle.grid_shape)


def build_model(cfg: ModelConfig, seed=0, dtype=torch.float32):
    torch.manual_seed(seed)
    return DAPModel(cfg).to(dtype)


def model_config_dict(cfg):
    from dataclasses import asdict
    return asdict(cfg)


def save_model(path, model, extra=None):
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    config = {"model": model_config_dict(model.cfg), "dtype": str(next(model.parameters()).dtype)}
    if extra:
        config.update(extra)
    binfmt.write_checkpoint(path, tensors, config)


def load_model(path):
    tensors, config = binfmt.read_checkpoint(path)
    cfg = ModelConfig(**config["model"])
    dtype = torch.float64 if config.get("dtype") == "torch.float64" else torch.float32
    model = DAPModel(cfg).to(dtype)
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    model.load_state_dict(state)
    model.eval()
    return model, config
