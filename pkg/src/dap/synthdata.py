"""Synthetic grounding benchmark: small textured lesions on a canonical background.

Every image shares one smooth background layout (two dark "lung" fields on a
brighter body with a central band), jittered slightly per sample. Lesions are
axis-aligned ellipses filled with a class-specific grating whose mean sits a
fixed contrast above the local background. Each image references a single
class and carries one templated text description of it.
"""

import dataclasses
import itertools
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .errors import ConfigError, GenerationError, UnknownClassError

MAX_TEXT_LEN = 77
PAD_ID = 0
UNK_ID = 1

_DISEASES = ["nodule", "opacity", "effusion", "consolidation", "mass",
             "atelectasis", "edema", "pneumothorax"]
_OPENERS = ["findings show", "there is", "the image demonstrates", "evidence of",
            "consistent with", "appearance suggests", "notable for", "study reveals",
            "we observe", "radiograph shows"]
_MODIFIERS = ["a", "a small", "a focal", "a subtle", "an area of"]


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    patch_size: int = 8
    num_classes: int = 4
    lesions_per_image: tuple = (1, 3)
    lesion_area_fraction: tuple = (0.01, 0.10)
    templates_per_class: int = 10
    noise_level: float = 0.03
    seed: int = 0
    channels: int = 1
    contrast_floor: float = 0.15
    margin: int = 1
    max_retries: int = 200

    def __post_init__(self):
        object.__setattr__(self, "lesions_per_image", tuple(int(v) for v in self.lesions_per_image))
        object.__setattr__(self, "lesion_area_fraction",
                           tuple(float(v) for v in self.lesion_area_fraction))

    def validate(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size divisible by patch_size violated: {self.image_size} % {self.patch_size} != 0")
        lo, hi = self.lesion_area_fraction
        if not (lo > 0 and hi < 0.5 and lo <= hi):
            raise ConfigError(
                f"lesion_area_fraction must satisfy 0 < min <= max < 0.5, got ({lo}, {hi})")
        if self.templates_per_class < 1:
            raise ConfigError("templates_per_class >= 1 violated")
        if self.templates_per_class > len(_OPENERS) * len(_MODIFIERS):
            raise ConfigError(
                f"templates_per_class <= {len(_OPENERS) * len(_MODIFIERS)} violated")
        if self.num_classes < 1:
            raise ConfigError("num_classes >= 1 violated")
        kmin, kmax = self.lesions_per_image
        if not 1 <= kmin <= kmax:
            raise ConfigError(f"lesions_per_image must satisfy 1 <= min <= max, got ({kmin}, {kmax})")
        if self.noise_level < 0:
            raise ConfigError("noise_level >= 0 violated")
        if self.channels < 1:
            raise ConfigError("channels >= 1 violated")
        if self.margin < 0 or 2 * self.margin >= self.image_size:
            raise ConfigError("margin must be >= 0 and leave room for lesions")
        if self.max_retries < 1:
            raise ConfigError("max_retries >= 1 violated")
        return self

    @property
    def grid(self):
        return self.image_size // self.patch_size

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lesions_per_image"] = list(self.lesions_per_image)
        d["lesion_area_fraction"] = list(self.lesion_area_fraction)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class Sample:
    image: np.ndarray          # (C, H, W) float32 in [0, 1]
    text_tokens: tuple
    gt_mask: np.ndarray        # (H, W) uint8, mask of the referenced class
    class_ids: tuple
    lesion_area: int
    lesion_count: int
    id: str = ""

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.id == other.id and self.text_tokens == other.text_tokens
                and self.class_ids == other.class_ids and self.lesion_area == other.lesion_area
                and self.lesion_count == other.lesion_count
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.gt_mask, other.gt_mask))


class Vocabulary:
    """Whitespace tokenizer over a fixed word table; 0 is padding, 1 is unknown."""

    def __init__(self, words):
        self.words = ["<pad>", "<unk>"] + sorted(set(words))
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def encode(self, text):
        return tuple(self.index.get(w, UNK_ID) for w in text.split())

    def decode(self, tokens):
        return " ".join(self.words[t] for t in tokens if t != PAD_ID)


@dataclass
class TemplateBank:
    vocab: Vocabulary
    templates: dict = field(default_factory=dict)   # class id -> list of token tuples
    texts: dict = field(default_factory=dict)


def class_name(class_id):
    return _DISEASES[class_id] if class_id < len(_DISEASES) else f"lesion{class_id}"


def build_template_bank(num_classes, templates_per_class):
    combos = list(itertools.product(range(len(_MODIFIERS)), range(len(_OPENERS))))
    texts = {}
    for c in range(num_classes):
        name = class_name(c)
        texts[c] = [f"{_OPENERS[o]} {_MODIFIERS[m]} {name}" for m, o in combos[:templates_per_class]]
    vocab = Vocabulary(w for lines in texts.values() for line in lines for w in line.split())
    templates = {c: [vocab.encode(t) for t in lines] for c, lines in texts.items()}
    return TemplateBank(vocab=vocab, templates=templates, texts=texts)


def make_text(class_id, rng, bank):
    if class_id not in bank.templates:
        raise UnknownClassError(f"class {class_id} not in template bank")
    options = bank.templates[class_id]
    if not options:
        raise UnknownClassError(f"template bank for class {class_id} is empty")
    tokens = options[int(rng.integers(len(options)))]
    if len(tokens) > MAX_TEXT_LEN:
        raise GenerationError(f"template longer than {MAX_TEXT_LEN} tokens")
    return tuple(tokens)


def canonical_background(size):
    """Noise-free anatomy-like layout shared by every image."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    body = 0.42 + 0.08 * np.cos(np.pi * (yy - 0.5)) - 0.05 * yy
    lung = np.zeros_like(body)
    for cx in (0.3, 0.7):
        r = ((xx - cx) / 0.17) ** 2 + ((yy - 0.5) / 0.33) ** 2
        lung += np.exp(-r ** 2)
    band = np.exp(-((xx - 0.5) / 0.05) ** 2)
    return body - 0.16 * lung + 0.08 * band


def class_texture(class_id, num_classes, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    theta = np.pi * class_id / max(num_classes, 1)
    period = 3.0 + (class_id % 2)
    return np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period)


def class_contrast(class_id, config):
    return config.contrast_floor + 0.05 + 0.04 * class_id


def _ellipse(size, cy, cx, ay, ax):
    yy, xx = np.mgrid[0:size, 0:size]
    return (((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2) <= 1.0


def _dilate(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _place_lesions(rng, config):
    size = config.image_size
    total_px = size * size
    lo, hi = config.lesion_area_fraction
    kmin, kmax = config.lesions_per_image
    lo_px, hi_px = lo * total_px, hi * total_px
    for _ in range(config.max_retries):
        count = int(rng.integers(kmin, kmax + 1))
        inner_lo, inner_hi = lo_px * 1.15, hi_px * 0.95
        if inner_lo >= inner_hi:
            inner_lo, inner_hi = lo_px, hi_px
        target = rng.uniform(inner_lo, inner_hi)
        shares = rng.dirichlet(np.full(count, 3.0)) * target
        mask = np.zeros((size, size), dtype=bool)
        ok = True
        for area in shares:
            aspect = rng.uniform(0.6, 1.6)
            ay = max(np.sqrt(area * aspect / np.pi), 0.8)
            ax = max(np.sqrt(area / (aspect * np.pi)), 0.8)
            lo_y = config.margin + ay
            lo_x = config.margin + ax
            hi_y = size - 1 - config.margin - ay
            hi_x = size - 1 - config.margin - ax
            if lo_y > hi_y or lo_x > hi_x:
                ok = False
                break
            placed = False
            forbidden = _dilate(mask)
            for _ in range(config.max_retries):
                cy, cx = rng.uniform(lo_y, hi_y), rng.uniform(lo_x, hi_x)
                blob = _ellipse(size, cy, cx, ay, ax)
                if blob.any() and not (blob & forbidden).any():
                    mask |= blob
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok and lo_px <= mask.sum() <= hi_px:
            return mask, count
    raise GenerationError(
        f"could not place non-overlapping lesions within area range after {config.max_retries} retries")


def render_sample(rng, config, bank=None, sample_id=""):
    """Draw one sample from ``rng`` (a ``numpy.random.Generator``)."""
    config.validate()
    if bank is None:
        bank = build_template_bank(config.num_classes, config.templates_per_class)
    size = config.image_size
    class_id = int(rng.integers(config.num_classes))
    mask, count = _place_lesions(rng, config)

    dy, dx = rng.integers(-2, 3, size=2)
    bg = np.roll(canonical_background(size), (int(dy), int(dx)), axis=(0, 1))
    bg = bg * rng.uniform(0.92, 1.08)
    texture = class_texture(class_id, config.num_classes, size)
    lesion = bg + class_contrast(class_id, config) + 0.05 * texture
    clean = np.where(mask, lesion, bg)
    channels = []
    for _ in range(config.channels):
        noisy = clean + config.noise_level * rng.standard_normal((size, size))
        channels.append(np.clip(noisy, 0.0, 1.0))
    image = np.stack(channels).astype(np.float32)
    text = make_text(class_id, rng, bank)
    return Sample(image=image, text_tokens=text, gt_mask=mask.astype(np.uint8),
                  class_ids=(class_id,), lesion_area=int(mask.sum()), lesion_count=count,
                  id=sample_id)


def generate_dataset(config, n, start=0):
    """Return samples ``start .. start+n-1``; a pure function of ``(config, n, start)``.

    Sample ``i`` draws from the ``i``-th spawned child of ``SeedSequence(seed)``,
    so sample ``i`` is the same for every ``n > i`` and disjoint index ranges
    give disjoint splits.
    """
    config.validate()
    if n < 0 or start < 0:
        raise ConfigError("n >= 0 and start >= 0 violated")
    bank = build_template_bank(config.num_classes, config.templates_per_class)
    children = np.random.SeedSequence(config.seed).spawn(start + n)[start:]
    return [render_sample(np.random.default_rng(child), config, bank, sample_id=f"{start + i:06d}")
            for i, child in enumerate(children)]


def split_indices(n, fractions=(0.8, 0.1, 0.1)):
    """Contiguous train/val/test index ranges."""
    fractions = np.asarray(fractions, dtype=float)
    bounds = np.floor(np.cumsum(fractions / fractions.sum()) * n).astype(int)
    bounds[-1] = n
    starts = np.concatenate([[0], bounds[:-1]])
    return [list(range(s, e)) for s, e in zip(starts, bounds)]


def write_dataset(directory, samples, config=None):
    """Write ``manifest.json`` plus raw grid files under ``directory``."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    records = []
    for s in samples:
        image_file = f"images/{s.id}.grid"
        mask_file = f"masks/{s.id}_c{s.class_ids[0]}.grid"
        binfmt.write_grid(os.path.join(directory, image_file), s.image)
        binfmt.write_grid(os.path.join(directory, mask_file), s.gt_mask)
        records.append({
            "id": s.id,
            "image_file": image_file,
            "mask_files": [mask_file],
            "class_ids": list(s.class_ids),
            "text_tokens": list(s.text_tokens),
            "lesion_area": s.lesion_area,
            "lesion_count": s.lesion_count,
        })
    binfmt.atomic_write_text(os.path.join(directory, "manifest.json"), json.dumps(records, indent=1))
    if config is not None:
        binfmt.atomic_write_text(os.path.join(directory, "synth.json"),
                                 json.dumps(config.to_dict(), indent=1, sort_keys=True))


def read_dataset(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        records = json.load(fh)
    samples = []
    for r in records:
        masks = [binfmt.read_grid(os.path.join(directory, f)) for f in r["mask_files"]]
        mask = np.maximum.reduce(masks) if len(masks) > 1 else masks[0]
        samples.append(Sample(
            image=binfmt.read_grid(os.path.join(directory, r["image_file"])),
            text_tokens=tuple(r["text_tokens"]), gt_mask=mask,
            class_ids=tuple(r["class_ids"]), lesion_area=int(r["lesion_area"]),
            lesion_count=int(r["lesion_count"]), id=r["id"]))
    return samples


def read_synth_config(directory):
    path = os.path.join(directory, "synth.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return SynthConfig.from_dict(json.load(fh))


def load_synth_config(path):
    with open(path) as fh:
        return SynthConfig.from_dict(json.load(fh)).validate()
