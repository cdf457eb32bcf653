"""Stacked tensors for a list of samples, plus the on-disk prompt cache."""

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from . import binfmt


@dataclass
class Batchable:
    images: torch.Tensor      # (N, C, H, W) float32
    masks: np.ndarray         # (N, H, W) uint8
    tokens: list
    class_sets: list
    areas: np.ndarray
    counts: np.ndarray
    ids: list

    def __len__(self):
        return len(self.ids)

    def subset(self, index):
        index = list(index)
        return Batchable(images=self.images[index], masks=self.masks[index],
                         tokens=[self.tokens[i] for i in index],
                         class_sets=[self.class_sets[i] for i in index],
                         areas=self.areas[index], counts=self.counts[index],
                         ids=[self.ids[i] for i in index])


def stack(samples):
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    return Batchable(
        images=torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)),
        masks=np.stack([s.gt_mask for s in samples]).astype(np.uint8),
        tokens=[tuple(s.text_tokens) for s in samples],
        class_sets=[tuple(s.class_ids) for s in samples],
        areas=np.array([s.lesion_area for s in samples]),
        counts=np.array([s.lesion_count for s in samples]),
        ids=[s.id for s in samples])


def batches(n, batch_size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def write_prompt_cache(directory, ids, weights, meta=None):
    """One raw float32 grid per sample plus ``manifest.json`` mapping id -> file."""
    os.makedirs(directory, exist_ok=True)
    records = []
    for sid, w in zip(ids, weights):
        name = f"{sid}.grid"
        binfmt.write_grid(os.path.join(directory, name), np.asarray(w, dtype=np.float32))
        records.append({"id": sid, "file": name})
    manifest = {"prompts": records, "meta": meta or {}}
    binfmt.atomic_write_text(os.path.join(directory, "manifest.json"), json.dumps(manifest, indent=1))


def read_prompt_cache(directory, ids=None):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    table = {r["id"]: r["file"] for r in manifest["prompts"]}
    wanted = ids if ids is not None else list(table)
    missing = [i for i in wanted if i not in table]
    if missing:
        raise KeyError(f"prompt cache lacks {len(missing)} ids, e.g. {missing[:3]}")
    return np.stack([binfmt.read_grid(os.path.join(directory, table[i])) for i in wanted])
