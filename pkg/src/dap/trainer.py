"""Training orchestration: baseline pretraining, prompted training, fine-tuning, evaluation."""

import copy
import json
import logging
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import binfmt, relevance
from .config import TrainConfig
from .data import Batchable, batches
from .errors import NumericalError
from .losses import (dice_loss, global_contrastive, local_contrastive_batch, symmetric_contrastive,
                     total_loss)
from .metrics import dice, score_sample, summarize
from .model import TokenBundle, build_model, save_model
from .prompting import fg_mask, upsample_prompt
from .relevance import PromptMap, corrupt_prompt, relevance_map

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    """Non-finite loss; ``last_good`` holds the most recent finite state dict."""

    def __init__(self, message, component=None, last_good=None):
        super().__init__(message, component)
        self.last_good = last_good


@dataclass
class RunRecord:
    config: dict
    losses: list = field(default_factory=list)
    metrics: object = None
    checkpoint: str = ""
    wall_clock: float = 0.0
    extras: dict = field(default_factory=dict)


def _seed_all(seed):
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def _finite_or_abort(loss, model, last_good, component="total"):
    value = float(loss.detach())
    if not math.isfinite(value):
        if last_good is not None:
            model.load_state_dict(last_good)
        raise TrainingDiverged(f"non-finite {component} loss {value}", component, last_good)
    return value


def pretrain_baseline(train: Batchable, cfg: TrainConfig, vocab_size):
    """Global image-text contrastive training of both towers; no prompting, no decoder."""
    cfg.validate()
    rng = _seed_all(cfg.seed)
    mcfg = _with(cfg.model, vocab_size=vocab_size)
    model = build_model(mcfg, seed=cfg.seed)
    params = list(model.vision.parameters()) + list(model.text.parameters())
    opt = torch.optim.Adam(params, lr=cfg.pretrain.lr)
    history = []
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(cfg.pretrain.epochs):
        total, steps = 0.0, 0
        for idx in batches(len(train), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            img = model.vision(train.images[idx]).img_token
            cls = model.text([train.tokens[i] for i in idx]).cls_token
            loss = symmetric_contrastive(img, cls, cfg.pretrain.temperature,
                                         [train.class_sets[i] for i in idx])
            value = _finite_or_abort(loss, model, last_good, "glb")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value
            steps += 1
        history.append(total / max(steps, 1))
        last_good = copy.deepcopy(model.state_dict())
        log.info("pretrain epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return model, history


def _with(dc, **changes):
    d = asdict(dc)
    d.update(changes)
    return type(dc)(**d)


def extract_prompts(model, data: Batchable, batch_size=64):
    """Prompt maps for every sample, shape (N, rows, cols) float32."""
    model.eval()
    out = []
    for idx in batches(len(data), batch_size):
        pm = relevance_map(model, data.images[idx], [data.tokens[i] for i in idx])
        out.append(pm.weights.astype(np.float32))
    return np.concatenate(out)


def _freeze(model, cfg):
    for p in model.text.parameters():
        p.requires_grad_(not cfg.freeze_text)
    for p in model.vision.parameters():
        p.requires_grad_(not cfg.freeze_vision)


def dap_step_losses(model, images, tokens, class_sets, prompts, cfg: TrainConfig):
    """Loss components for one batch; ``prompts`` is a (B, rows, cols) tensor."""
    lw = cfg.loss
    if cfg.prompt.enabled:
        plain, prompted = model.vision.forward_pair(images, prompts, cfg.prompt.layers)
        img = prompted.img_token
    else:
        plain = model.vision(images)
        img = plain.img_token
    cls = model.text(tokens).cls_token
    zero = img.sum() * 0.0
    glb = (global_contrastive(img, cls, lw.temperature, class_sets, lw.literal_denominator)
           if lw.w_glb > 0 else zero)
    skipped = 0
    if lw.w_lcl > 0:
        fg = fg_mask(prompts, cfg.prompt.threshold)
        lcl, _, skipped = local_contrastive_batch(plain.patch_tokens, cls, fg, lw.temperature)
    else:
        lcl = zero
    if lw.w_seg > 0:
        if lw.seg_to_encoder:
            pred = model.decoder(plain, cls).scores
        else:
            # The pseudo-label loss trains the decoder only; the encoders are shaped by the contrastive terms.
            frozen = TokenBundle(plain.img_token.detach(), plain.patch_tokens.detach(), plain.grid_shape)
            pred = model.decoder(frozen, cls.detach()).scores
        target = upsample_prompt(prompts, model.cfg.patch_size)
        seg = dice_loss(pred, target, lw.dice_eps)
    else:
        seg = zero
    return glb, lcl, seg, skipped


def train_dap(baseline, train: Batchable, cfg: TrainConfig, prompts=None):
    """Prompt-guided training from a baseline checkpoint.

    ``prompts`` are pre-extracted maps (N, rows, cols); when omitted they are
    extracted from the frozen baseline before any update.
    """
    cfg.validate()
    rng = _seed_all(cfg.seed)
    if prompts is None:
        prompts = extract_prompts(baseline, train)
    prompts = np.asarray(prompts, dtype=np.float32)
    if cfg.prompt.corrupt_k > 0:
        prompts = corrupt_prompt(PromptMap(prompts), cfg.prompt.corrupt_k).weights
    prompts = torch.from_numpy(prompts)
    model = copy.deepcopy(baseline)
    _freeze(model, cfg)
    model.train()
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr)
    history = []
    last_good = copy.deepcopy(model.state_dict())
    for epoch in range(cfg.epochs):
        if cfg.prompt.refresh and epoch > 0:
            model.eval()
            prompts = torch.from_numpy(extract_prompts(model, train))
            model.train()
        sums = np.zeros(4)
        steps = skipped = seen = 0
        for idx in batches(len(train), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            glb, lcl, seg, skip = dap_step_losses(
                model, train.images[idx], [train.tokens[i] for i in idx],
                [train.class_sets[i] for i in idx], prompts[idx], cfg)
            loss = total_loss(glb, lcl, seg, cfg.loss)
            value = _finite_or_abort(loss, model, last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [value] + [float(t.detach()) if torch.is_tensor(t) else float(t) for t in (glb, lcl, seg)]
            steps += 1
            skipped += skip
            seen += len(idx)
        if cfg.loss.w_lcl > 0 and seen and skipped / seen > 0.9:
            warnings.warn(f"epoch {epoch}: {skipped}/{seen} samples had a degenerate FG/BG split; "
                          "prompt.threshold is likely misconfigured", stacklevel=2)
        mean = sums / max(steps, 1)
        history.append({"total": mean[0], "glb": mean[1], "lcl": mean[2], "seg": mean[3],
                        "skipped": skipped})
        last_good = copy.deepcopy(model.state_dict())
        log.info("dap epoch %d %s", epoch, history[-1])
    model.eval()
    return model, history


def finetune_fewshot(model, data: Batchable, cfg: TrainConfig, k=None):
    """Dice fine-tuning against ground-truth masks on ``k`` samples."""
    k = cfg.fewshot.k if k is None else k
    if k <= 0:
        warnings.warn("few-shot k=0: model returned unchanged", stacklevel=2)
        return model
    if k > len(data):
        raise ValueError(f"k={k} exceeds dataset size {len(data)}")
    rng = _seed_all(cfg.seed)
    chosen = np.sort(rng.choice(len(data), size=k, replace=False))
    tuned = copy.deepcopy(model)
    _freeze(tuned, cfg)
    tuned.train()
    opt = torch.optim.Adam([p for p in tuned.parameters() if p.requires_grad], lr=cfg.fewshot.lr)
    masks = torch.from_numpy(data.masks[chosen].astype(np.float32))
    last_good = copy.deepcopy(tuned.state_dict())
    for _ in range(cfg.fewshot.steps):
        for idx in batches(k, cfg.batch_size, rng):
            sel = chosen[idx]
            bundle = tuned.vision(data.images[sel])
            cls = tuned.text([data.tokens[i] for i in sel]).cls_token
            loss = dice_loss(tuned.decoder(bundle, cls).scores, masks[idx], cfg.loss.dice_eps)
            _finite_or_abort(loss, tuned, last_good, "seg")
            opt.zero_grad()
            loss.backward()
            opt.step()
    tuned.eval()
    tuned.fewshot_indices = chosen
    return tuned


@torch.no_grad()
def predict(model, data: Batchable, batch_size=64, with_logits=False):
    """Grounding scores (N, H, W) from the unprompted inference path.

    With ``with_logits`` also returns the pre-sigmoid logits.
    """
    model.eval()
    scores, logits = [], []
    for idx in batches(len(data), batch_size):
        bundle = model.vision(data.images[idx])
        cls = model.text([data.tokens[i] for i in idx]).cls_token
        g = model.decoder(bundle, cls)
        scores.append(g.scores.cpu().numpy())
        logits.append(g.logits.cpu().numpy())
    if with_logits:
        return np.concatenate(scores), np.concatenate(logits)
    return np.concatenate(scores)


def evaluate(model, data: Batchable, cfg: TrainConfig = None, with_diagnostics=False, prompts=None):
    """Metrics of the unprompted grounding map against ground truth.

    Diagnostics' prompted alignment uses ``prompts`` when given; relevance is
    never extracted here.
    """
    cfg = cfg or TrainConfig()
    calls = relevance.EXTRACTION_CALLS
    scores, logits = predict(model, data, with_logits=True)
    # Sigmoid saturates to exact ties in float32; logits give the same ranking without them.
    per = [score_sample(s, m, cfg.eval.threshold, ranking=lg)
           for s, m, lg in zip(scores, data.masks, logits)]
    report = summarize(per, data.ids)
    if with_diagnostics:
        from .diagnostics import diagnostics_block
        report.diagnostics = diagnostics_block(model, data, cfg, scores=scores, prompts=prompts)
    assert relevance.EXTRACTION_CALLS == calls, "evaluation must not extract relevance maps"
    return report


def evaluate_prompts(prompts, data: Batchable, patch_size, threshold=0.3):
    """Score the pseudo-label maps themselves as predictions."""
    heat = upsample_prompt(torch.as_tensor(prompts), patch_size).numpy()
    per = [score_sample(h, m, threshold) for h, m in zip(heat, data.masks)]
    return summarize(per, data.ids)


def self_enhancement_report(model, data: Batchable, prompts, cfg: TrainConfig = None):
    cfg = cfg or TrainConfig()
    scores = predict(model, data)
    heat = upsample_prompt(torch.as_tensor(prompts), model.cfg.patch_size).numpy()
    pairs = []
    for sid, s, h, m in zip(data.ids, scores, heat, data.masks):
        pairs.append({"id": sid, "dice_prompt": dice(h > cfg.eval.prompt_threshold, m),
                      "dice_model": dice(s > cfg.eval.threshold, m)})
    dp = np.array([p["dice_prompt"] for p in pairs])
    dm = np.array([p["dice_model"] for p in pairs])
    bins = {"<0.3": dp < 0.3, "0.3-0.6": (dp >= 0.3) & (dp <= 0.6), ">0.6": dp > 0.6}
    groups = {name: {"n": int(sel.sum()),
                     "dice_prompt": float(dp[sel].mean()) if sel.any() else float("nan"),
                     "dice_model": float(dm[sel].mean()) if sel.any() else float("nan")}
              for name, sel in bins.items()}
    return {"pairs": pairs,
            "fraction_above": float(np.mean(dm > dp)) if len(pairs) else float("nan"),
            "median_dice_prompt": float(np.median(dp)) if len(pairs) else float("nan"),
            "median_dice_model": float(np.median(dm)) if len(pairs) else float("nan"),
            "groups": groups}


def robustness_sweep(baseline, train: Batchable, test: Batchable, cfg: TrainConfig,
                     k_set=(10, 30, 50, 70), prompts=None):
    """Retrain with corrupted prompts for each k; returns {k: MetricsReport}."""
    if prompts is None:
        prompts = extract_prompts(baseline, train)
    reports = {}
    for k in k_set:
        run_cfg = cfg.with_overrides([f"prompt.corrupt_k={k}"])
        model, _ = train_dap(baseline, train, run_cfg, prompts=prompts)
        reports[k] = evaluate(model, test, run_cfg)
    return reports


ABLATIONS = {
    "global_only": ["prompt.enabled=false", "loss.w_lcl=0"],
    "dap_global": ["prompt.enabled=true", "loss.w_lcl=0"],
    "local_only": ["prompt.enabled=false", "loss.w_glb=0"],
    "full": [],
}


def write_run(directory, record: RunRecord, model=None):
    """Lay out ``run/{config.json, metrics.json, checkpoints/, plots/}``."""
    os.makedirs(os.path.join(directory, "checkpoints"), exist_ok=True)
    os.makedirs(os.path.join(directory, "plots"), exist_ok=True)
    binfmt.atomic_write_text(os.path.join(directory, "config.json"),
                             json.dumps(record.config, indent=1, sort_keys=True))
    if record.metrics is not None:
        binfmt.atomic_write_text(os.path.join(directory, "metrics.json"), record.metrics.to_json())
    if model is not None:
        record.checkpoint = os.path.join("checkpoints", "model.ckpt")
        save_model(os.path.join(directory, record.checkpoint), model)
    binfmt.atomic_write_text(os.path.join(directory, "run.json"), json.dumps({
        "losses": record.losses, "checkpoint": record.checkpoint,
        "wall_clock": record.wall_clock, "extras": record.extras}, indent=1, sort_keys=True))


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
