import json
import os

import numpy as np
import pytest
import torch

from dap import relevance, trainer
from dap.config import TrainConfig
from dap.data import read_prompt_cache, stack, write_prompt_cache
from dap.metrics import MetricsReport
from dap.prompting import upsample_prompt
from dap.synthdata import SynthConfig, build_template_bank, generate_dataset

TINY = ["model.image_size=32", "model.vision_width=16", "model.text_width=16", "model.embed_dim=16",
        "model.vision_depth=2", "model.text_depth=1", "model.vision_heads=2", "model.text_heads=2",
        "model.decoder_heads=2", "model.decoder_channels=4", "batch_size=8", "epochs=2",
        "pretrain.epochs=2"]


@pytest.fixture(scope="module")
def setup():
    sc = SynthConfig(image_size=32, seed=3)
    data = stack(generate_dataset(sc, 24))
    cfg = TrainConfig().with_overrides(TINY)
    vocab = len(build_template_bank(sc.num_classes, sc.templates_per_class).vocab)
    base, hist = trainer.pretrain_baseline(data, cfg, vocab)
    prompts = trainer.extract_prompts(base, data)
    return data, cfg, vocab, base, hist, prompts


def test_pretrain_is_deterministic(setup):
    data, cfg, vocab, _, hist, _ = setup
    _, again = trainer.pretrain_baseline(data, cfg, vocab)
    assert again == hist


def test_train_dap_is_deterministic(setup):
    data, cfg, _, base, _, prompts = setup
    a, ha = trainer.train_dap(base, data, cfg, prompts=prompts)
    b, hb = trainer.train_dap(base, data, cfg, prompts=prompts)
    assert ha == hb
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_train_dap_leaves_baseline_untouched(setup):
    data, cfg, _, base, _, prompts = setup
    before = {k: v.clone() for k, v in base.state_dict().items()}
    trainer.train_dap(base, data, cfg, prompts=prompts)
    for k, v in base.state_dict().items():
        assert torch.equal(v, before[k])


def test_cache_equivalence_at_step_zero(setup, tmp_path):
    data, cfg, _, base, _, _ = setup
    idx = np.arange(8)
    fresh = relevance.relevance_map(base, data.images[idx], [data.tokens[i] for i in idx]).weights
    write_prompt_cache(tmp_path, [data.ids[i] for i in idx], fresh)
    cached = read_prompt_cache(tmp_path, [data.ids[i] for i in idx])
    args = (base, data.images[idx], [data.tokens[i] for i in idx], [data.class_sets[i] for i in idx])
    live = trainer.dap_step_losses(*args, torch.as_tensor(fresh, dtype=torch.float32), cfg)
    disk = trainer.dap_step_losses(*args, torch.as_tensor(cached), cfg)
    for a, b in zip(live[:3], disk[:3]):
        assert float(a.detach()) == float(b.detach())


def test_omitted_prompts_are_extracted_from_baseline(setup):
    data, cfg, _, base, _, prompts = setup
    _, h_cached = trainer.train_dap(base, data, cfg, prompts=prompts)
    _, h_live = trainer.train_dap(base, data, cfg)
    assert h_cached == h_live


def test_corrupt_k_zero_equals_uncorrupted(setup):
    data, cfg, _, base, _, prompts = setup
    _, h0 = trainer.train_dap(base, data, cfg, prompts=prompts)
    _, hk = trainer.train_dap(base, data, cfg.with_overrides(["prompt.corrupt_k=0"]), prompts=prompts)
    assert h0 == hk


def test_degenerate_partition_warning(setup):
    data, cfg, _, base, _, prompts = setup
    with pytest.warns(UserWarning, match="degenerate FG/BG"):
        trainer.train_dap(base, data, cfg.with_overrides(["epochs=1"]), prompts=np.ones_like(prompts))


def test_nan_loss_aborts_with_last_good(setup, monkeypatch):
    data, cfg, _, base, _, prompts = setup

    def bad(*args, **kwargs):
        return torch.tensor(float("nan"), requires_grad=True)

    monkeypatch.setattr(trainer, "total_loss", bad)
    with pytest.raises(trainer.TrainingDiverged) as info:
        trainer.train_dap(base, data, cfg, prompts=prompts)
    assert info.value.last_good is not None


def test_evaluate_never_extracts_and_round_trips(setup):
    data, cfg, _, base, _, prompts = setup
    calls = relevance.EXTRACTION_CALLS
    rep = trainer.evaluate(base, data, cfg, with_diagnostics=True, prompts=prompts)
    assert relevance.EXTRACTION_CALLS == calls
    assert MetricsReport.from_json(rep.to_json()).to_json() == rep.to_json()
    assert trainer.evaluate(base, data, cfg).to_json() == trainer.evaluate(base, data, cfg).to_json()
    assert rep.diagnostics.prompted_alignment


def test_prompt_as_prediction_oracle(setup):
    data, _, _, base, _, prompts = setup
    rep = trainer.evaluate_prompts(prompts, data, 8, 0.3)
    heat = upsample_prompt(torch.as_tensor(prompts), 8).numpy()
    from dap.metrics import dice
    expected = np.mean([dice(h > 0.3, m) for h, m in zip(heat, data.masks)])
    assert rep.dice == pytest.approx(expected, abs=1e-12)


def test_self_enhancement_ties_are_not_above(setup, monkeypatch):
    data, cfg, _, base, _, prompts = setup
    heat = upsample_prompt(torch.as_tensor(prompts), 8).numpy()
    monkeypatch.setattr(trainer, "predict", lambda model, d: heat)
    rep = trainer.self_enhancement_report(base, data, prompts, cfg.with_overrides(["eval.threshold=0.3"]))
    assert rep["fraction_above"] == 0.0
    assert rep["median_dice_model"] == rep["median_dice_prompt"]
    assert sum(g["n"] for g in rep["groups"].values()) == len(data)


def test_self_enhancement_range(setup):
    data, cfg, _, base, _, prompts = setup
    rep = trainer.self_enhancement_report(base, data, prompts, cfg)
    assert 0.0 <= rep["fraction_above"] <= 1.0
    assert set(rep["groups"]) == {"<0.3", "0.3-0.6", ">0.6"}


def test_fewshot_k_zero_is_noop(setup):
    data, cfg, _, base, _, _ = setup
    with pytest.warns(UserWarning):
        assert trainer.finetune_fewshot(base, data, cfg, k=0) is base


def test_fewshot_k_too_large(setup):
    data, cfg, _, base, _, _ = setup
    with pytest.raises(ValueError):
        trainer.finetune_fewshot(base, data, cfg, k=len(data) + 1)


def test_fewshot_fits_its_shots(setup):
    data, cfg, _, base, _, _ = setup
    from dap.metrics import dice
    c = cfg.with_overrides(["fewshot.steps=60", "fewshot.lr=3e-3"])
    tuned = trainer.finetune_fewshot(base, data, c, k=6)
    sub = data.subset(tuned.fewshot_indices)

    def mean_dice(model):
        return np.mean([dice(s > 0.5, m) for s, m in zip(trainer.predict(model, sub), sub.masks)])

    assert mean_dice(tuned) >= mean_dice(base)


def test_ablation_overrides_are_valid():
    for name, overrides in trainer.ABLATIONS.items():
        cfg = TrainConfig().with_overrides(overrides)
        if name == "global_only":
            assert not cfg.prompt.enabled and cfg.loss.w_lcl == 0
        if name == "full":
            assert cfg.prompt.enabled and cfg.loss.w_lcl > 0 and cfg.loss.w_glb > 0


def test_write_run_layout_keeps_wall_clock_out_of_metrics(setup, tmp_path):
    data, cfg, _, base, _, _ = setup
    rep = trainer.evaluate(base, data, cfg)
    rec = trainer.RunRecord(config=cfg.to_flat(), metrics=rep, wall_clock=12.5)
    trainer.write_run(tmp_path, rec, base)
    for name in ("config.json", "metrics.json", "run.json", "checkpoints/model.ckpt", "plots"):
        assert os.path.exists(tmp_path / name)
    assert "wall_clock" not in (tmp_path / "metrics.json").read_text()
    assert json.loads((tmp_path / "run.json").read_text())["wall_clock"] == 12.5
