"""Command-line entry point: ``dap <verb> [options]``.

Exit codes: 0 success, 1 validation error (bad arguments, config, or input
files), 2 runtime failure (divergence, generation failure, ...).
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import binfmt, config as config_mod, synthdata, trainer
from .errors import ConfigError, DapError, FormatError, GenerationError, NumericalError

log = logging.getLogger("dap")

VERBS = ("synth", "pretrain", "extract-prompts", "train", "finetune", "eval", "diagnose", "sweep",
         "self-enhance")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _synth_keys():
    return "\n".join(f"  {k} = {json.dumps(v)}" for k, v in synthdata.SynthConfig().to_dict().items())


def _epilog(synth=False):
    if synth:
        return "synthetic data keys (--set key=value):\n" + _synth_keys()
    return ("run config keys (--set key=value; env DAP_SEED overrides seed):\n"
            + config_mod.describe_keys())


def build_parser():
    parser = _Parser(prog="dap", description="Disease-aware prompting toolkit on synthetic scans.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", metavar="verb", parser_class=_Parser)
    sub.required = True

    def verb(name, help_text, synth=False):
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_epilog(synth),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        return p

    p = verb("synth", "generate a synthetic dataset", synth=True)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--start", type=int, default=0, help="index of the first sample (disjoint splits)")
    p.add_argument("--out", required=True)

    p = verb("pretrain", "contrastive baseline pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")

    p = verb("extract-prompts", "cache prompt maps from a baseline model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = verb("train", "prompt-guided training from a baseline")
    p.add_argument("--model", required=True, help="baseline checkpoint or run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", help="prompt cache (extracted from --model when absent)")
    p.add_argument("--test", help="optional test dataset evaluated into metrics.json")
    p.add_argument("--out", required=True)

    p = verb("finetune", "few-shot Dice fine-tuning on ground-truth masks")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, help="number of shots (default fewshot.k)")
    p.add_argument("--out", required=True)

    p = verb("eval", "grounding metrics on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", required=True, help="output MetricsReport path")
    p.add_argument("--diagnostics", action="store_true")
    p.add_argument("--prompts", help="prompt cache for prompted-alignment diagnostics")

    p = verb("diagnose", "norm-map overlays, cosine histograms and strata tables")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", help="prompt cache for prompted cosine histograms")
    p.add_argument("--out", required=True)

    p = verb("sweep", "retrain with corrupted prompts for each k")
    p.add_argument("--model", required=True, help="baseline checkpoint or run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--prompts")
    p.add_argument("--k", default="10,30,50,70", help="comma-separated corruption levels")
    p.add_argument("--out", required=True)

    p = verb("self-enhance", "per-sample Dice of the model against its prompt maps")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    return parser


def _require(path, what):
    if not os.path.exists(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _run_config(args):
    if args.config:
        cfg = config_mod.load_config(_require(args.config, "config"))
    else:
        cfg = config_mod.TrainConfig()
    cfg = cfg.with_overrides(args.overrides)
    if os.environ.get("DAP_SEED"):
        cfg = cfg.with_overrides([f"seed={os.environ['DAP_SEED']}"])
    return cfg


def _synth_config(args):
    if args.config:
        base = synthdata.load_synth_config(_require(args.config, "config")).to_dict()
    else:
        base = synthdata.SynthConfig().to_dict()
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in base:
            raise ConfigError(f"unknown synth config key {key!r}")
        base[key] = config_mod.parse_value(raw.strip())
    if os.environ.get("DAP_SEED"):
        base["seed"] = int(os.environ["DAP_SEED"])
    return synthdata.SynthConfig.from_dict(base).validate()


def _dataset(path):
    from .data import stack

    _require(os.path.join(path, "manifest.json"), "dataset manifest")
    return stack(synthdata.read_dataset(path))


def _vocab_size(data_dir):
    sc = synthdata.read_synth_config(data_dir) or synthdata.SynthConfig()
    return len(synthdata.build_template_bank(sc.num_classes, sc.templates_per_class).vocab)


def _checkpoint_path(path):
    if os.path.isdir(path):
        path = os.path.join(path, "checkpoints", "model.ckpt")
    return _require(path, "checkpoint")


def _load(path):
    from .model import load_model

    return load_model(_checkpoint_path(path))[0]


def _prompts(args, model, data):
    from .data import read_prompt_cache

    if getattr(args, "prompts", None):
        return read_prompt_cache(_require(args.prompts, "prompt cache"), list(data.ids))
    return trainer.extract_prompts(model, data)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    binfmt.atomic_write_text(path, json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if dataclasses.is_dataclass(x):
        return dataclasses.asdict(x)
    raise TypeError(f"not serializable: {type(x).__name__}")


def cmd_synth(args):
    sc = _synth_config(args)
    samples = synthdata.generate_dataset(sc, args.n, start=args.start)
    synthdata.write_dataset(args.out, samples, sc)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_pretrain(args):
    cfg = _run_config(args)
    data = _dataset(args.data)
    with trainer.Timer() as t:
        model, history = trainer.pretrain_baseline(data, cfg, _vocab_size(args.data))
    record = trainer.RunRecord(config=cfg.to_flat(), losses=[{"contrastive": h} for h in history],
                               wall_clock=t.elapsed)
    trainer.write_run(args.out, record, model)
    print(f"baseline saved to {os.path.join(args.out, record.checkpoint)}")


def cmd_extract_prompts(args):
    from .data import write_prompt_cache

    model = _load(args.model)
    data = _dataset(args.data)
    weights = trainer.extract_prompts(model, data)
    write_prompt_cache(args.out, list(data.ids), weights,
                       meta={"model": os.path.abspath(_checkpoint_path(args.model))})
    print(f"wrote {len(weights)} prompt maps to {args.out}")


def cmd_train(args):
    cfg = _run_config(args)
    baseline = _load(args.model)
    data = _dataset(args.data)
    prompts = _prompts(args, baseline, data)
    with trainer.Timer() as t:
        model, history = trainer.train_dap(baseline, data, cfg, prompts=prompts)
    metrics = trainer.evaluate(model, _dataset(args.test), cfg) if args.test else None
    record = trainer.RunRecord(config=cfg.to_flat(), losses=history, metrics=metrics, wall_clock=t.elapsed)
    trainer.write_run(args.out, record, model)
    print(f"model saved to {os.path.join(args.out, record.checkpoint)}")


def cmd_finetune(args):
    cfg = _run_config(args)
    model = _load(args.model)
    data = _dataset(args.data)
    with trainer.Timer() as t:
        tuned = trainer.finetune_fewshot(model, data, cfg, args.k)
    chosen = getattr(tuned, "fewshot_indices", np.array([], dtype=int))
    record = trainer.RunRecord(config=cfg.to_flat(), wall_clock=t.elapsed,
                               extras={"fewshot_ids": [data.ids[i] for i in chosen]})
    trainer.write_run(args.out, record, tuned)
    print(f"model saved to {os.path.join(args.out, record.checkpoint)}")


def cmd_eval(args):
    cfg = _run_config(args)
    model = _load(args.model)
    data = _dataset(args.data)
    prompts = None
    if args.prompts:
        from .data import read_prompt_cache
        prompts = read_prompt_cache(_require(args.prompts, "prompt cache"), list(data.ids))
    report = trainer.evaluate(model, data, cfg, with_diagnostics=args.diagnostics, prompts=prompts)
    os.makedirs(os.path.dirname(os.path.abspath(args.json)), exist_ok=True)
    binfmt.atomic_write_text(args.json, report.to_json())
    print(f"cnr {report.cnr:.4f} pg {report.pg:.4f} dice {report.dice:.4f} iou {report.iou:.4f}")


def cmd_diagnose(args):
    from . import plots
    from .diagnostics import alignment_stats, stratified_eval, _norm_maps

    cfg = _run_config(args)
    model = _load(args.model)
    data = _dataset(args.data)
    scores = trainer.predict(model, data)
    plots.norm_overlays(args.out, data.images.numpy(), _norm_maps(model, data), data.masks, data.ids)
    plots.cosine_histograms(args.out, alignment_stats(model, data)["samples"], "unprompted")
    if args.prompts:
        from .data import read_prompt_cache
        prompts = read_prompt_cache(_require(args.prompts, "prompt cache"), list(data.ids))
        stats = alignment_stats(model, data, prompted=True, prompts=prompts, prompt_layers=cfg.prompt.layers)
        plots.cosine_histograms(args.out, stats["samples"], "prompted")
    plots.strata_plots(args.out, stratified_eval(model, data, cfg.eval.threshold, scores))
    print(f"plots written to {args.out}")


def cmd_sweep(args):
    from . import plots

    cfg = _run_config(args)
    baseline = _load(args.model)
    train, test = _dataset(args.data), _dataset(args.test)
    try:
        ks = [int(k) for k in args.k.split(",") if k.strip()]
    except ValueError as exc:
        raise ConfigError(f"--k must be comma-separated integers, got {args.k!r}") from exc
    prompts = _prompts(args, baseline, train)
    reports = trainer.robustness_sweep(baseline, train, test, cfg, k_set=ks, prompts=prompts)
    os.makedirs(args.out, exist_ok=True)
    for k, rep in reports.items():
        binfmt.atomic_write_text(os.path.join(args.out, f"metrics_k{k}.json"), rep.to_json())
    plots.sweep_plot(args.out, reports)
    for k in sorted(reports):
        print(f"k={k:3d} dice {reports[k].dice:.4f} cnr {reports[k].cnr:.4f}")


def cmd_self_enhance(args):
    from . import plots

    cfg = _run_config(args)
    model = _load(args.model)
    data = _dataset(args.data)
    prompts = _prompts(args, model, data)
    report = trainer.self_enhancement_report(model, data, prompts, cfg)
    _write_json(os.path.join(args.out, "self_enhancement.json"), report)
    plots.self_enhancement_scatter(args.out, report)
    print(f"fraction above {report['fraction_above']:.3f}; median dice model "
          f"{report['median_dice_model']:.3f} vs prompt {report['median_dice_prompt']:.3f}")


COMMANDS = {
    "synth": cmd_synth, "pretrain": cmd_pretrain, "extract-prompts": cmd_extract_prompts,
    "train": cmd_train, "finetune": cmd_finetune, "eval": cmd_eval, "diagnose": cmd_diagnose,
    "sweep": cmd_sweep, "self-enhance": cmd_self_enhance,
}

VALIDATION_ERRORS = (UsageError, ConfigError, FormatError, ValueError, KeyError, LookupError,
                     FileNotFoundError, json.JSONDecodeError)


def run(argv=None):
    """Parse ``argv`` and dispatch; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except (GenerationError, NumericalError) as exc:
        print(f"dap {args.verb}: {exc}", file=sys.stderr)
        return 2
    except VALIDATION_ERRORS as exc:
        print(f"dap {args.verb}: {exc}", file=sys.stderr)
        return 1
    except (DapError, RuntimeError, OSError) as exc:
        print(f"dap {args.verb}: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
