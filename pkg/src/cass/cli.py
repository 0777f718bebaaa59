"""Command line entry point: ``cass <verb> [--config FILE] [--set key=value ...]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from cass import experiments as ex


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults are used for missing keys)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set pretrain.epochs=10 (repeatable)")
    p.add_argument("--seed", type=int, action="append", help="seed(s) to run; overrides config seeds")
    p.add_argument("--out", help="output directory; default $CASS_RESULTS_ROOT/<name>")


def _load(args) -> ex.ExperimentConfig:
    overrides = list(args.overrides)
    if args.seed:
        overrides.append(f"seeds={json.dumps(args.seed)}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    return ex.load_config(args.config, overrides)


def cmd_pretrain(args):
    from dataclasses import asdict

    from cass.arms import pair_arms
    from cass.dino import DinoConfig, dino_pretrain
    from cass.pretrain import PretrainConfig, pretrain

    cfg = _load(args)
    ds = ex.build_dataset(cfg.dataset)
    seed = cfg.seeds[0]
    out = cfg.out / f"seed_{seed}" / "pretrain"
    if cfg.method == "dino":
        rec = dino_pretrain(ds, cfg.dino_arm, DinoConfig(**{**asdict(cfg.dino), "seed": seed}), cfg.augment, out).record
    else:
        pair = pair_arms(cfg.arm_a, cfg.arm_b, seed)
        rec = pretrain(ds, pair, PretrainConfig(**{**asdict(cfg.pretrain), "seed": seed}), cfg.augment, out).record
    print(json.dumps({"checkpoints": rec.checkpoints, "counters": rec.counters,
                      "final_loss": rec.loss_curve[-1]}, indent=2))


def cmd_finetune(args):
    from dataclasses import asdict

    from cass.finetune import FinetuneConfig, finetune

    cfg = _load(args)
    ds = ex.build_dataset(cfg.dataset)
    seed = cfg.seeds[0]
    frac = cfg.label_fractions[0]
    fcfg = FinetuneConfig(**{**asdict(cfg.finetune), "seed": seed, "label_fraction": frac})
    out = Path(args.out) if args.out else cfg.out / f"seed_{seed}" / f"finetune_{Path(args.checkpoint).stem}_{frac:g}"
    res = finetune(args.checkpoint, ds, fcfg, cfg.augment, out_dir=out)
    print(json.dumps({k: v.value for k, v in res.test_metrics.items()}, indent=2))


def cmd_run(args):
    records = ex.run(_load(args))
    agg = records[-1]
    print(json.dumps({"aggregate": agg.metrics, "failed_seeds": agg.extra["failed_seeds"]}, indent=2))


def cmd_sweep(args):
    rep = ex.sweep(_load(args))
    print(json.dumps({"grid": rep["grid"], "robustness_variance": rep["robustness_variance"]}, indent=2))


def cmd_compare_cost(args):
    cass_cfg = ex.load_config(args.config, args.overrides + ["method=cass"]
                              + ([f"output_dir={args.out}"] if args.out else []))
    dino_cfg = ex.load_config(args.dino_config or args.config, args.overrides + ["method=dino"])
    print(json.dumps(ex.compare_cost(cass_cfg, dino_cfg, args.seed[0] if args.seed else None), indent=2))


def cmd_report(args):
    out = args.out or str(Path(args.results) / "report")
    print(json.dumps(ex.report(args.results, out), indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cass", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, fn, helptext in (
        ("pretrain", cmd_pretrain, "pretrain one seed (cass pair or dino baseline)"),
        ("finetune", cmd_finetune, "fine-tune an arm checkpoint"),
        ("run", cmd_run, "pretrain + fine-tune + evaluate for every seed, then aggregate"),
        ("sweep", cmd_sweep, "run the config's sweep axis and compute mean variance"),
        ("compare-cost", cmd_compare_cost, "pretrain cass and dino on one budget and compare costs"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.set_defaults(func=fn)
        if name == "finetune":
            p.add_argument("checkpoint")
        if name == "compare-cost":
            p.add_argument("--dino-config", help="config for the baseline (defaults to --config)")
    p = sub.add_parser("report", help="summarise a results directory")
    p.add_argument("results")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
