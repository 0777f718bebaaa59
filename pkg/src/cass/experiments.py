"""Config-driven experiments: seeded runs, ablation sweeps, cost comparison, reports.

A results store is a directory per experiment::

    <root>/<name>/config.yaml
    <root>/<name>/records/<run_id>.json       one per seed + the aggregate
    <root>/<name>/seed_<s>/...                checkpoints and phase records
    <root>/<name>/report/                     summary.md and plots

``<root>`` defaults to ``$CASS_RESULTS_ROOT`` or ``./results``.
"""
from __future__ import annotations

import json
import os
import traceback
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np
import yaml

from cass.arms import REGISTRY, ArmSpec, build_arm, pair_arms, save_checkpoint
from cass.augment import AugmentConfig
from cass.data import LabeledImageDataset, load_image_folder, split, synth_dataset
from cass.dino import DinoConfig, dino_pretrain
from cass.errors import ConfigError, ContractError
from cass.finetune import FinetuneConfig, finetune
from cass.metrics import ci95
from cass.pretrain import PretrainConfig, pretrain
from cass.records import RunRecord, append_record, load_records

RESULTS_ENV = "CASS_RESULTS_ROOT"
SWEEP_AXES = ("batch_size", "epochs", "augment_set", "optimizer_cnn", "head_variant", "arch_pair", "label_fraction")


def results_root() -> Path:
    return Path(os.environ.get(RESULTS_ENV, "results"))


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # or "folder"
    n: int = 200
    classes: int = 4
    image_size: int = 32
    structure_seed: int = 0
    imbalance_ratio: float = 1.0
    task_kind: str = "multiclass"
    noise: float = 0.08
    path: str | None = None
    labels_csv: str | None = None
    split_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "folder"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ConfigError("folder datasets need a path")


@dataclass
class SweepConfig:
    axis: str
    values: list

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    method: str = "cass"  # cass | dino | supervised
    arm_a: ArmSpec = field(default_factory=lambda: ArmSpec("cnn", "micro_cnn"))
    arm_b: ArmSpec = field(default_factory=lambda: ArmSpec("vit", "vit_tiny_p4"))
    dino_arm: ArmSpec = field(default_factory=lambda: ArmSpec("vit", "vit_tiny_p4"))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    dino: DinoConfig = field(default_factory=DinoConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    label_fractions: list[float] = field(default_factory=lambda: [1.0])
    finetune_arms: list[str] = field(default_factory=lambda: ["a", "b"])
    sweep: SweepConfig | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in ("cass", "dino", "supervised"):
            raise ConfigError(f"unknown method {self.method!r}")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be non-empty and distinct")
        if self.method != "dino" and self.arm_a.head_dim != self.arm_b.head_dim:
            raise ConfigError("both arms need the same head_dim")
        if not set(self.finetune_arms) <= {"a", "b"} or not self.finetune_arms:
            raise ConfigError("finetune_arms is a non-empty subset of ['a', 'b']")
        used = (self.dino_arm,) if self.method == "dino" else (self.arm_a, self.arm_b)
        for s in used:
            if s.image_size != self.augment.target_size[0]:
                raise ConfigError("arm image_size must equal augment.target_size")

    @property
    def out(self) -> Path:
        return Path(self.output_dir) if self.output_dir else results_root() / self.name

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


_NESTED = {"arm_a": ArmSpec, "arm_b": ArmSpec, "dino_arm": ArmSpec, "pretrain": PretrainConfig,
           "dino": DinoConfig, "finetune": FinetuneConfig, "augment": AugmentConfig, "dataset": DatasetConfig,
           "sweep": SweepConfig}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        cls = _NESTED.get(k)
        if cls is not None and isinstance(v, dict):
            allowed = {f.name for f in fields(cls)}
            bad = set(v) - allowed
            if bad:
                raise ConfigError(f"unknown keys under {k}: {sorted(bad)}")
            kw[k] = cls(**v)
        else:
            kw[k] = v
    if "augment" not in kw:
        kw["augment"] = AugmentConfig.for_size(kw.get("dataset", DatasetConfig()).image_size)
    return ExperimentConfig(**kw)


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    d = yaml.safe_load(Path(path).read_text()) if path else {}
    for item in overrides or []:
        apply_override(d, item)
    return config_from_dict(d)


def apply_override(d: dict, item: str) -> dict:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key.path=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(raw)
    return d


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


def with_updates(cfg: ExperimentConfig, **updates) -> ExperimentConfig:
    d = cfg.to_dict()
    for k, v in updates.items():
        apply_override(d, f"{k}={json.dumps(v)}")
    return config_from_dict(d)


def build_dataset(dc: DatasetConfig) -> LabeledImageDataset:
    if dc.kind == "synthetic":
        ds = synth_dataset(dc.n, dc.classes, dc.image_size, dc.structure_seed, imbalance_ratio=dc.imbalance_ratio,
                           task_kind=dc.task_kind, noise=dc.noise)
    else:
        ds = load_image_folder(dc.path, load_size=dc.image_size, labels_csv=dc.labels_csv)
    return split(ds, dc.split_seed)


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------

def _arms_for(cfg: ExperimentConfig) -> dict:
    if cfg.method == "dino":
        return {"a": cfg.dino_arm}
    return {"a": cfg.arm_a, "b": cfg.arm_b}


def run_seed(cfg: ExperimentConfig, seed: int, dataset: LabeledImageDataset) -> RunRecord:
    """Pretrain (per method) then fine-tune each requested arm at each label fraction."""
    out = cfg.out / f"seed_{seed}"
    rec = RunRecord(f"{cfg.name}-seed{seed}", cfg.method, "run", seed, config=cfg.to_dict())
    try:
        sources = {}
        if cfg.method == "cass":
            pcfg = PretrainConfig(**{**asdict(cfg.pretrain), "seed": seed})
            pair = pair_arms(cfg.arm_a, cfg.arm_b, seed)
            res = pretrain(dataset, pair, pcfg, cfg.augment, out_dir=out / "pretrain", run_id=f"{rec.run_id}-pretrain")
            sources = {"a": res.checkpoints["arm_a"], "b": res.checkpoints["arm_b"]}
            pre = res.record
        elif cfg.method == "dino":
            dcfg = DinoConfig(**{**asdict(cfg.dino), "seed": seed})
            res = dino_pretrain(dataset, cfg.dino_arm, dcfg, cfg.augment, out_dir=out / "pretrain",
                                run_id=f"{rec.run_id}-pretrain")
            sources = {"a": res.checkpoints["student"]}
            pre = res.record
        else:
            pre = None
            for tag, spec in _arms_for(cfg).items():
                sources[tag] = str(save_checkpoint(build_arm(spec, seed), out / "init" / f"arm_{tag}.pt"))
        if pre is not None:
            rec.counters = pre.counters
            rec.loss_curve = pre.loss_curve
            rec.wall_clock_seconds["pretrain"] = pre.wall_clock_seconds.get("total", 0.0)
            rec.extra["pretrain_record"] = pre.run_id
        rec.checkpoints.update({f"pretrained_{k}": v for k, v in sources.items()})
        rec.wall_clock_seconds["finetune"] = 0.0
        arms = [t for t in cfg.finetune_arms if t in sources]
        finetune_ids = []
        for frac in cfg.label_fractions:
            for tag in arms:
                fcfg = FinetuneConfig(**{**asdict(cfg.finetune), "label_fraction": frac, "seed": seed})
                key = f"{_arms_for(cfg)[tag].variant}@{frac:g}"
                ft = finetune(sources[tag], dataset, fcfg, cfg.augment, out_dir=out / f"finetune_{tag}_{frac:g}",
                              run_id=f"{rec.run_id}-ft-{tag}-{frac:g}", method=cfg.method)
                rec.metrics[key] = {k: v.to_dict() for k, v in ft.test_metrics.items()}
                rec.checkpoints[f"finetuned_{key}"] = ft.record.checkpoints.get("finetuned")
                rec.wall_clock_seconds["finetune"] += ft.record.wall_clock_seconds.get("train", 0.0)
                finetune_ids.append(ft.record.run_id)
        rec.extra["finetune_records"] = finetune_ids
    except Exception as exc:  # keep partial results
        rec.status = "failed"
        rec.error = f"{type(exc).__name__}: {exc}"
        rec.extra["traceback"] = traceback.format_exc()
    append_record(cfg.out, rec)
    return rec


def aggregate(records: list[RunRecord], name: str, method: str) -> RunRecord:
    """Mean and 95% CI half-width per (arm@fraction, metric) over successful seeds."""
    ok = [r for r in records if r.status == "ok"]
    agg = RunRecord(f"{name}-aggregate", method, "aggregate", -1,
                    extra={"seeds": [r.seed for r in ok], "failed_seeds": [r.seed for r in records if r.status != "ok"]})
    keys = sorted({k for r in ok for k in r.metrics})
    for key in keys:
        agg.metrics[key] = {}
        names = sorted({m for r in ok if key in r.metrics for m in r.metrics[key]})
        for m in names:
            vals = [r.metrics[key][m]["value"] for r in ok if key in r.metrics and m in r.metrics[key]]
            mean, half = ci95(vals) if len(vals) >= 2 else (float(vals[0]), None)
            agg.metrics[key][m] = {"mean": mean, "ci95": half, "values": vals, "median": float(np.median(vals))}
    if ok and ok[0].counters:
        agg.counters = {k: float(np.mean([r.counters.get(k, 0) for r in ok])) for k in ok[0].counters}
    phases = sorted({p for r in ok for p in r.wall_clock_seconds})
    agg.wall_clock_seconds = {p: float(np.mean([r.wall_clock_seconds.get(p, 0.0) for r in ok])) for p in phases}
    if not ok:
        agg.status = "failed"
    return agg


def run(cfg: ExperimentConfig) -> list[RunRecord]:
    """One record per seed, then the aggregate record (written last)."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, cfg.out / "config.yaml")
    dataset = build_dataset(cfg.dataset)
    records = [run_seed(cfg, s, dataset) for s in cfg.seeds]
    agg = aggregate(records, cfg.name, cfg.method)
    append_record(cfg.out, agg)
    return records + [agg]


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def _arm_from_variant(variant: str, head_dim: int, image_size: int) -> ArmSpec:
    if variant not in REGISTRY:
        raise ConfigError(f"unknown variant {variant!r}")
    return ArmSpec(REGISTRY[variant][0], variant, head_dim, image_size=image_size)


def apply_sweep_value(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    d = cfg.to_dict()
    d["sweep"] = None
    d["name"] = f"{cfg.name}/{axis}={_label(value)}"
    d["output_dir"] = str(cfg.out / f"{axis}={_label(value)}")
    if axis == "batch_size":
        d["pretrain"]["batch_size"] = d["dino"]["batch_size"] = int(value)
    elif axis == "epochs":
        d["pretrain"]["epochs"] = d["dino"]["epochs"] = int(value)
        d["pretrain"]["swa_start_epoch"] = None
    elif axis == "augment_set":
        d["augment"]["extra"] = list(value or [])
    elif axis == "optimizer_cnn":
        d["pretrain"]["optimizer_cnn"] = value
    elif axis == "head_variant":
        d["pretrain"]["head_variant"] = value
    elif axis == "arch_pair":
        a, b = value.split("+") if isinstance(value, str) else value
        size, hd = cfg.arm_a.image_size, cfg.arm_a.head_dim
        d["arm_a"] = asdict(_arm_from_variant(a, hd, size))
        d["arm_b"] = asdict(_arm_from_variant(b, hd, size))
    elif axis == "label_fraction":
        d["label_fractions"] = [float(value)]
    return config_from_dict(d)


def _label(value) -> str:
    if isinstance(value, (list, tuple)):
        return "+".join(map(str, value)) or "none"
    return str(value)


def sweep(cfg: ExperimentConfig, metric: str = "f1_macro") -> dict:
    """Run every sweep value as its own experiment; returns and persists the grid.

    The grid ``robustness_input[method][arm key][value]`` (mean metric over
    seeds) is handed to :func:`cass.analysis.robustness_variance`.
    """
    from cass.analysis import robustness_variance

    if cfg.sweep is None:
        raise ConfigError("config has no sweep section")
    axis = cfg.sweep.axis
    cells, grid = {}, {cfg.method: {}}
    for value in cfg.sweep.values:
        sub = apply_sweep_value(cfg, axis, value)
        agg = run(sub)[-1]
        label = _label(value)
        cells[label] = agg.to_dict()
        for key, ms in agg.metrics.items():
            arm_key = key if axis != "label_fraction" else key.split("@")[0]
            if axis == "arch_pair":
                arm_key = "arm_" + ("a" if key.split("@")[0] == sub.arm_a.variant else "b")
            if metric in ms:
                grid[cfg.method].setdefault(arm_key, {})[label] = ms[metric]["mean"]
    try:
        robust = robustness_variance(grid) if len(cfg.sweep.values) >= 2 else {}
    except ContractError as exc:
        robust = {"error": str(exc)}
    report = {"axis": axis, "values": [_label(v) for v in cfg.sweep.values], "metric": metric,
              "aggregates": cells, "grid": grid, "robustness_variance": robust}
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "sweep_report.json").write_text(json.dumps(report, indent=2))
    return report


# --------------------------------------------------------------------------
# cost comparison
# --------------------------------------------------------------------------

def compare_cost(cass_cfg: ExperimentConfig, dino_cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """Pretrain both methods on an identical budget and itemise their costs."""
    if cass_cfg.method != "cass" or dino_cfg.method != "dino":
        raise ContractError("compare_cost expects a cass config and a dino config")
    if asdict(cass_cfg.dataset) != asdict(dino_cfg.dataset):
        raise ContractError("datasets differ between the two configs")
    if (cass_cfg.pretrain.epochs, cass_cfg.pretrain.batch_size) != (dino_cfg.dino.epochs, dino_cfg.dino.batch_size):
        raise ContractError("epochs / batch size differ between the two configs")
    if cass_cfg.augment.target_size != dino_cfg.augment.target_size:
        raise ContractError("image sizes differ between the two configs")
    seed = cass_cfg.seeds[0] if seed is None else seed
    dataset = build_dataset(cass_cfg.dataset)
    pair = pair_arms(cass_cfg.arm_a, cass_cfg.arm_b, seed)
    c = pretrain(dataset, pair, PretrainConfig(**{**asdict(cass_cfg.pretrain), "seed": seed}), cass_cfg.augment).record
    d = dino_pretrain(dataset, dino_cfg.dino_arm, DinoConfig(**{**asdict(dino_cfg.dino), "seed": seed}),
                      dino_cfg.augment).record
    n = c.extra["n_unlabeled"]
    epochs = cass_cfg.pretrain.epochs
    report = {"n_samples": n, "epochs": epochs, "batch_size": cass_cfg.pretrain.batch_size, "seed": seed}
    for tag, r in (("cass", c), ("dino", d)):
        report[tag] = {
            "wall_clock_seconds": r.wall_clock_seconds,
            "counters": r.counters,
            "steps": r.extra["steps"],
            "augmentations_per_sample_per_step": r.counters["augmentation_applications"] / (n * epochs),
        }
    ct, dt = c.wall_clock_seconds["total"], d.wall_clock_seconds["total"]
    report["ratios"] = {
        "wall_clock_dino_over_cass": dt / ct,
        "time_saving_vs_dino": 1.0 - ct / dt,
        "augmentations_dino_over_cass": d.counters["augmentation_applications"] / c.counters["augmentation_applications"],
        "forward_passes_dino_over_cass": d.counters["forward_passes"] / c.counters["forward_passes"],
    }
    out = cass_cfg.out / "compare_cost.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2))
    return report


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def _fmt(m: dict) -> str:
    half = m.get("ci95")
    if half is None or (isinstance(half, float) and np.isnan(half)):
        return f"{m['mean']:.4f}"
    return f"{m['mean']:.4f} ± {half:.4f}"


def report(source, out_dir, maps: dict | None = None) -> dict:
    """Render a markdown summary (tables of mean ± CI) and plots.

    ``source`` is a list of RunRecords, a results-store directory, or a sweep
    report dict. ``maps`` (name -> 2-D array) are rendered as heatmaps.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from cass.analysis import save_map

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines, plots = [], []
    if isinstance(source, (str, Path)):
        p = Path(source)
        source = json.loads((p / "sweep_report.json").read_text()) if (p / "sweep_report.json").exists() else load_records(p)
    if isinstance(source, dict):
        axis, values = source["axis"], source["values"]
        lines += [f"# Sweep over `{axis}` ({source['metric']})", "", "| arm | " + " | ".join(values) + " |",
                  "|---|" + "---|" * len(values)]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method, archs in source["grid"].items():
            for arm, cells in archs.items():
                row = [cells.get(v, float("nan")) for v in values]
                lines.append(f"| {method}/{arm} | " + " | ".join(f"{x:.4f}" for x in row) + " |")
                xs = np.arange(len(values))
                ax.plot(xs, row, marker="o", label=f"{method}/{arm}")
        ax.set_xticks(np.arange(len(values)), values)
        ax.set_xlabel(axis)
        ax.set_ylabel(source["metric"])
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{source['metric']}_vs_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        plots.append(str(path))
        if source.get("robustness_variance"):
            lines += ["", "Mean variance across sweep values:", ""]
            lines += [f"- {k}: {v}" for k, v in source["robustness_variance"].items()]
    else:
        records = list(source)
        if not records:
            raise ContractError("nothing to report")
        lines += ["| run | seed | arm@fraction | metric | value |", "|---|---|---|---|---|"]
        for r in records:
            for key, ms in sorted(r.metrics.items()):
                for m, v in sorted(ms.items()):
                    val = _fmt(v) if "mean" in v else f"{v['value']:.4f}"
                    lines.append(f"| {r.run_id} | {r.seed if r.seed >= 0 else 'all'} | {key} | {m} | {val} |")
            if not r.metrics:
                lines.append(f"| {r.run_id} | {r.seed} | - | status | {r.status} |")
        curves = [r for r in records if r.loss_curve and r.phase == "run"]
        if curves:
            fig, ax = plt.subplots(figsize=(5, 3.5))
            for r in curves:
                ax.plot(np.arange(1, len(r.loss_curve) + 1), r.loss_curve, label=f"seed {r.seed}")
            ax.set_xlabel("epoch")
            ax.set_ylabel("pretraining loss")
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / "pretrain_loss.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            plots.append(str(path))
    for name, arr in (maps or {}).items():
        _, png = save_map(np.asarray(arr), out_dir / name)
        plots.append(str(png))
    summary = out_dir / "summary.md"
    summary.write_text("\n".join(lines) + "\n")
    return {"summary": str(summary), "plots": plots, "table_rows": sum(1 for l in lines if l.startswith("| ") and not l.startswith("| run") and not l.startswith("| arm"))}
