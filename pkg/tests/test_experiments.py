import json

import numpy as np
import pytest
import torch
import yaml

from cass.arms import load_checkpoint, state_digest
from cass.cli import main
from cass.errors import ConfigError, ContractError
from cass.experiments import (apply_override, apply_sweep_value, compare_cost, config_from_dict, load_config, report,
                              run, sweep, with_updates)
from cass.metrics import ci95
from cass.records import RunRecord, load_records

TINY = {
    "name": "tiny",
    "arm_a": {"family": "cnn", "variant": "micro_cnn", "head_dim": 8, "image_size": 16},
    "arm_b": {"family": "vit", "variant": "vit_mini_p4", "head_dim": 8, "image_size": 16},
    "dino_arm": {"family": "vit", "variant": "vit_mini_p4", "head_dim": 8, "image_size": 16},
    "dataset": {"n": 40, "classes": 2, "image_size": 16},
    "pretrain": {"epochs": 2, "batch_size": 8},
    "dino": {"epochs": 2, "batch_size": 8},
    "finetune": {"max_epochs": 2, "patience": 1, "batch_size": 8},
    "seeds": [0, 1],
}


def tiny(tmp_path, **updates):
    d = json.loads(json.dumps(TINY))
    d.update(updates)
    d["output_dir"] = str(tmp_path / d["name"])
    return config_from_dict(d)


def test_config_defaults_and_validation():
    cfg = config_from_dict({})
    assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.method == "cass"
    assert cfg.augment.target_size == (32, 32)
    assert config_from_dict({"dataset": {"image_size": 16}, "arm_a": {"family": "cnn", "variant": "micro_cnn",
                             "image_size": 16}, "arm_b": {"family": "vit", "variant": "vit_tiny_p4", "image_size": 16},
                             "dino_arm": {"family": "vit", "variant": "vit_tiny_p4", "image_size": 16}
                             }).augment.target_size == (16, 16)
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": [1, 1]})
    with pytest.raises(ConfigError):
        config_from_dict({"seeds": []})
    with pytest.raises(ConfigError):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"method": "mae"})
    small = {"dataset": {"image_size": 16}, "arm_a": {"family": "cnn", "variant": "micro_cnn", "image_size": 16},
             "arm_b": {"family": "vit", "variant": "vit_tiny_p4", "image_size": 16}}
    assert config_from_dict(small).dino_arm.image_size == 32  # unused by cass runs
    with pytest.raises(ConfigError):
        config_from_dict({**small, "method": "dino"})
    with pytest.raises(ConfigError):
        config_from_dict({"sweep": {"axis": "depth", "values": [1]}})


def test_overrides_and_yaml_round_trip(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(TINY))
    cfg = load_config(path, ["pretrain.epochs=5", "seeds=[3]", "finetune.lr=0.001", "pretrain.head_variant=softmax"])
    assert cfg.pretrain.epochs == 5 and cfg.seeds == [3]
    assert cfg.finetune.lr == 0.001 and cfg.pretrain.head_variant == "softmax"
    assert apply_override({}, "a.b.c=1") == {"a": {"b": {"c": 1}}}
    with pytest.raises(ConfigError):
        apply_override({}, "novalue")
    again = config_from_dict(yaml.safe_load(yaml.safe_dump(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()


def test_run_records_and_aggregate(tmp_path):
    cfg = tiny(tmp_path)
    records = run(cfg)
    assert len(records) == 3 and records[-1].phase == "aggregate"
    agg = records[-1]
    assert all(r.status == "ok" for r in records)
    assert set(agg.metrics) == {"micro_cnn@1", "vit_mini_p4@1"}
    for key, ms in agg.metrics.items():
        vals = [r.metrics[key]["f1_macro"]["value"] for r in records[:-1]]
        assert ms["f1_macro"]["values"] == vals
        mean, half = ci95(vals)
        assert ms["f1_macro"]["mean"] == pytest.approx(mean) and ms["f1_macro"]["ci95"] == pytest.approx(half)
    stored = load_records(cfg.out)
    assert {r.run_id for r in stored} == {r.run_id for r in records}
    assert (cfg.out / "config.yaml").exists()
    rec = records[0]
    assert rec.counters["augmentation_applications"] > 0 and rec.counters["parameter_copy_ops"] == 0
    assert RunRecord.from_dict(json.loads(json.dumps(rec.to_dict()))).to_dict() == rec.to_dict()


def test_run_is_deterministic(tmp_path):
    a = run(tiny(tmp_path / "one", seeds=[0]))
    b = run(tiny(tmp_path / "two", seeds=[0]))
    assert a[0].metrics == b[0].metrics
    assert a[0].loss_curve == b[0].loss_curve
    for key, path in a[0].checkpoints.items():
        other = b[0].checkpoints[key]
        assert state_digest(load_checkpoint(path)[0]) == state_digest(load_checkpoint(other)[0])


def test_label_fractions_make_one_finetune_each(tmp_path):
    recs = run(tiny(tmp_path, seeds=[0], label_fractions=[0.1, 1.0], finetune_arms=["a"]))
    assert sorted(recs[0].metrics) == ["micro_cnn@0.1", "micro_cnn@1"]
    assert len(recs[0].extra["finetune_records"]) == 2


def test_failed_stage_keeps_partial_record(tmp_path, monkeypatch):
    import cass.experiments as ex

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(ex, "finetune", boom)
    recs = run(tiny(tmp_path, seeds=[0]))
    assert recs[0].status == "failed" and "disk on fire" in recs[0].error
    assert recs[0].checkpoints  # pretraining output kept
    assert recs[-1].status == "failed"


def test_dino_and_supervised_methods(tmp_path):
    d = run(tiny(tmp_path, name="d", method="dino", seeds=[0]))
    assert list(d[0].metrics) == ["vit_mini_p4@1"]
    assert d[0].counters["parameter_copy_ops"] > 0
    s = run(tiny(tmp_path, name="s", method="supervised", seeds=[0], finetune_arms=["b"]))
    assert list(s[0].metrics) == ["vit_mini_p4@1"]


def test_sweep_batch_size(tmp_path):
    cfg = tiny(tmp_path, seeds=[0], finetune_arms=["a"], sweep={"axis": "batch_size", "values": [8, 16, 32]})
    rep = sweep(cfg)
    assert len(rep["aggregates"]) == 3
    assert set(rep["grid"]["cass"]["micro_cnn@1"]) == {"8", "16", "32"}
    vals = list(rep["grid"]["cass"]["micro_cnn@1"].values())
    assert rep["robustness_variance"]["cass"] == pytest.approx(np.var(vals, ddof=1))
    assert (cfg.out / "sweep_report.json").exists()
    out = report(cfg.out, tmp_path / "rep")
    assert all((tmp_path / "rep").joinpath(p).stat().st_size > 0 for p in out["plots"])


def test_sweep_epochs_four_cells_and_cell_independence(tmp_path):
    cfg = tiny(tmp_path, seeds=[0], finetune_arms=["b"], sweep={"axis": "epochs", "values": [1, 2, 3, 4]})
    rep = sweep(cfg)
    assert len(rep["aggregates"]) == 4
    cell = apply_sweep_value(with_updates(cfg, output_dir=str(tmp_path / "rerun")), "epochs", 3)
    again = run(cell)[-1]
    assert again.metrics == {k: v for k, v in rep["aggregates"]["3"]["metrics"].items()}


def test_apply_sweep_values(tmp_path):
    cfg = tiny(tmp_path)
    assert apply_sweep_value(cfg, "arch_pair", "micro_cnn+micro_cnn").arm_b.family == "cnn"
    assert apply_sweep_value(cfg, "optimizer_cnn", "sgd").pretrain.optimizer_cnn == "sgd"
    assert apply_sweep_value(cfg, "head_variant", "sigmoid").pretrain.head_variant == "sigmoid"
    assert apply_sweep_value(cfg, "label_fraction", 0.1).label_fractions == [0.1]
    assert apply_sweep_value(cfg, "augment_set", ["solarize"]).augment.extra == ("solarize",)
    with pytest.raises(ConfigError):
        apply_sweep_value(cfg, "arch_pair", "micro_cnn+alexnet")


def test_compare_cost_contracts(tmp_path):
    c = tiny(tmp_path)
    d = with_updates(c, method="dino")
    rep = compare_cost(c, d)
    n, epochs = rep["n_samples"], rep["epochs"]
    assert rep["cass"]["counters"]["augmentation_applications"] == n * epochs
    assert rep["dino"]["counters"]["augmentation_applications"] >= 2 * n * epochs
    assert rep["cass"]["counters"]["parameter_copy_ops"] == 0 < rep["dino"]["counters"]["parameter_copy_ops"]
    assert (c.out / "compare_cost.json").exists()
    with pytest.raises(ContractError):
        compare_cost(c, with_updates(d, dino=dict(d.to_dict()["dino"], epochs=3)))
    with pytest.raises(ContractError):
        compare_cost(d, c)


def test_report_single_record(tmp_path):
    rec = RunRecord("r1", "cass", "run", 0, metrics={"micro_cnn@1": {"f1_macro": {"value": 0.5}}})
    out = report([rec], tmp_path)
    assert out["table_rows"] == 1
    assert (tmp_path / "summary.md").read_text().count("| r1 |") == 1
    with pytest.raises(ContractError):
        report([], tmp_path)


def test_cli_verbs(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CASS_RESULTS_ROOT", str(tmp_path / "root"))
    cfg_path = tmp_path / "c.yaml"
    d = dict(TINY)
    d.pop("seeds")
    cfg_path.write_text(yaml.safe_dump(d))
    base = ["--config", str(cfg_path), "--seed", "0"]
    assert main(["pretrain", *base]) == 0
    pre = json.loads(capsys.readouterr().out)
    ckpt = pre["checkpoints"]["arm_a"]
    assert ckpt.startswith(str(tmp_path / "root" / "tiny"))
    assert main(["finetune", ckpt, *base, "--out", str(tmp_path / "ft")]) == 0
    assert "f1_macro" in json.loads(capsys.readouterr().out)
    assert main(["run", *base, "--set", "finetune_arms=[a]", "--out", str(tmp_path / "run")]) == 0
    assert json.loads(capsys.readouterr().out)["failed_seeds"] == []
    assert main(["report", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "report" / "summary.md").exists()
    capsys.readouterr()
    assert main(["sweep", *base, "--set", "finetune_arms=[a]", "--set", "sweep={axis: batch_size, values: [8, 16]}",
                 "--out", str(tmp_path / "sw")]) == 0
    assert "robustness_variance" in json.loads(capsys.readouterr().out)
    assert main(["compare-cost", *base, "--out", str(tmp_path / "cc")]) == 0
    assert json.loads(capsys.readouterr().out)["cass"]["counters"]["parameter_copy_ops"] == 0
    with pytest.raises(SystemExit):
        main(["train"])


@pytest.mark.slow
def test_head_variant_sweep_ordering(tmp_path):
    """Without a squashing head the arms transfer at least as well (median of seeds)."""
    cfg = config_from_dict({
        "name": "heads", "output_dir": str(tmp_path / "heads"), "seeds": [0, 1, 2],
        "arm_a": {"family": "cnn", "variant": "micro_cnn", "head_dim": 16, "image_size": 16},
        "arm_b": {"family": "vit", "variant": "vit_mini_p4", "head_dim": 16, "image_size": 16},
        "dataset": {"n": 120, "classes": 3, "image_size": 16},
        "pretrain": {"epochs": 8}, "finetune": {"max_epochs": 15, "patience": 3},
        "sweep": {"axis": "head_variant", "values": ["none", "softmax", "sigmoid"]},
    })
    rep = sweep(cfg)
    medians = {v: {k: m["f1_macro"]["median"] for k, m in agg["metrics"].items()} for v, agg in rep["aggregates"].items()}
    print(medians)
    for arm in medians["none"]:
        assert medians["none"][arm] >= medians["softmax"][arm]
        assert medians["none"][arm] >= medians["sigmoid"][arm]
