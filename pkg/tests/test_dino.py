import math

import numpy as np
import pytest
import torch

from cass.arms import ArmSpec, build_arm
from cass.augment import AugmentConfig, Augmenter
from cass.data import synth_dataset
from cass.dino import DinoConfig, dino_loss, dino_pretrain, dino_step, ema_update, make_teacher
from cass.errors import ConfigError, ContractError
from cass.records import Counters

SPEC = ArmSpec("vit", "vit_mini_p4", head_dim=6, image_size=16)


def test_ema_examples():
    t, s = torch.nn.Linear(1, 1, bias=False), torch.nn.Linear(1, 1, bias=False)
    with torch.no_grad():
        t.weight.fill_(1.0)
        s.weight.fill_(2.0)
    c = Counters()
    ema_update(t, s, 0.9, c)
    assert t.weight.item() == pytest.approx(1.1)
    assert c.parameter_copy_ops == 1
    ema_update(t, s, 1.0)
    assert t.weight.item() == pytest.approx(1.1)
    ema_update(t, s, 0.0)
    assert t.weight.item() == 2.0
    with pytest.raises(ContractError):
        ema_update(t, torch.nn.Linear(2, 1, bias=False), 0.5)


def test_uniform_teacher_gives_log_d():
    d = 6
    student = [torch.zeros(3, d), torch.zeros(3, d)]
    teacher = [torch.randn(3, d), torch.randn(3, d)]
    loss = dino_loss(student, teacher, torch.zeros(d), student_temp=0.1, teacher_temp=1e12)
    assert loss.item() == pytest.approx(math.log(d), rel=1e-6)


def test_identical_logits_give_self_entropy():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(4, 5, generator=g, dtype=torch.float64)
    loss = dino_loss([z, z], [z, z], torch.zeros(5, dtype=torch.float64), 0.5, 0.5)
    # scalar oracle: mean over rows of -sum p log p
    ent = 0.0
    for row in (z / 0.5).tolist():
        m = max(row)
        e = [math.exp(v - m) for v in row]
        p = [v / sum(e) for v in e]
        ent += -sum(pi * math.log(pi) for pi in p)
    assert loss.item() == pytest.approx(ent / 4, abs=1e-12)


def test_step_updates_student_teacher_center():
    student = build_arm(SPEC, 0)
    c = Counters()
    ts = make_teacher(student, c)
    assert all(not p.requires_grad for p in ts.teacher.parameters())
    n_tensors = len(list(student.parameters()))
    assert c.parameter_copy_ops == n_tensors
    opt = torch.optim.Adam(student.parameters(), lr=1e-3)
    x = torch.randn(4, 3, 16, 16)
    views = [x, x.flip(-1)]
    cfg = DinoConfig(center_momentum=0.0)
    with torch.no_grad():
        ts.teacher.train()
        expected_center = torch.cat([ts.teacher(v) for v in views]).mean(0)
    before_student = [p.detach().clone() for p in student.parameters()]
    loss = dino_step(views, student, ts, opt, cfg, c)
    assert math.isfinite(loss)
    assert c.parameter_copy_ops == 2 * n_tensors
    assert c.forward_passes == 4
    assert torch.allclose(ts.center, expected_center, atol=1e-6)
    assert any(not torch.equal(a, b) for a, b in zip(before_student, student.parameters()))
    assert all(p.grad is None for p in ts.teacher.parameters())


def test_step_needs_two_views():
    student = build_arm(SPEC, 0)
    ts = make_teacher(student)
    with pytest.raises(ContractError):
        dino_step([torch.randn(2, 3, 16, 16)], student, ts, torch.optim.Adam(student.parameters()), DinoConfig(), Counters())


def test_config_validation():
    with pytest.raises(ConfigError):
        DinoConfig(views_per_image=1)
    with pytest.raises(ConfigError):
        DinoConfig(momentum=1.5)


def test_pretrain_counts(tmp_path):
    ds = synth_dataset(10, 2, 16, structure_seed=0)
    res = dino_pretrain(ds, SPEC, DinoConfig(epochs=2, batch_size=4), AugmentConfig.for_size(16), out_dir=tmp_path)
    steps = 2 * 3
    n_tensors = len(list(res.student.parameters()))
    assert res.record.method == "dino"
    assert res.record.counters["augmentation_applications"] == 2 * 10 * 2
    assert res.record.counters["forward_passes"] == 4 * steps
    assert res.record.counters["parameter_copy_ops"] == n_tensors * (steps + 1)
    assert set(res.checkpoints) == {"student", "teacher"}
