"""Minimal DINO-style self-distillation baseline.

Student and EMA teacher share one architecture. Every sample is augmented
twice, the teacher output is centred and sharpened, and the student is
trained with cross-entropy against the teacher on the opposite view. Only
meant for cost and robustness comparisons, not accuracy claims.
"""
from __future__ import annotations

import copy
import math
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from cass.arms import ArmSpec, build_arm, save_checkpoint
from cass.augment import AugmentConfig, Augmenter
from cass.errors import ConfigError, ContractError, DivergenceError
from cass.pretrain import batch_order, cosine_lr, set_lr, unlabeled_pool
from cass.records import Counters, PhaseTimer, RunRecord


@dataclass
class DinoConfig:
    epochs: int = 100
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    cosine_T: int = 16
    momentum: float = 0.996
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    views_per_image: int = 2
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.momentum <= 1 and 0 <= self.center_momentum <= 1):
            raise ConfigError("momenta must lie in [0, 1]")
        if self.student_temp <= 0 or self.teacher_temp <= 0:
            raise ConfigError("temperatures must be positive")
        if self.views_per_image < 2:
            raise ConfigError("views_per_image must be >= 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TeacherState:
    teacher: nn.Module
    center: torch.Tensor


def make_teacher(student: nn.Module, counters: Counters | None = None) -> TeacherState:
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    if counters is not None:
        counters.parameter_copy_ops += sum(1 for _ in teacher.parameters())
    return TeacherState(teacher, torch.zeros(student.head.out_features))


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, m: float, counters: Counters | None = None) -> nn.Module:
    """``teacher <- m * teacher + (1 - m) * student`` for every parameter tensor."""
    if not 0.0 <= m <= 1.0:
        raise ContractError("momentum must lie in [0, 1]")
    t_params, s_params = list(teacher.parameters()), list(student.parameters())
    if len(t_params) != len(s_params) or any(a.shape != b.shape for a, b in zip(t_params, s_params)):
        raise ContractError("teacher and student parameter shapes differ")
    for pt, ps in zip(t_params, s_params):
        pt.mul_(m).add_(ps.detach(), alpha=1.0 - m)
    if counters is not None:
        counters.parameter_copy_ops += len(t_params)
    return teacher


def dino_loss(student_out: list[torch.Tensor], teacher_out: list[torch.Tensor], center: torch.Tensor,
              student_temp: float, teacher_temp: float) -> torch.Tensor:
    """Mean over (teacher view i, student view j != i) of
    ``H(softmax((t_i - c) / teacher_temp), softmax(s_j / student_temp))``."""
    total, terms = 0.0, 0
    for i, t in enumerate(teacher_out):
        q = F.softmax((t - center) / teacher_temp, dim=-1).detach()
        for j, s in enumerate(student_out):
            if i == j:
                continue
            total = total + torch.sum(-q * F.log_softmax(s / student_temp, dim=-1), dim=-1).mean()
            terms += 1
    return total / terms


def dino_step(views: list[torch.Tensor], student: nn.Module, ts: TeacherState, optimizer, cfg: DinoConfig,
              counters: Counters, lr: float | None = None) -> float:
    """One student update, then EMA teacher and centre updates."""
    if len(views) < 2:
        raise ContractError("need at least two augmented views")
    if lr is not None:
        set_lr(optimizer, lr)
    student.train()
    ts.teacher.train()
    with torch.no_grad():
        t_out = [ts.teacher(v) for v in views]
    s_out = [student(v) for v in views]
    counters.forward_passes += 2 * len(views)
    loss = dino_loss(s_out, t_out, ts.center, cfg.student_temp, cfg.teacher_temp)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite DINO loss {value}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    counters.optimizer_steps += 1
    ema_update(ts.teacher, student, cfg.momentum, counters)
    with torch.no_grad():
        batch_center = torch.cat(t_out).mean(dim=0)
        ts.center = ts.center * cfg.center_momentum + batch_center * (1.0 - cfg.center_momentum)
    return value


@dataclass
class DinoResult:
    student: nn.Module
    teacher: TeacherState
    record: RunRecord
    checkpoints: dict = field(default_factory=dict)


def dino_pretrain(dataset, spec: ArmSpec, cfg: DinoConfig, augment_cfg: AugmentConfig | None = None,
                  out_dir=None, run_id: str | None = None) -> DinoResult:
    pool = unlabeled_pool(dataset)
    if len(pool) == 0:
        raise ConfigError("pretraining dataset is empty")
    student = build_arm(spec, cfg.seed)
    augment_cfg = augment_cfg or AugmentConfig.for_size(spec.image_size)
    augmenter = Augmenter(augment_cfg)
    counters = Counters()
    timer = PhaseTimer()
    record = RunRecord(run_id or f"dino-{uuid.uuid4().hex[:8]}", "dino", "pretrain", cfg.seed,
                       config={"dino": cfg.to_dict(), "augment": augment_cfg.to_dict(), "arm": spec.to_dict()})
    optimizer = torch.optim.Adam(student.parameters(), lr=cfg.lr_max)
    losses_step, losses_epoch, step = [], [], 0
    with timer("total"):
        ts = make_teacher(student, counters)
        for epoch in range(cfg.epochs):
            losses = []
            for b, idx in enumerate(batch_order(len(pool), cfg.batch_size, cfg.seed, epoch)):
                with timer("augment"):
                    rng = np.random.default_rng([cfg.seed, epoch, b])
                    imgs = [dataset.images[i] for i in pool[idx]]
                    views = [augmenter.batch(imgs, rng) for _ in range(cfg.views_per_image)]
                with timer("step"):
                    losses.append(dino_step(views, student, ts, optimizer, cfg, counters, cosine_lr(step, cfg)))
                step += 1
            losses_step.extend(losses)
            losses_epoch.append(float(np.mean(losses)))
        counters.augmentation_applications = augmenter.counter.applications
        checkpoints = {}
        with timer("checkpoint"):
            if out_dir is not None:
                checkpoints["student"] = str(save_checkpoint(student, Path(out_dir) / "student.pt", epoch=cfg.epochs))
                checkpoints["teacher"] = str(save_checkpoint(ts.teacher, Path(out_dir) / "teacher.pt", epoch=cfg.epochs))
    record.loss_curve = losses_epoch
    record.step_losses = losses_step
    record.counters = asdict(counters)
    record.wall_clock_seconds = dict(timer.seconds)
    record.checkpoints = checkpoints
    record.extra = {"steps": step, "n_unlabeled": int(len(pool))}
    if out_dir is not None:
        record.save(Path(out_dir) / "pretrain_record.json")
    return DinoResult(student, ts, record, checkpoints)
