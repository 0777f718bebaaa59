"""Siamese pretraining loop: one augmented view through both arms.

Each step augments every sample once, runs the identical batch through the
two arms, scores the pair with :func:`cass.loss.cass_loss` and lets each arm's
own optimiser apply its gradients. Arms never exchange parameters. Weight
averaging (SWA) runs on top of the optimisers and the learning rate follows
a restarting cosine schedule.
"""
from __future__ import annotations

import math
import uuid
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from cass.arms import ArmPair, save_checkpoint
from cass.augment import AugmentConfig, Augmenter
from cass.errors import ConfigError, ContractError, DivergenceError
from cass.loss import DEFAULT_EPS, HeadVariant, apply_head, cass_loss
from cass.records import Counters, PhaseTimer, RunRecord


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 16
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    cosine_T: int = 16
    cosine_unit: str = "step"  # "step" or "epoch"
    optimizer_cnn: str = "adam"
    optimizer_other: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    sgd_momentum: float = 0.9
    swa_enabled: bool = True
    swa_start_epoch: int | None = None
    swa_update_every: int = 1
    head_variant: str = "none"
    eps: float = DEFAULT_EPS
    divergence_threshold: float = 3.99
    divergence_patience: int = 10
    keep_swa_snapshots: bool = False
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.head_variant = HeadVariant(self.head_variant).value
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr_min < self.lr_max:
            raise ConfigError("lr_min must be below lr_max")
        if self.cosine_T < 1:
            raise ConfigError("cosine_T must be >= 1")
        if self.cosine_unit not in ("step", "epoch"):
            raise ConfigError("cosine_unit is 'step' or 'epoch'")
        if self.optimizer_cnn not in ("adam", "sgd") or self.optimizer_other != "adam":
            raise ConfigError("optimizer_cnn in {adam, sgd}; optimizer_other must be adam")
        if self.swa_start_epoch is None:
            self.swa_start_epoch = min(math.ceil(0.75 * self.epochs), self.epochs - 1)
        if not 0 <= self.swa_start_epoch < self.epochs:
            raise ConfigError("swa_start_epoch must lie in [0, epochs)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def cosine_lr(step: int, cfg) -> float:
    """Cosine annealing from ``lr_max`` to ``lr_min`` with period ``cosine_T``, restarting."""
    if step < 0:
        raise ContractError("step must be non-negative")
    phase = (step % cfg.cosine_T) / cfg.cosine_T
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


def swa_update(avg: dict | None, current: dict, n: int) -> dict:
    """Running mean over snapshots: ``(n * avg + current) / (n + 1)`` per tensor."""
    if n == 0 or avg is None:
        return {k: v.detach().clone() for k, v in current.items()}
    if avg.keys() != current.keys():
        raise ContractError("snapshot keys differ from the running average")
    out = {}
    for k, a in avg.items():
        c = current[k]
        if a.shape != c.shape:
            raise ContractError(f"shape mismatch for {k}: {tuple(a.shape)} vs {tuple(c.shape)}")
        out[k] = (a * n + c.to(a.dtype)) / (n + 1)
    return out


def averageable_state(model: nn.Module) -> dict:
    """Floating-point parameters and buffers as float64 copies."""
    return {k: v.detach().to(torch.float64).clone()
            for k, v in model.state_dict().items() if v.is_floating_point()}


def load_average(model: nn.Module, avg: dict) -> None:
    state = model.state_dict()
    for k, v in avg.items():
        state[k] = v.to(state[k].dtype)
    model.load_state_dict(state)


def make_optimizer(model: nn.Module, kind: str, cfg) -> torch.optim.Optimizer:
    if kind == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.lr_max, momentum=cfg.sgd_momentum,
                               weight_decay=cfg.weight_decay)
    return torch.optim.Adam(model.parameters(), lr=cfg.lr_max, betas=cfg.betas, weight_decay=cfg.weight_decay)


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


@dataclass
class PretrainState:
    optimizers: tuple
    epoch: int = 0
    step: int = 0
    swa_avg: list = field(default_factory=lambda: [None, None])
    swa_n: int = 0
    swa_snapshots: list = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)
    high_loss_run: int = 0


def init_state(pair: ArmPair, cfg: PretrainConfig) -> PretrainState:
    opts = tuple(make_optimizer(m, cfg.optimizer_cnn if s.family == "cnn" else cfg.optimizer_other, cfg)
                 for m, s in ((pair.model_a, pair.spec_a), (pair.model_b, pair.spec_b)))
    return PretrainState(optimizers=opts)


def pretrain_step(images: torch.Tensor, pair: ArmPair, state: PretrainState, cfg: PretrainConfig,
                  lr: float | None = None) -> float:
    """One optimisation step on an already-augmented batch; returns the loss."""
    lr = cosine_lr(state.step if cfg.cosine_unit == "step" else state.epoch, cfg) if lr is None else lr
    for m in pair.models:
        m.train()
    for opt in state.optimizers:
        set_lr(opt, lr)
        opt.zero_grad(set_to_none=True)
    out_a, out_b = pair.model_a(images), pair.model_b(images)
    state.counters.forward_passes += 2
    finite = (bool(torch.isfinite(out_a).all()), bool(torch.isfinite(out_b).all()))
    value = math.nan
    if all(finite):
        loss = cass_loss(apply_head(out_a, cfg.head_variant), apply_head(out_b, cfg.head_variant), cfg.eps)
        value = float(loss.detach())
    if not math.isfinite(value) or value > 4.0 + 1e-6:
        raise DivergenceError(f"loss {value} at step {state.step}", {
            "step": state.step, "epoch": state.epoch, "loss": value,
            "arm_a_finite": finite[0], "arm_b_finite": finite[1], "recent_losses": state.step_losses[-10:]})
    loss.backward()
    for opt in state.optimizers:
        opt.step()
    state.counters.optimizer_steps += 2
    state.step += 1
    state.step_losses.append(value)
    state.high_loss_run = state.high_loss_run + 1 if value > cfg.divergence_threshold else 0
    if state.high_loss_run >= cfg.divergence_patience:
        raise DivergenceError(f"loss above {cfg.divergence_threshold} for {state.high_loss_run} steps",
                              {"step": state.step, "recent_losses": state.step_losses[-cfg.divergence_patience:]})
    return value


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    perm = np.random.default_rng([seed, epoch, 0xBA7C]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def unlabeled_pool(dataset) -> np.ndarray:
    """Pretraining sees the train split only (all samples if no split is assigned)."""
    idx = dataset.indices("train")
    return idx if len(idx) else dataset.indices()


@dataclass
class PretrainResult:
    pair: ArmPair
    record: RunRecord
    state: PretrainState
    checkpoints: dict = field(default_factory=dict)


def pretrain(dataset, pair: ArmPair, cfg: PretrainConfig, augment_cfg: AugmentConfig | None = None,
             out_dir=None, run_id: str | None = None) -> PretrainResult:
    """Full pretraining run over ``cfg.epochs`` epochs of the train split.

    Executes exactly ``epochs * ceil(N / batch_size)`` steps. When SWA is on,
    the arms end up holding the averaged weights; with ``out_dir`` both the
    averaged and the raw weights of each arm are written as checkpoints
    (``arm_a.pt`` / ``arm_b.pt`` hold the weights used downstream).
    """
    pool = unlabeled_pool(dataset)
    if len(pool) == 0:
        raise ConfigError("pretraining dataset is empty")
    augment_cfg = augment_cfg or AugmentConfig.for_size(pair.model_a.image_size)
    augmenter = Augmenter(augment_cfg)
    state = init_state(pair, cfg)
    timer = PhaseTimer()
    record = RunRecord(run_id or f"cass-{uuid.uuid4().hex[:8]}", "cass", "pretrain", cfg.seed,
                       config={"pretrain": cfg.to_dict(), "augment": augment_cfg.to_dict(),
                               "arm_a": pair.spec_a.to_dict(), "arm_b": pair.spec_b.to_dict()})
    with timer("total"):
        for epoch in range(cfg.epochs):
            state.epoch = epoch
            losses = []
            for b, idx in enumerate(batch_order(len(pool), cfg.batch_size, cfg.seed, epoch)):
                with timer("augment"):
                    rng = np.random.default_rng([cfg.seed, epoch, b])
                    x = augmenter.batch([dataset.images[i] for i in pool[idx]], rng)
                with timer("step"):
                    losses.append(pretrain_step(x, pair, state, cfg))
            state.epoch_losses.append(float(np.mean(losses)))
            if cfg.swa_enabled and epoch >= cfg.swa_start_epoch and (epoch - cfg.swa_start_epoch) % cfg.swa_update_every == 0:
                with timer("swa"):
                    snaps = [averageable_state(m) for m in pair.models]
                    state.swa_avg = [swa_update(a, s, state.swa_n) for a, s in zip(state.swa_avg, snaps)]
                    state.swa_n += 1
                    if cfg.keep_swa_snapshots:
                        state.swa_snapshots.append(snaps)
        state.counters.augmentation_applications = augmenter.counter.applications
        checkpoints = {}
        with timer("checkpoint"):
            if out_dir is not None:
                out_dir = Path(out_dir)
                for tag, m in zip(("a", "b"), pair.models):
                    checkpoints[f"arm_{tag}_raw"] = str(save_checkpoint(m, out_dir / f"arm_{tag}_raw.pt", epoch=cfg.epochs))
            if cfg.swa_enabled and state.swa_n:
                for m, avg in zip(pair.models, state.swa_avg):
                    load_average(m, avg)
            if out_dir is not None:
                for tag, m in zip(("a", "b"), pair.models):
                    checkpoints[f"arm_{tag}"] = str(save_checkpoint(
                        m, out_dir / f"arm_{tag}.pt", epoch=cfg.epochs, swa=cfg.swa_enabled and state.swa_n > 0))
    record.loss_curve = state.epoch_losses
    record.step_losses = state.step_losses
    record.counters = asdict(state.counters)
    record.wall_clock_seconds = dict(timer.seconds)
    record.checkpoints = checkpoints
    record.extra = {"steps": state.step, "swa_snapshots": state.swa_n, "pairing_kind": pair.pairing_kind,
                    "n_unlabeled": int(len(pool))}
    if out_dir is not None:
        record.save(Path(out_dir) / "pretrain_record.json")
    return PretrainResult(pair, record, state, checkpoints)


@torch.no_grad()
def embed(model: nn.Module, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    """Eval-mode outputs for already-preprocessed images."""
    model.eval()
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
