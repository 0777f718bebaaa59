"""End-to-end supervised fine-tuning of a pretrained arm.

Label-fraction subsetting, focal loss weighted by min-max normalised class
counts, Adam with a single cosine anneal, early stopping on validation loss
with best-weight restore, and test evaluation that touches the test split
exactly once, at the end.
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

from cass.arms import load_checkpoint, replace_head, save_checkpoint
from cass.augment import AugmentConfig, Augmenter
from cass.data import LabeledImageDataset, round_half_up
from cass.errors import ConfigError, ContractError
from cass.metrics import balanced_accuracy, f1_macro
from cass.records import PhaseTimer, RunRecord


@dataclass
class FinetuneConfig:
    label_fraction: float = 1.0
    max_epochs: int = 50
    patience: int = 5
    lr: float = 3e-4
    batch_size: int = 16
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    weight_mode: str = "minmax_literal"
    augment: bool = True
    multilabel_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError("need 0 < patience < max_epochs")
        if self.weight_mode not in ("minmax_literal", "minmax_inverse", "uniform"):
            raise ConfigError(f"unknown weight_mode {self.weight_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def class_weights(counts, mode: str = "minmax_literal") -> np.ndarray:
    """Min-max normalised class distribution used as focal-loss weights.

    ``minmax_literal``: ``(n_c - min) / (max - min)``, so the rarest class
    gets weight 0. ``minmax_inverse`` applies the same map to
    ``max + min - n_c``. Equal counts give all-ones in both modes.
    """
    counts = np.asarray(counts, dtype=float)
    if counts.ndim != 1 or counts.size == 0:
        raise ContractError("counts must be a non-empty vector")
    if (counts < 0).any() or counts.sum() == 0:
        raise ContractError("counts must be non-negative with at least one nonzero entry")
    if mode == "uniform":
        return np.ones_like(counts)
    lo, hi = counts.min(), counts.max()
    if hi == lo:
        return np.ones_like(counts)
    if mode == "minmax_inverse":
        counts = hi + lo - counts
    elif mode != "minmax_literal":
        raise ContractError(f"unknown mode {mode!r}")
    return (counts - lo) / (hi - lo)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, weights=None, gamma: float = 2.0,
               alpha: float = 1.0, multilabel: bool = False) -> torch.Tensor:
    """Class-weighted focal loss, averaged over the batch.

    Multiclass: ``-alpha * w_y * (1 - p_y)^gamma * log p_y`` with
    ``p = softmax(logits)``. Multilabel: the same binary term per class on
    ``sigmoid(logits)`` (``p_t`` is ``p`` for positives, ``1 - p`` for
    negatives), summed over classes.
    """
    n_cls = logits.shape[-1]
    w = torch.ones(n_cls, dtype=logits.dtype) if weights is None else torch.as_tensor(weights, dtype=logits.dtype)
    if w.shape != (n_cls,):
        raise ContractError("one weight per class expected")
    if multilabel:
        targets = targets.to(logits.dtype)
        if targets.shape != logits.shape:
            raise ContractError("multilabel targets must match logits in shape")
        log_p = F.logsigmoid(logits)
        log_1mp = F.logsigmoid(-logits)
        log_pt = targets * log_p + (1 - targets) * log_1mp
        pt = log_pt.exp()
        return (-alpha * w * (1 - pt) ** gamma * log_pt).sum(dim=-1).mean()
    targets = targets.long()
    if targets.min() < 0 or targets.max() >= n_cls:
        raise ContractError("target class out of range")
    log_p = F.log_softmax(logits, dim=-1).gather(1, targets[:, None]).squeeze(1)
    p = log_p.exp()
    return (-alpha * w[targets] * (1 - p) ** gamma * log_p).mean()


def subset_labels(dataset: LabeledImageDataset, indices, fraction: float, seed: int) -> np.ndarray:
    """Stratified, seeded subset of ``indices`` with ``round(fraction * N)`` samples.

    Classes are allocated ``floor(fraction * n_c)`` slots each, leftover slots
    go to the largest remainders (ties broken by the seed), so any class with
    at least ``1 / fraction`` samples keeps one.
    """
    indices = np.asarray(indices, dtype=int)
    if fraction >= 1.0:
        return np.sort(indices)
    size = round_half_up(fraction * len(indices))
    if size < 1:
        raise ConfigError(f"label fraction {fraction} leaves no samples out of {len(indices)}")
    rng = np.random.default_rng([seed, 0x1ABE1])
    keys = dataset.stratum(indices)
    strata: dict = {}
    for pos, k in enumerate(keys):
        strata.setdefault(k, []).append(pos)
    names = sorted(strata, key=repr)
    want = np.array([fraction * len(strata[k]) for k in names])
    take = np.floor(want).astype(int)
    remainder = want - take + 1e-9 * rng.random(len(names))
    for i in np.argsort(-remainder)[: size - take.sum()]:
        take[i] += 1
    chosen = []
    for k, t in zip(names, take):
        members = np.array(strata[k])
        chosen.extend(members[rng.permutation(len(members))[:t]])
    return np.sort(indices[np.array(chosen, dtype=int)])


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.since_best = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best:
            self.best, self.best_epoch, self.since_best = val_loss, epoch, 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


class SplitAccess:
    """Counts reads per split so test-set isolation can be audited."""

    def __init__(self, dataset: LabeledImageDataset):
        self.dataset = dataset
        self.reads = {"train": 0, "val": 0, "test": 0}

    def images(self, split: str, idx) -> list:
        self.reads[split] += len(idx)
        return [self.dataset.images[i] for i in idx]


@torch.no_grad()
def predict_logits(model: nn.Module, images, augmenter: Augmenter, batch_size: int = 64) -> torch.Tensor:
    model.eval()
    out = [model(augmenter.plain_batch(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return torch.cat(out)


def decide(logits: torch.Tensor, multilabel: bool, threshold: float) -> np.ndarray:
    if multilabel:
        return (torch.sigmoid(logits) >= threshold).int().numpy()
    return logits.argmax(dim=-1).numpy()


def evaluate(model, images, labels, dataset: LabeledImageDataset, augmenter, threshold=0.5) -> dict:
    multilabel = dataset.task_kind == "multilabel"
    pred = decide(predict_logits(model, images, augmenter), multilabel, threshold)
    reports = {"f1_macro": f1_macro(pred, labels, dataset.task_kind, dataset.num_classes)}
    if not multilabel:
        reports["balanced_accuracy"] = balanced_accuracy(pred, labels, dataset.num_classes)
    return reports


@dataclass
class FinetuneResult:
    model: nn.Module
    test_metrics: dict
    record: RunRecord
    history: dict = field(default_factory=dict)


def _labels_tensor(dataset, idx):
    y = dataset.labels[idx]
    return torch.as_tensor(y, dtype=torch.float32 if dataset.task_kind == "multilabel" else torch.long)


def finetune(checkpoint, dataset: LabeledImageDataset, cfg: FinetuneConfig, augment_cfg: AugmentConfig | None = None,
             out_dir=None, run_id: str | None = None, method: str = "cass") -> FinetuneResult:
    """Fine-tune every parameter of ``checkpoint`` (a path or a model) on ``dataset``.

    The dataset must carry a train/val/test assignment. The classifier head is
    replaced to match the class count. Returns the best-validation model, test
    metric reports and a run record.
    """
    if isinstance(checkpoint, (str, Path)):
        model, meta = load_checkpoint(checkpoint)
        source = str(checkpoint)
    else:
        model, meta, source = copy.deepcopy(checkpoint), {}, "in-memory"
    replace_head(model, dataset.num_classes, cfg.seed)
    if model.head.out_features != dataset.num_classes:
        raise ContractError("classifier head does not match the class count")
    for p in model.parameters():
        p.requires_grad_(True)
    train_all, val_idx, test_idx = dataset.indices("train"), dataset.indices("val"), dataset.indices("test")
    if len(train_all) == 0 or len(val_idx) == 0 or len(test_idx) == 0:
        raise ConfigError("dataset needs non-empty train/val/test splits; call cass.data.split first")
    train_idx = subset_labels(dataset, train_all, cfg.label_fraction, cfg.seed)
    multilabel = dataset.task_kind == "multilabel"
    counts = dataset.class_counts(indices=train_idx)
    weights = class_weights(counts, cfg.weight_mode) if counts.sum() > 0 else np.ones(dataset.num_classes)
    augment_cfg = augment_cfg or AugmentConfig.for_size(model.image_size)
    augmenter = Augmenter(augment_cfg)
    access = SplitAccess(dataset)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    stopper = EarlyStopping(cfg.patience)
    timer = PhaseTimer()
    best_state, history = None, {"train_loss": [], "val_loss": [], "lr": []}
    val_images = access.images("val", val_idx)
    y_val = _labels_tensor(dataset, val_idx)
    loss_kw = dict(weights=weights, gamma=cfg.focal_gamma, alpha=cfg.focal_alpha, multilabel=multilabel)
    epochs_run = 0
    with timer("train"):
        for epoch in range(cfg.max_epochs):
            lr = 0.5 * cfg.lr * (1 + math.cos(math.pi * epoch / cfg.max_epochs))
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            rng = np.random.default_rng([cfg.seed, epoch, 0xF1])
            perm = train_idx[rng.permutation(len(train_idx))]
            losses = []
            for b in range(0, len(perm), cfg.batch_size):
                idx = perm[b:b + cfg.batch_size]
                imgs = access.images("train", idx)
                x = augmenter.batch(imgs, rng) if cfg.augment else augmenter.plain_batch(imgs)
                if len(idx) == 1 and any(isinstance(m, nn.BatchNorm2d) for m in model.modules()):
                    x = torch.cat([x, x])
                    y = torch.cat([_labels_tensor(dataset, idx)] * 2)
                else:
                    y = _labels_tensor(dataset, idx)
                loss = focal_loss(model(x), y, **loss_kw)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            val_loss = float(focal_loss(predict_logits(model, val_images, augmenter), y_val, **loss_kw))
            history["train_loss"].append(float(np.mean(losses)))
            history["val_loss"].append(val_loss)
            history["lr"].append(lr)
            epochs_run = epoch + 1
            if val_loss < stopper.best:
                best_state = copy.deepcopy(model.state_dict())
            if stopper.step(epoch + 1, val_loss):
                break
    test_reads_during_training = access.reads["test"]
    if best_state is not None:
        model.load_state_dict(best_state)
    with timer("evaluate"):
        test_images = access.images("test", test_idx)
        reports = evaluate(model, test_images, dataset.labels[test_idx], dataset, augmenter, cfg.multilabel_threshold)
    record = RunRecord(run_id or f"ft-{uuid.uuid4().hex[:8]}", method, "finetune", cfg.seed,
                       config={"finetune": cfg.to_dict(), "augment": augment_cfg.to_dict(),
                               "source_checkpoint": source, "source_meta": {k: v for k, v in meta.items() if k != "spec"},
                               "arm": model.spec.to_dict()})
    record.loss_curve = history["val_loss"]
    record.metrics = {k: v.to_dict() for k, v in reports.items()}
    record.wall_clock_seconds = dict(timer.seconds)
    record.counters = {"augmentation_applications": augmenter.counter.applications}
    record.extra = {"epochs_run": epochs_run, "best_epoch": stopper.best_epoch, "best_val_loss": stopper.best,
                    "train_subset_size": int(len(train_idx)), "train_samples_read": access.reads["train"],
                    "test_reads_during_training": test_reads_during_training,
                    "class_weights": [float(w) for w in weights], "train_loss": history["train_loss"]}
    if out_dir is not None:
        record.checkpoints["finetuned"] = str(save_checkpoint(model, Path(out_dir) / "finetuned.pt", epoch=epochs_run))
        record.save(Path(out_dir) / "finetune_record.json")
    return FinetuneResult(model, reports, record, history)
