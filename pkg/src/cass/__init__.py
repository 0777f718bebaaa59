"""Cross-architecture siamese self-supervision (CNN arm + Transformer arm).

Desk-scale toolkit: pretraining, a DINO-style baseline for cost comparisons,
fine-tuning with focal loss, metrics, analysis taps and experiment runners.
"""
from cass.loss import HeadVariant, apply_head, cass_loss, normalize_embedding
from cass.arms import ArmSpec, ArmPair, ModelOutput, build_arm, forward, pair_arms
from cass.augment import AugmentConfig, AugmentCounter, Augmenter
from cass.pretrain import PretrainConfig, cosine_lr, pretrain, pretrain_step, swa_update
from cass.dino import DinoConfig, dino_pretrain, dino_step, ema_update
from cass.finetune import FinetuneConfig, class_weights, finetune, focal_loss, subset_labels
from cass.data import LabeledImageDataset, load_image_folder, split, synth_dataset
from cass.metrics import MetricReport, balanced_accuracy, ci95, f1_macro

__version__ = "0.1.0"

__all__ = [
    "HeadVariant", "apply_head", "cass_loss", "normalize_embedding",
    "ArmSpec", "ArmPair", "ModelOutput", "build_arm", "forward", "pair_arms",
    "AugmentConfig", "AugmentCounter", "Augmenter",
    "PretrainConfig", "cosine_lr", "pretrain", "pretrain_step", "swa_update",
    "DinoConfig", "dino_pretrain", "dino_step", "ema_update",
    "FinetuneConfig", "class_weights", "finetune", "focal_loss", "subset_labels",
    "LabeledImageDataset", "load_image_folder", "split", "synth_dataset",
    "MetricReport", "balanced_accuracy", "ci95", "f1_macro",
]
