"""
Pretraining a CNN arm and a Transformer arm together
=====================================================

Both arms see the same augmented batch. The loss pulls their outputs
together, no labels involved. Afterwards each arm is fine-tuned on a small
labelled subset and compared with the same arm started from random weights.
"""
# %%
import numpy as np

from cass import ArmSpec, AugmentConfig, FinetuneConfig, PretrainConfig, finetune, pair_arms, pretrain
from cass.data import split, synth_dataset

ds = split(synth_dataset(200, 4, 32, structure_seed=0), seed=0)
print(len(ds), "images;", {s: len(ds.indices(s)) for s in ("train", "val", "test")})

# %%
# One augmentation per image per step, shared by both arms.

aug = AugmentConfig.for_size(32)
specs = ArmSpec("cnn", "micro_cnn"), ArmSpec("vit", "vit_tiny_p4")
res = pretrain(ds, pair_arms(*specs, seed=0), PretrainConfig(epochs=10, batch_size=16), aug)
print("loss per epoch:", np.round(res.record.loss_curve, 4))
print("counters:", res.record.counters)

# %%
# The arms hold stochastic-weight-averaged weights now. Fine-tune with 10%
# of the training labels. That is 14 images here, so expect noisy numbers;
# tests/test_acceptance.py runs the 5-seed version of this comparison.

for name, pretrained, fresh in zip(("cnn", "vit"), res.pair.models, pair_arms(*specs, seed=0).models):
    for tag, model in (("pretrained", pretrained), ("random init", fresh)):
        ft = finetune(model, ds, FinetuneConfig(label_fraction=0.1, max_epochs=20, seed=0), aug)
        print(f"{name:4s} {tag:11s} test F1 = {ft.test_metrics['f1_macro'].value:.3f}")
