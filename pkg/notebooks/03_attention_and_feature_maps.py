"""
Looking inside the arms
=======================

Feature maps after the first convolution of the CNN arm, and class-token
attention of the Transformer arm, either from the last block or rolled out
through all blocks. The taps only observe: outputs are bitwise unchanged.
"""
# %%
import torch

from cass import ArmSpec, AugmentConfig, build_arm, forward
from cass.analysis import attention_map, average_maps, extract_feature_maps, save_feature_maps, save_map
from cass.augment import preprocess
from cass.data import synth_dataset

ds = synth_dataset(16, 2, 32, structure_seed=1)
aug = AugmentConfig.for_size(32)
images = [preprocess(im, aug) for im in ds.images]

cnn = build_arm(ArmSpec("cnn", "micro_cnn"), seed=0).eval()
vit = build_arm(ArmSpec("vit", "vit_tiny_p4"), seed=0).eval()

# %%
dumps = extract_feature_maps(cnn, images[0], ["conv1"], image_id="img0")
print("conv1 maps:", dumps[0].tensor.shape)
print("written:", [p.name for p in save_feature_maps(dumps, "results/maps")])

# %%
# Attention maps are min-max scaled to [0, 1]. Averaging over samples is
# done on the raw maps and rescaled once at the end.

x = torch.stack(images[:4])
assert torch.equal(forward(vit, x, feature_layers=("blocks.0",)).logits, vit(x))
for agg in ("last_layer_cls", "rollout"):
    avg = average_maps([attention_map(vit, im, agg) for im in images], agg)
    save_map(avg.map, f"results/maps/attention_{agg}")
    print(agg, "averaged over", avg.n_samples, "images; range", avg.map.min(), avg.map.max())
