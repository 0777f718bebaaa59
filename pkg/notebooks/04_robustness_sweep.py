"""
How much does the pretraining batch size matter?
================================================

A sweep reruns the whole pipeline per value. The robustness statistic is the
variance of the test metric across values, averaged over the two arms.
Lower means less sensitive.
"""
# %%
from cass.analysis import robustness_variance
from cass.experiments import config_from_dict, report, sweep

cfg = config_from_dict({
    "name": "batch_sweep",
    "dataset": {"n": 120, "classes": 3},
    "pretrain": {"epochs": 4},
    "finetune": {"max_epochs": 5, "patience": 2},
    "seeds": [0, 1],
    "sweep": {"axis": "batch_size", "values": [8, 16, 32]},
    "output_dir": "results/batch_sweep",
})
rep = sweep(cfg)
for arm, cells in rep["grid"]["cass"].items():
    print(arm, {k: round(v, 3) for k, v in cells.items()})
print("mean variance:", rep["robustness_variance"])

# %%
# The statistic itself, on a hand-made grid.

print(robustness_variance({"m": {"cnn": {50: 0.80, 100: 0.90}, "vit": {50: 0.85, 100: 0.85}}}))

# %%
out = report("results/batch_sweep", "results/batch_sweep/report")
print(out["summary"], out["plots"])
