# %% [markdown]
# # Two-stage training on synthetic videos
#
# Each video shows one shape kind, then a second kind, then the first again.
# The label is the unordered pair of kinds, so a single frame narrows six
# classes down to three and the network has to combine frames to do better.
# This notebook uses half the toy dataset and half the epochs so it finishes
# in a minute or two and stops well short of the full preset's accuracy;
# `lgd train` with no config runs the full toy preset.

# %%
import numpy as np

from lgd import backbone as bb
from lgd import synthdata as sd
from lgd import training as tr

data = sd.generate(sd.SyntheticVideoSpec(num_videos=180))
train_set, test_set = sd.split(data)
net = bb.build(bb.toy_2d(), seed=0)
print(len(train_set), "training videos,", len(test_set), "test videos,", data.num_classes, "classes")

# %% [markdown]
# Stage 1: one softmax head on the global vector, one on the pooled local map.

# %%
stage1 = tr.TrainConfig(stage=1, epochs=15, decay_every=10)
for rec in tr.train(net, train_set, stage1, seed=0, test_set=test_set):
    if rec.epoch >= 0:
        print(f"epoch {rec.epoch:2d} lr {rec.lr:.0e} loss {rec.loss:.3f} test top-1 {rec.test_top1:.2f}")

# %% [markdown]
# Stage 2 replaces both heads with one classifier on the sketched combination
# feature and tunes the whole network through it. The new head starts at
# zero, so the first loss is exactly ln 6.

# %%
stage2 = tr.TrainConfig(stage=2, epochs=5, base_lr=1e-4)
recs = tr.train(net, train_set, stage2, seed=0, test_set=test_set)
print(f"combination loss {recs[0].loss:.3f} -> {recs[-1].loss:.3f} (ln 6 = {np.log(6):.3f})")

# %% [markdown]
# Video-level prediction averages the softmax over ten snippet samples.

# %%
scores = tr.evaluate(net, test_set, n_samples=10)
print("test top-1 with 10 samples per video:", tr.top1(scores, test_set.labels))
