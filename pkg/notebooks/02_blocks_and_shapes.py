# %% [markdown]
# # One LGD block, and the shape of a full network
#
# A block keeps two things in step: a local feature map x and a global
# vector g. The local map gets a residual computed from g, broadcast to every
# location, and g is refreshed from the pooled new map plus its old value.

# %%
import numpy as np

from lgd import backbone as bb
from lgd import block as blk
from lgd.block import BlockConfig, LocalGlobalPair
from lgd.seeding import stream

cfg = BlockConfig("res2a", 16, 16, 4)
params, buffers = blk.init_block_params(cfg, lambda name: stream(0, name))
rng = np.random.default_rng(0)
pair = LocalGlobalPair(rng.standard_normal((2, 16, 4, 8, 8)), rng.standard_normal((2, 16)))
out = blk.block_forward(pair, params, cfg, buffers)
print("local", out.x.shape, "global", out.g.shape)

# %% [markdown]
# The three projections between the paths are low rank, so a block with C
# channels adds 3C^2/8 weights rather than 3C^2.

# %%
for c in (64, 256, 1024):
    print(f"C={c:5d}: {blk.count_extra_params(c):8d} extra weights, full rank would be {3 * c * c}")

# %% [markdown]
# The ResNet-50 preset for 16-frame clips at 112x112. Temporal pooling after
# the stem and after the first stage brings 16 frames down to 4.

# %%
for layer, op, shape in bb.shape_schedule(bb.resnet50_3d()):
    print(f"{layer:<6} {op:<48} {'x'.join(map(str, shape))}")

# %% [markdown]
# With every projection set to zero the network computes exactly what the
# same backbone without a global path computes.

# %%
spec = bb.toy_3d(input_shape=(8, 16, 16), stem_channels=8, stages=((1, 16, 1), (1, 32, 2)))
net = bb.build(spec, seed=1)
for k in net.params:
    if k.rsplit(".", 2)[-2] in ("xg", "gx", "gg"):
        net.params[k] = np.zeros_like(net.params[k])
plain = bb.build(bb.toy_3d(kind="baseline3d", input_shape=(8, 16, 16), stem_channels=8,
                           stages=((1, 16, 1), (1, 32, 2))), seed=1)
clip = rng.standard_normal((1, 3, 8, 16, 16))
same = bb.forward(net, clip).x.data.tobytes() == bb.forward(plain, clip).x.data.tobytes()
print("bit-identical to the baseline:", same)
