# %% [markdown]
# # One forward pass, stage by stage
#
# Normalize, mix channels with the selective state-space block, segment each
# channel implicitly, encode with a GRU, add the residual, then decode every
# output segment in parallel.

# %%
import numpy as np

from ismrnn.model import IsmrnnModel, ModelConfig, parameter_shapes

cfg = ModelConfig(lookback=96, horizon=96, channels=7, seg_len=24, d_model=32, d_state=4)
model = IsmrnnModel(cfg, seed=0)
for name, shape in parameter_shapes(cfg).items():
    print(f"{name:18s} {shape}")
print("total parameters:", model.num_parameters())

# %%
x = np.random.default_rng(1).standard_normal((4, 96, 7))
y = model.predict(x)
print("prediction:", y.shape)

# %% Switching off both additions leaves the plain segment-RNN baseline.
for tag in ("M&LR", "LR", "M", "none"):
    m = IsmrnnModel(cfg.with_variant(tag), seed=0)
    print(f"{tag:5s} {m.num_parameters():6d} parameters")
