# %% [markdown]
# # Time and memory per epoch
#
# Peak traced allocation grows with the hidden size; parameter counts are
# fixed by the configuration alone.

# %%
from ismrnn.config import synthetic_series
from ismrnn.data import prepare
from ismrnn.experiments import profile
from ismrnn.model import IsmrnnModel, ModelConfig

data = prepare(synthetic_series(2000, channels=7, seed=0), "synthetic", min_points=192)
train = data.windowed("train", 96, 96)
for d in (32, 128, 512):
    cfg = ModelConfig(lookback=96, horizon=96, channels=7, seg_len=24, d_model=d)
    p = profile(IsmrnnModel(cfg, seed=0), train, batch_size=8, max_batches=5)
    print(f"d={d:4d}: {p.n_parameters:8d} params, {p.epoch_seconds / p.batches * 1e3:7.1f} ms/batch, "
          f"peak {p.peak_memory_bytes / 2**20:7.1f} MiB")
