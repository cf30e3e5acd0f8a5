# %% [markdown]
# # Ablating the two additions
#
# Four variants share one seed, one schedule and one data split: both
# additions, the residual only, the state-space block only, and neither.
# Short budgets like this one are noisy; compare several seeds before
# reading anything into the ordering.

# %%
import numpy as np

from ismrnn.config import synthetic_series
from ismrnn.data import prepare
from ismrnn.experiments import mean_by_variant, run_ablation
from ismrnn.model import ModelConfig
from ismrnn.train import TrainConfig

data = prepare(synthetic_series(3000, channels=3, seed=2), "synthetic", min_points=72)
cfg = ModelConfig(lookback=48, horizon=24, channels=3, seg_len=12, d_model=32, d_state=2)

reports = []
for seed in (0, 1):
    reports += run_ablation(data, cfg, TrainConfig(epochs=3, lr=2e-3, decay_start=3, batch_size=64, seed=seed),
                            np.float32, "synthetic")
for tag, (mse, mae) in sorted(mean_by_variant(reports).items(), key=lambda kv: kv[1][0]):
    print(f"{tag:5s} MSE {mse:.4f}  MAE {mae:.4f}")
