# %% [markdown]
# # From a CSV to training windows
#
# Splits follow the benchmark conventions, scaling statistics come from the
# training range only, and validation/test windows reach back one look-back
# length into the previous split.

# %%
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from ismrnn.data import load_csv, prepare

t = np.arange(3000)
frame = pd.DataFrame({"date": pd.date_range("2020-01-01", periods=len(t), freq="h").astype(str),
                      "load": np.sin(2 * np.pi * t / 24) + 0.001 * t,
                      "temp": np.cos(2 * np.pi * t / 168)})
path = Path(tempfile.mkdtemp()) / "toy.csv"
frame.to_csv(path, index=False)

raw = load_csv(path)
data = prepare(raw, convention="ratio", min_points=96 + 24)
print("split lengths:", data.ranges.lengths())
print("train mean after scaling:", data.values[slice(*data.ranges.train)].mean(axis=0).round(12))

# %%
test = data.windowed("test", 96, 24)
print("test windows:", len(test), "inputs", test.inputs.shape, "targets", test.targets.shape)
print("first test input starts at index", test.offsets[0], "which is", data.ranges.test[0] - 96)
