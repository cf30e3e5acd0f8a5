import os
from pathlib import Path

import numpy as np
import pytest

from ismrnn.model import IsmrnnModel, ModelConfig

ROOT = Path(__file__).resolve().parents[1]


def data_dir() -> Path:
    return Path(os.environ.get("ISMRNN_DATA_DIR", ROOT / "data"))


def dataset_path(name: str) -> Path:
    return data_dir() / f"{name}.csv"


@pytest.fixture
def tiny_cfg():
    # L=8, C=2, w=4 (n=2), d=6, H=4, d_state=2, every toggle on
    return ModelConfig(lookback=8, horizon=4, channels=2, seg_len=4, d_model=6, d_state=2,
                       use_mamba=True, use_implicit_residual=True, use_conv=True, dropout=0.0)


@pytest.fixture
def tiny_model(tiny_cfg):
    return IsmrnnModel(tiny_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_csv(path, n_rows, n_channels=2, start="2020-01-01", freq="h", seed=0):
    import pandas as pd

    r = np.random.default_rng(seed)
    t = np.arange(n_rows)
    frame = pd.DataFrame({"date": pd.date_range(start, periods=n_rows, freq=freq).strftime("%Y-%m-%d %H:%M:%S")})
    for c in range(n_channels):
        frame[f"c{c}"] = np.sin(2 * np.pi * t / (12 + 5 * c)) + 0.1 * r.standard_normal(n_rows)
    frame.to_csv(path, index=False)
    return path


# -- acceptance summary ------------------------------------------------------------------
ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
