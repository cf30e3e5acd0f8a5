"""Flat ``key = value`` run configuration.

One setting per line; ``#`` starts a comment. Booleans are ``true``/``false``,
``none`` clears an optional value, lists are comma-separated. Precedence,
lowest first: built-in defaults, ``preset``, the file, ``--set`` overrides.

Example::

    preset = ETTh2
    dataset_path = data/ETTh2.csv
    horizon = 96
    d_model = 128
    epochs = 10
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import DATASETS
from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .train import TrainConfig

# Per-dataset settings: d_state, seg_len, use_conv, learning rate, dropout.
PRESET_SETTINGS = {
    "ETTh1": dict(d_state=2, seg_len=12, use_conv=False, lr=0.0003, dropout=0.1),
    "ETTh2": dict(d_state=4, seg_len=24, use_conv=False, lr=0.0015, dropout=0.3),
    "ETTm1": dict(d_state=4, seg_len=24, use_conv=False, lr=0.0010, dropout=0.1),
    "ETTm2": dict(d_state=4, seg_len=24, use_conv=False, lr=0.0010, dropout=0.1),
    "Weather": dict(d_state=4, seg_len=24, use_conv=True, lr=0.0007, dropout=0.1),
    "Electricity": dict(d_state=4, seg_len=24, use_conv=False, lr=0.0014, dropout=0.0),
}
# Batch sizes are not published; these are working defaults.
DEFAULT_BATCH = {"ETTh1": 256, "ETTh2": 256, "ETTm1": 256, "ETTm2": 256, "Weather": 64, "Electricity": 16}
HORIZONS = (96, 192, 336, 720)
PRESET_D_STATE = (2, 4)
PRESET_SEG_LEN = (12, 24)


@dataclass
class RunConfig:
    # data
    dataset_path: str | None = None
    dataset_id: str | None = None
    split: str = "auto"
    synthetic_length: int = 2000
    # model
    lookback: int = 96
    horizon: int | None = None
    seg_len: int = 24
    d_model: int = 512
    d_state: int = 4
    dropout: float = 0.0
    use_conv: bool = False
    variant: str = "M&LR"
    norm: str = "last"
    per_segment_compress: bool = False
    mamba_per_channel: bool = False
    scan_method: str = "sequential"
    # training
    epochs: int = 30
    lr: float = 0.001
    decay_start: int = 15
    decay_factor: float = 0.9
    batch_size: int = 256
    seed: int = 2024
    loss: str = "mse"
    patience: int | None = None
    clip_norm: float | None = 5.0
    max_steps: int | None = None
    dtype: str = "float32"
    # experiments
    preset: str | None = None
    lookbacks: tuple = (48, 96, 192, 336)
    sweep_horizon: int = 336
    dump_indices: tuple = (0,)
    profile_batch_size: int = 8
    profile_max_batches: int | None = None
    workers: int = 1
    output_dir: str = "runs/default"

    # -- derived configs --
    def model_config(self, channels: int) -> ModelConfig:
        return ModelConfig(
            lookback=self.lookback, horizon=self.horizon, channels=channels, seg_len=self.seg_len,
            d_model=self.d_model, dropout=self.dropout, d_state=self.d_state, use_conv=self.use_conv,
            norm=self.norm, per_segment_compress=self.per_segment_compress,
            mamba_per_channel=self.mamba_per_channel, scan_method=self.scan_method,
        ).with_variant(self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, lr=self.lr, decay_start=min(self.decay_start, self.epochs),
                           decay_factor=self.decay_factor, batch_size=self.batch_size, seed=self.seed,
                           loss=self.loss, patience=self.patience, clip_norm=self.clip_norm,
                           max_steps=self.max_steps)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> "RunConfig":
        if self.horizon is None:
            raise ConfigError("horizon: required key is missing")
        checks = {
            "horizon": self.horizon >= 1, "lookback": self.lookback >= 1, "seg_len": self.seg_len >= 1,
            "d_model": self.d_model >= 2 and self.d_model % 2 == 0, "d_state": self.d_state >= 1,
            "dropout": 0.0 <= self.dropout < 1.0, "epochs": self.epochs >= 1, "lr": self.lr > 0,
            "decay_factor": 0 < self.decay_factor <= 1, "batch_size": self.batch_size >= 1,
            "workers": 1 <= self.workers <= 4, "profile_batch_size": self.profile_batch_size >= 1,
            "synthetic_length": self.synthetic_length >= 1,
        }
        for key, ok in checks.items():
            if not ok:
                raise ConfigError(f"{key}: invalid value {getattr(self, key)!r}")
        if self.lookback % self.seg_len:
            raise ConfigError(f"lookback: {self.lookback} is not divisible by seg_len {self.seg_len}")
        for key, allowed in {"variant": VARIANTS, "loss": ("mse", "mae"), "norm": ("last", "revin"),
                             "dtype": ("float32", "float64"),
                             "scan_method": ("sequential", "parallel"),
                             "split": ("auto", "ratio", "ett-hour", "ett-minute")}.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key}: {getattr(self, key)!r} not in {sorted(allowed)}")
        if self.preset is not None:
            if self.d_state not in PRESET_D_STATE:
                raise ConfigError(f"d_state: {self.d_state} outside preset domain {PRESET_D_STATE}")
            if self.seg_len not in PRESET_SEG_LEN:
                raise ConfigError(f"seg_len: {self.seg_len} outside preset domain {PRESET_SEG_LEN}")
        for L in self.lookbacks:
            if L % self.seg_len:
                raise ConfigError(f"lookbacks: {L} is not divisible by seg_len {self.seg_len}")
        return self

    def dump(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"


def preset_values(name: str) -> dict:
    if name not in PRESET_SETTINGS:
        raise ConfigError(f"preset: unknown dataset {name!r}; expected one of {sorted(PRESET_SETTINGS)}")
    return {**PRESET_SETTINGS[name], "dataset_id": name, "batch_size": DEFAULT_BATCH[name],
            "d_model": 512, "lookback": 96, "epochs": 30}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


_HINTS = typing.get_type_hints(RunConfig)


def _coerce(key: str, text: str):
    hint = _HINTS[key]
    text = text.strip()
    args = typing.get_args(hint)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if text.lower() == "none":
        if optional:
            return None
        raise ConfigError(f"{key}: value may not be none")
    try:
        if base is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        if base is tuple:
            return tuple(int(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(base, '__name__', base)}") from None


def parse_pairs(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{key}: unknown key ({source}:{lineno})")
        out[key] = _coerce(key, value)
    return out


def parse_config(path=None, overrides=(), validate: bool = True) -> RunConfig:
    """Resolve defaults, preset, file and ``key=value`` overrides into a RunConfig."""
    file_values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        file_values = parse_pairs(p.read_text().splitlines(), str(p))
    flag_values = parse_pairs(overrides, "--set")
    preset = flag_values.get("preset", file_values.get("preset"))
    values = {}
    if preset is not None:
        values.update(preset_values(preset))
    values.update(file_values)
    values.update(flag_values)
    cfg = RunConfig(**values)
    return cfg.validate() if validate else cfg


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(cfg.dump())
    return path


def all_presets() -> dict[tuple[str, int], RunConfig]:
    """Every dataset x horizon preset configuration (without a dataset path)."""
    return {(name, h): parse_config(overrides=[f"preset = {name}", f"horizon = {h}"])
            for name in PRESET_SETTINGS for h in HORIZONS}


def synthetic_series(length: int, channels: int = 3, seed: int = 0) -> np.ndarray:
    """Deterministic multi-period sine mixture with mild noise, for smoke runs."""
    from .rng import make_rng

    rng = make_rng(seed, "synthetic")
    t = np.arange(length, dtype=np.float64)
    cols = []
    for c in range(channels):
        p1, p2 = 24.0 * (1 + c % 2), 168.0 / (1 + c)
        cols.append(np.sin(2 * np.pi * t / p1 + c) + 0.5 * np.sin(2 * np.pi * t / p2)
                    + 0.1 * rng.standard_normal(length))
    return np.stack(cols, axis=1)


__all__ = ["RunConfig", "parse_config", "write_resolved", "PRESET_SETTINGS", "all_presets",
           "preset_values", "synthetic_series", "DATASETS"]
