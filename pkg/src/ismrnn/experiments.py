"""Test metrics, ablation runs, look-back sweeps, profiling and prediction dumps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import resource
import time
import tracemalloc
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PreparedData, WindowedDataset, batch_iter
from .errors import ConfigError, FormatError, ParameterError, ShapeError
from .model import VARIANTS, IsmrnnModel, ModelConfig, parameter_shapes
from .rng import make_rng
from .train import TrainConfig, evaluate_metrics, fit, loss_fn, adam_step, TrainState

log = logging.getLogger(__name__)

ABLATION_ORDER = ("M&LR", "LR", "M", "none")


@dataclass
class ExperimentReport:
    dataset: str
    horizon: int
    lookback: int
    variant: str
    use_conv: bool
    mse: float
    mae: float
    val_mse: float | None = None
    seed: int = 0
    config_hash: str = ""
    data_hash: str = ""
    n_parameters: int = 0
    parameters: list[str] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    peak_memory_bytes: int | None = None
    best_epoch: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant tag {self.variant!r} not in {sorted(VARIANTS)}")
        if not (np.isfinite(self.mse) and np.isfinite(self.mae)):
            raise ConfigError(f"non-finite metrics in report: mse={self.mse}, mae={self.mae}")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "ExperimentReport":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise FormatError(f"{path}: not a report ({exc})") from None


def config_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, data_hash: str = "", dtype: str = "") -> str:
    doc = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "data": data_hash, "dtype": dtype}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def evaluate(model: IsmrnnModel, data: WindowedDataset, batch_size: int = 1024) -> tuple[float, float]:
    """(MSE, MAE) over every window, step and channel, in eval mode."""
    if data.horizon != model.cfg.horizon or data.lookback != model.cfg.lookback:
        raise ShapeError(f"dataset windows (L={data.lookback}, H={data.horizon}) do not match model "
                         f"(L={model.cfg.lookback}, H={model.cfg.horizon})")
    return evaluate_metrics(model, data, batch_size)


def train_and_evaluate(prepared: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                       dtype=np.float32, dataset: str | None = None):
    """Train one configuration and score it on the test split.

    Returns ``(model, fit_result, report)``.
    """
    L, H = model_cfg.lookback, model_cfg.horizon
    train = prepared.windowed("train", L, H)
    val = prepared.windowed("val", L, H)
    test = prepared.windowed("test", L, H)
    model = IsmrnnModel(model_cfg, seed=train_cfg.seed, dtype=dtype)
    result = fit(model, train, val, train_cfg)
    mse, mae = evaluate(model, test, train_cfg.eval_batch_size)
    dhash = prepared.fingerprint()
    report = ExperimentReport(
        dataset=dataset or prepared.dataset_id or "unknown", horizon=H, lookback=L,
        variant=model_cfg.variant, use_conv=model_cfg.use_conv, mse=mse, mae=mae,
        val_mse=result.best_val, seed=train_cfg.seed,
        config_hash=config_hash(model_cfg, train_cfg, dhash, np.dtype(dtype).str), data_hash=dhash,
        n_parameters=model.num_parameters(), parameters=sorted(model.params),
        epoch_seconds=[r.seconds for r in result.history], best_epoch=result.state.best_epoch)
    log.info("%s %s H=%d: test MSE %.4f MAE %.4f", report.dataset, report.variant, H, mse, mae)
    return model, result, report


def _run_variant(args):
    prepared, cfg, train_cfg, dtype, dataset = args
    return train_and_evaluate(prepared, cfg, train_cfg, dtype, dataset)[2]


def run_ablation(prepared: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig, dtype=np.float32,
                 dataset: str | None = None, variants=ABLATION_ORDER, workers: int = 1) -> list[ExperimentReport]:
    """Train and score each variant under one seed, schedule and budget."""
    jobs = [(prepared, model_cfg.with_variant(v), train_cfg, dtype, dataset) for v in variants]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, 4, len(jobs))) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(j) for j in jobs]


def lookback_sweep(prepared: PreparedData, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   lookbacks=(48, 96, 192, 336), horizon: int = 336, dtype=np.float32,
                   dataset: str | None = None, variants=("M&LR", "none")) -> list[ExperimentReport]:
    """Paired reports (full model and plain baseline) for every look-back length."""
    for L in lookbacks:
        if L % model_cfg.seg_len:
            raise ConfigError(f"lookback {L} is not divisible by seg_len {model_cfg.seg_len}")
    reports = []
    for L in lookbacks:
        cfg = model_cfg.replace(lookback=L, horizon=horizon)
        for v in variants:
            reports.append(train_and_evaluate(prepared, cfg.with_variant(v), train_cfg, dtype, dataset)[2])
    return reports


@dataclass
class Profile:
    epoch_seconds: float
    peak_memory_bytes: int
    max_rss_bytes: int
    n_parameters: int
    batches: int


def profile(model: IsmrnnModel, data: WindowedDataset, batch_size: int = 8, lr: float = 1e-3,
            seed: int = 0, max_batches: int | None = None) -> Profile:
    """Wall time and peak traced allocation of one training epoch.

    Updates the model's weights (it is a real epoch). ``max_batches`` caps
    the epoch for quick measurements.
    """
    state = TrainState()
    params = model.params
    tracemalloc.start()
    tracemalloc.reset_peak()
    t0 = time.perf_counter()
    n = 0
    for b, (x, y) in enumerate(batch_iter(data, batch_size, shuffle=True, seed=seed, epoch=1)):
        model.zero_grad()
        with T.Tape():
            loss = loss_fn(model.forward(x, training=True, rng=make_rng(seed, "dropout", 1, b)),
                           y.astype(model.dtype))
            loss.backward()
        adam_step(params, state, lr)
        n += 1
        if max_batches is not None and n >= max_batches:
            break
    seconds = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    rss = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
    return Profile(seconds, int(peak), int(rss), model.num_parameters(), n)


# -- prediction dumps -------------------------------------------------------------------

DUMP_COLUMNS = ("window", "t", "channel", "y_true", "y_pred", "split")


def dump_predictions(model: IsmrnnModel, data: WindowedDataset, indices, path) -> int:
    """Write look-back and horizon values for selected windows as CSV.

    Look-back rows carry negative ``t`` and an empty ``y_pred``; horizon rows
    have ``t`` in ``0..H-1``. Values are standardized units, written with full
    round-trip precision. Returns the number of windows written.
    """
    idx = [int(i) for i in indices]
    for i in idx:
        if not 0 <= i < len(data):
            raise ParameterError(f"window index {i} out of range [0, {len(data)})")
    if not idx:
        raise ParameterError("no window indices given")
    preds = model.predict(data.inputs[idx]).astype(np.float64)
    L = data.lookback
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DUMP_COLUMNS)
        for k, i in enumerate(idx):
            for c in range(data.channels):
                for t in range(L):
                    w.writerow([i, t - L, c, repr(float(data.inputs[i, t, c])), "", data.split])
                for t in range(data.horizon):
                    w.writerow([i, t, c, repr(float(data.targets[i, t, c])), repr(float(preds[k, t, c])),
                                data.split])
    return len(idx)


def rescore_predictions(path) -> tuple[float, float, int]:
    """(MSE, MAE, window count) recomputed from a dump file's horizon rows."""
    sq = ab = 0.0
    count = 0
    windows = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != DUMP_COLUMNS:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            windows.add(row["window"])
            if row["y_pred"] == "":
                continue
            d = float(row["y_pred"]) - float(row["y_true"])
            sq += d * d
            ab += abs(d)
            count += 1
    if count == 0:
        raise FormatError(f"{path}: no prediction rows")
    return sq / count, ab / count, len(windows)


# -- report files -----------------------------------------------------------------------

AGGREGATE_COLUMNS = ("dataset", "horizon", "variant", "MSE", "MAE")


def write_aggregate(reports, path, extra_columns=("lookback", "use_conv", "seed")) -> None:
    cols = AGGREGATE_COLUMNS + tuple(extra_columns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            row = {"dataset": r.dataset, "horizon": r.horizon, "variant": r.variant,
                   "MSE": repr(r.mse), "MAE": repr(r.mae), "lookback": r.lookback,
                   "use_conv": r.use_conv, "seed": r.seed}
            w.writerow([row[c] for c in cols])


def mean_by_variant(reports) -> dict[str, tuple[float, float]]:
    out: dict[str, list] = {}
    for r in reports:
        out.setdefault(r.variant, []).append((r.mse, r.mae))
    return {k: tuple(np.mean(v, axis=0)) for k, v in out.items()}


def baseline_inventory(cfg: ModelConfig) -> list[str]:
    """Parameter names of the plain segment-RNN baseline for ``cfg``'s sizes."""
    return sorted(parameter_shapes(cfg.with_variant("none")))
