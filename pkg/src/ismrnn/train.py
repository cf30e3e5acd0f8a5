"""Losses, Adam, the step-decay schedule, the epoch loop and checkpoints."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import WindowedDataset, batch_iter
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .model import IsmrnnModel, ModelConfig
from .rng import make_rng

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    decay_start: int = 15
    decay_factor: float = 0.9
    batch_size: int = 256
    seed: int = 2024
    loss: str = "mse"
    patience: int | None = None
    clip_norm: float | None = 5.0
    max_steps: int | None = None
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if not 0 <= self.decay_start <= self.epochs:
            raise ConfigError(f"decay_start must lie in [0, epochs], got {self.decay_start}")
        if self.loss not in ("mse", "mae"):
            raise ConfigError(f"loss must be 'mse' or 'mae', got {self.loss!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")


def loss_fn(pred, target, kind: str = "mse") -> T.Tensor:
    """Mean squared or absolute error over every element."""
    pred = T.as_tensor(pred)
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss: prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    if kind == "mse":
        return T.mean(diff * diff)
    if kind == "mae":
        return T.mean(T.abs_(diff))
    raise ConfigError(f"unknown loss {kind!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant through ``decay_start``, then times ``decay_factor`` per epoch."""
    if epoch <= cfg.decay_start:
        return cfg.lr
    return cfg.lr * cfg.decay_factor ** (epoch - cfg.decay_start)


@dataclass
class TrainState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = 0


def adam_step(params: dict[str, T.Tensor], state: TrainState, lr: float) -> None:
    """In-place Adam update of ``params`` from their ``.grad``."""
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + EPS)


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            p.grad *= scale
    return total


def predict_dataset(model: IsmrnnModel, data: WindowedDataset, batch_size: int = 1024) -> np.ndarray:
    outs = [model.predict(x) for x, _ in batch_iter(data, batch_size)]
    return np.concatenate(outs, axis=0)


def evaluate_metrics(model: IsmrnnModel, data: WindowedDataset, batch_size: int = 1024):
    """(MSE, MAE) over all windows; sums accumulate in float64 and divide once."""
    sq = ab = 0.0
    count = 0
    for x, y in batch_iter(data, batch_size):
        diff = model.predict(x).astype(np.float64) - y
        sq += float(np.sum(diff * diff))
        ab += float(np.sum(np.abs(diff)))
        count += diff.size
    if count == 0:
        raise ShapeError("cannot evaluate on an empty dataset")
    return sq / count, ab / count


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float = 0.0


@dataclass
class FitResult:
    model: IsmrnnModel
    state: TrainState
    history: list[EpochRecord]

    @property
    def best_val(self) -> float:
        return self.state.best_val


def fit(model: IsmrnnModel, train: WindowedDataset, val: WindowedDataset | None, cfg: TrainConfig,
        callback=None) -> FitResult:
    """Train ``model`` in place and restore its best-validation weights.

    Without a validation set the last epoch's weights are kept.
    """
    import time

    if len(train) == 0:
        raise ConfigError("training set is empty")
    if val is not None and len(val) == 0:
        raise ConfigError("validation set is empty")
    state = TrainState()
    history: list[EpochRecord] = []
    best = model.state_dict()
    params = model.params
    plist = list(params.values())
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        lr = lr_at(epoch, cfg)
        t0 = time.perf_counter()
        total, seen = 0.0, 0
        for b, (x, y) in enumerate(batch_iter(train, cfg.batch_size, shuffle=True, seed=cfg.seed,
                                              epoch=epoch)):
            model.zero_grad()
            drop_rng = make_rng(cfg.seed, "dropout", epoch, b)
            with T.Tape():
                loss = loss_fn(model.forward(x, training=True, rng=drop_rng), y.astype(model.dtype), cfg.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
                loss.backward()
            if cfg.clip_norm:
                clip_grad_norm(plist, cfg.clip_norm)
            adam_step(params, state, lr)
            total += value * len(x)
            seen += len(x)
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
        train_loss = total / seen
        val_loss = evaluate_metrics(model, val, cfg.eval_batch_size)[0] if val is not None else train_loss
        rec = EpochRecord(epoch, train_loss, val_loss, lr, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d  train %.6f  val %.6f  lr %.3g  (%.1fs)", epoch, train_loss, val_loss, lr,
                 rec.seconds)
        if callback is not None:
            callback(rec)
        if val_loss < state.best_val or val is None:
            state.best_val = val_loss
            state.best_epoch = epoch
            best = model.state_dict()
            stale = 0
        else:
            stale += 1
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        if cfg.patience is not None and stale >= cfg.patience:
            log.info("early stop after %d epochs without improvement", stale)
            break
    model.load_state_dict(best)
    return FitResult(model, state, history)


def write_history(history: list[EpochRecord], path) -> None:
    """CSV with columns epoch, train_loss, val_loss, lr (floats in repr form)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


# -- checkpoint container -------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"ISMRNNCK"
#   4 bytes   format version (uint32)
#   8 bytes   header length in bytes (uint64)
#   header    UTF-8 JSON: {"model_config": {...}, "train_state": {...},
#                          "entries": [{"name", "shape", "dtype", "offset", "nbytes", "crc32"}]}
#   payload   concatenated row-major little-endian array bytes; offsets are
#             relative to the payload start

MAGIC = b"ISMRNNCK"
VERSION = 1


def save_checkpoint(model: IsmrnnModel, path, state: TrainState | None = None, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    meta_state = None
    if state is not None:
        arrays.update({f"adam.m/{k}": v for k, v in state.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in state.v.items()})
        meta_state = {"step": state.step, "epoch": state.epoch, "best_val": state.best_val,
                      "best_epoch": state.best_epoch}
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                        "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"model_config": model.cfg.to_dict(), "dtype": model.dtype.str,
                         "train_state": meta_state, "extra": extra or {}, "entries": entries},
                        sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(header)))
    buf.write(header)
    for c in chunks:
        buf.write(c)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into ``(header, arrays)``; raises FormatError on damage."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc.strerror})") from None
    fixed = len(MAGIC) + 12
    if len(blob) < fixed or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if fixed + hlen > len(blob):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[fixed:fixed + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    payload = memoryview(blob)[fixed + hlen:]
    arrays = {}
    for e in header.get("entries", []):
        name = e.get("name", "?")
        try:
            start, n = int(e["offset"]), int(e["nbytes"])
            dtype = np.dtype(e["dtype"])
            shape = tuple(e["shape"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{path}: malformed entry {name!r}") from None
        if start + n > len(payload):
            raise FormatError(f"{path}: entry {name!r} is truncated")
        raw = bytes(payload[start:start + n])
        if zlib.crc32(raw) != e.get("crc32"):
            raise FormatError(f"{path}: entry {name!r} fails its checksum")
        if n != math.prod(shape) * dtype.itemsize:
            raise FormatError(f"{path}: entry {name!r} size does not match shape {shape}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return header, arrays


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Rebuild a model (and Adam state, if stored) from ``path``.

    With ``expect`` set, parameter shapes are checked against that config and
    a mismatch raises :class:`ShapeError`.
    """
    header, arrays = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config ({exc})") from None
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    target = expect if expect is not None else cfg
    model = IsmrnnModel(target, params=params, dtype=np.dtype(header.get("dtype", "<f8")))
    state = None
    if header.get("train_state"):
        s = header["train_state"]
        state = TrainState(
            m={k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")},
            v={k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")},
            step=s["step"], epoch=s["epoch"], best_val=s["best_val"], best_epoch=s["best_epoch"])
    return model, state
