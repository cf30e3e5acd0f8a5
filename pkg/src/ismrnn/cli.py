"""Command-line entry point: ``ismrnn <command> --config FILE [--set k=v ...] [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import experiments as ex
from .config import RunConfig, parse_config, synthetic_series, write_resolved
from .data import PreparedData, load_csv, prepare
from .errors import IsmrnnError
from .model import IsmrnnModel
from .train import load_checkpoint, save_checkpoint, write_history

log = logging.getLogger("ismrnn")

CHECKPOINT = "checkpoint.ckpt"


def load_data(cfg: RunConfig, max_lookback: int | None = None) -> PreparedData:
    L = max_lookback or cfg.lookback
    H = max(cfg.horizon, cfg.sweep_horizon) if max_lookback else cfg.horizon
    if cfg.dataset_path:
        raw = load_csv(cfg.dataset_path)
    elif cfg.dataset_id == "synthetic":
        raw = synthetic_series(cfg.synthetic_length, seed=cfg.seed)
    else:
        from .errors import ConfigError
        raise ConfigError("dataset_path: required unless dataset_id = synthetic")
    return prepare(raw, cfg.dataset_id, cfg.split, min_points=L + H)


def _out(cfg: RunConfig, args) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(cfg: RunConfig, out: Path, args) -> int:
    data = load_data(cfg)
    model_cfg = cfg.model_config(data.values.shape[1])
    model, result, report = ex.train_and_evaluate(data, model_cfg, cfg.train_config(), cfg.np_dtype,
                                                  cfg.dataset_id)
    val_mse, val_mae = ex.evaluate(model, data.windowed("val", cfg.lookback, cfg.horizon))
    save_checkpoint(model, out / CHECKPOINT, result.state)
    write_history(result.history, out / "history.csv")
    doc = asdict(report)
    doc["val_mae"] = val_mae
    doc["val_mse"] = val_mse
    doc.pop("epoch_seconds")          # wall time would break byte-for-byte reproducibility
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"test MSE {report.mse:.6f} MAE {report.mae:.6f} (val MSE {val_mse:.6f})")
    return 0


def cmd_eval(cfg: RunConfig, out: Path, args) -> int:
    ckpt = Path(args.checkpoint or out / CHECKPOINT)
    model, _ = load_checkpoint(ckpt)
    data = load_data(cfg)
    mse, mae = ex.evaluate(model, data.windowed(args.split, model.cfg.lookback, model.cfg.horizon))
    doc = {"split": args.split, "mse": mse, "mae": mae, "checkpoint": str(ckpt)}
    (out / f"eval_{args.split}.json").write_text(json.dumps(doc, indent=2))
    print(f"{args.split} MSE {mse!r} MAE {mae!r}")
    return 0


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    data = load_data(cfg)
    reports = ex.run_ablation(data, cfg.model_config(data.values.shape[1]), cfg.train_config(),
                              cfg.np_dtype, cfg.dataset_id, workers=cfg.workers)
    for r in reports:
        r.to_json(out / f"report_{_slug(r.variant)}.json")
    ex.write_aggregate(reports, out / "ablation.csv")
    for r in reports:
        print(f"{r.variant:5s} MSE {r.mse:.4f} MAE {r.mae:.4f}")
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, args) -> int:
    data = load_data(cfg, max_lookback=max(cfg.lookbacks))
    base = cfg.model_config(data.values.shape[1])
    reports = ex.lookback_sweep(data, base, cfg.train_config(), cfg.lookbacks, cfg.sweep_horizon,
                                cfg.np_dtype, cfg.dataset_id)
    for r in reports:
        r.to_json(out / f"report_L{r.lookback}_{_slug(r.variant)}.json")
    ex.write_aggregate(reports, out / "sweep.csv")
    return 0


def cmd_profile(cfg: RunConfig, out: Path, args) -> int:
    data = load_data(cfg)
    model = IsmrnnModel(cfg.model_config(data.values.shape[1]), seed=cfg.seed, dtype=cfg.np_dtype)
    prof = ex.profile(model, data.windowed("train", cfg.lookback, cfg.horizon), cfg.profile_batch_size,
                      cfg.lr, cfg.seed, cfg.profile_max_batches)
    (out / "profile.json").write_text(json.dumps({**asdict(prof), "variant": model.cfg.variant,
                                                  "dataset": cfg.dataset_id}, indent=2))
    print(f"epoch {prof.epoch_seconds:.2f}s over {prof.batches} batches, "
          f"peak traced {prof.peak_memory_bytes / 2**20:.1f} MiB, {prof.n_parameters} parameters")
    return 0


def cmd_dump(cfg: RunConfig, out: Path, args) -> int:
    ckpt = Path(args.checkpoint or out / CHECKPOINT)
    model, _ = load_checkpoint(ckpt)
    data = load_data(cfg)
    windows = data.windowed(args.split, model.cfg.lookback, model.cfg.horizon)
    n = ex.dump_predictions(model, windows, cfg.dump_indices, out / "predictions.csv")
    print(f"wrote {n} windows to {out / 'predictions.csv'}")
    return 0


def _origin(exc: BaseException) -> str:
    """Name of the package module where ``exc`` was raised."""
    tb, name = exc.__traceback__, "cli"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("ismrnn."):
            name = mod.split(".", 1)[1]
        tb = tb.tb_next
    return name


def _slug(tag: str) -> str:
    return tag.replace("&", "_")


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "sweep": cmd_sweep,
            "profile": cmd_profile, "dump": cmd_dump}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ismrnn", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--checkpoint", help="checkpoint for eval/dump (default: OUT/checkpoint.ckpt)")
    parser.add_argument("--split", default="test", choices=("train", "val", "test"),
                        help="split scored by eval/dump")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = parse_config(args.config, args.overrides)
        out = _out(cfg, args)
        write_resolved(cfg, out)
        return COMMANDS[args.command](cfg, out, args)
    except IsmrnnError as exc:
        module = _origin(exc)
        print(f"ismrnn {args.command}: {module}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"ismrnn {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
