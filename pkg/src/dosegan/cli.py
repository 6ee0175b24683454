"""Command-line entry point: ``dosegan <command> ...``.

Exit codes: 0 success, 1 gradient check failure, 2 configuration error,
3 I/O error, 4 numerical abort, 5 checkpoint/data incompatibility.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, config as config_mod, gradsuite, metrics, slices
from .checkpoint import CheckpointError, CheckpointMismatchError
from .dosesim import DRF_LEVELS, DatasetError, generate_dataset, read_dataset, write_dataset
from .losses import NonFiniteLossError
from .nets import ConfigError
from .tensor import NonFiniteError
from .trainer import VARIANT_LABELS, VARIANTS, EpochLog, TrainState, fit, predictor, run_ablation, variant_config

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5

ABLATION_DRF = 100


class CompatibilityError(Exception):
    pass


def _load_config(args) -> config_mod.RunConfig:
    return config_mod.load(getattr(args, "config", None), getattr(args, "set", None) or [])


def _read_data(path: str):
    try:
        return read_dataset(path)
    except (DatasetError, json.JSONDecodeError) as exc:
        raise OSError(f"{path}: {exc}") from exc


def _check_extent(state: TrainState, dataset) -> None:
    if state.net_config.volume_extent != dataset.manifest.extent:
        raise CompatibilityError(
            f"checkpoint extent {state.net_config.volume_extent} does not match dataset extent "
            f"{dataset.manifest.extent}")


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    seed = cfg.data.seed if args.seed is None else args.seed
    ds = generate_dataset(cfg.phantom, seed, cfg.data.split_plan, cfg.data.kappa)
    out = write_dataset(ds, args.out_dir)
    n_s = sum(1 for e in ds.manifest.entries if e.kind == "s")
    n_l = len(ds.manifest.entries) - n_s
    per_split = ", ".join(f"{s}={len(ds.volume_ids(s))}" for s in ("train", "val", "test"))
    print(f"wrote {n_s} standard-dose volumes and {n_l} low-dose volumes ({n_l} pairs) to {out}")
    print(f"volumes per split: {per_split}; seed {seed}; norm_max {ds.manifest.norm_max:.6g}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = _read_data(args.data)
    out = Path(args.out)
    if args.resume:
        state = checkpoint.load_checkpoint(args.resume)
        _check_extent(state, dataset)
        if state.finished:
            print(f"notice: run in {args.resume} already finished at epoch {state.epoch}; nothing to do")
            return EXIT_OK
    else:
        cfg = _load_config(args)
        train_cfg = cfg.train if args.variant is None else variant_config(cfg.train, args.variant)
        if cfg.net.volume_extent != dataset.manifest.extent:
            raise CompatibilityError(
                f"net.volume_extent {cfg.net.volume_extent} does not match dataset extent {dataset.manifest.extent}")
        state = TrainState.fresh(cfg.net, train_cfg)
    out.mkdir(exist_ok=True)
    log_path = out / "epochs.jsonl"
    if not args.resume:
        log_path.write_text("")
        (out / "config.json").write_text(
            json.dumps({"net": state.net_config.to_dict(), "train": state.train_config.to_dict()},
                       indent=1, sort_keys=True) + "\n")

    def on_epoch(entry: EpochLog, st: TrainState) -> None:
        line = entry.to_json()
        with log_path.open("a") as fh:
            fh.write(line + "\n")
        print(line, flush=True)
        checkpoint.save_checkpoint(st, out / f"epoch_{entry.epoch:03d}.ckpt")
        checkpoint.save_checkpoint(st, out / "last.ckpt")

    fit(dataset, state=state, on_epoch=on_epoch)
    print(f"training finished at epoch {state.epoch}; checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def _write_slices(directory: Path, dataset, state: TrainState | None, drfs) -> None:
    directory.mkdir(exist_ok=True)
    vmax = dataset.manifest.norm_max
    pairs = dataset.pairs("test")
    for d in drfs:
        sel = [p for p in pairs if p.drf_value == d]
        if not sel:
            continue
        p = sel[0]
        images = {"lpet": p.x, "gt": p.y_s}
        if state is not None:
            images["coarse"] = predictor(state, vmax, "coarse")([p])[0]
            images["refined"] = predictor(state, vmax, "final")([p])[0]
        for kind, vol in images.items():
            slices.write_pgm(directory / f"vol{p.volume_id:04d}_drf{d}_{kind}.pgm",
                             slices.to_grey(slices.mid_axial(vol), vmax))


def cmd_eval(args) -> int:
    dataset = _read_data(args.data)
    state = None
    preds = {}
    if args.ckpt.lower() != "none":
        state = checkpoint.load_checkpoint(args.ckpt)
        _check_extent(state, dataset)
        preds[VARIANT_LABELS[state.train_config.variant]] = predictor(state, dataset.manifest.norm_max)
    drfs = tuple(args.drf) if args.drf else None
    if args.split not in ("train", "val", "test"):
        raise ConfigError(f"unknown split {args.split!r}")
    report = metrics.evaluate(dataset, preds, split=args.split, drfs=drfs)
    sys.stdout.write(report.to_text())
    if args.report:
        Path(args.report).write_text(report.to_json())
    if args.slices:
        _write_slices(Path(args.slices), dataset, state, drfs or DRF_LEVELS)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else None
    if args.op and args.op not in gradsuite.CHECKS:
        raise ConfigError(f"unknown op {args.op!r}; available: {', '.join(gradsuite.CHECKS)}")
    results = gradsuite.run_suite(names)
    sys.stdout.write(gradsuite.format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    dataset = _read_data(args.data)
    if cfg.net.volume_extent != dataset.manifest.extent:
        raise CompatibilityError("net.volume_extent does not match the dataset extent")
    out = Path(args.out)
    out.mkdir(exist_ok=True)
    print(f"ablation at DRF {ABLATION_DRF}: variants {', '.join(VARIANTS)}; train seed {cfg.train.seed} for every variant; "
          f"data seed {dataset.manifest.entries[0].seed}")

    def on_epoch(variant: str, entry: EpochLog) -> None:
        with (out / f"{variant}_epochs.jsonl").open("a") as fh:
            fh.write(entry.to_json() + "\n")

    for v in VARIANTS:
        (out / f"{v}_epochs.jsonl").write_text("")
    results = run_ablation(dataset, cfg.net, cfg.train, on_epoch=on_epoch)
    rows: dict[str, metrics.MetricsRow | None] = {}
    for res in results:
        label = VARIANT_LABELS[res.variant]
        if res.state is None:
            rows[label] = None
            print(f"variant {res.variant} aborted: {res.error}")
            continue
        checkpoint.save_checkpoint(res.state, out / f"{res.variant}.ckpt")
        report = metrics.evaluate(dataset, {label: predictor(res.state, dataset.manifest.norm_max)})
        (out / f"{res.variant}_report.json").write_text(report.to_json())
        rows[label] = report.row(label, ABLATION_DRF)
    table = metrics.ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_NUMERIC if any(r is None for r in rows.values()) else EXIT_OK


# ----------------------------------------------------------------------------
# parser


def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (defaults apply when omitted)")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dosegan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    _add_config(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model, writing checkpoints and epoch logs")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--resume", metavar="CKPT")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint (or the raw low-dose input) on a split")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or 'none' for Low-Dose rows only")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--drf", type=int, action="append", choices=DRF_LEVELS)
    p.add_argument("--slices", metavar="DIR", help="write mid-axial PGM slices here")
    p.add_argument("--report", metavar="FILE", help="also write the report as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="64-bit finite-difference gradient checks")
    p.add_argument("--op", help=f"one of: {', '.join(gradsuite.CHECKS)}")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and evaluate the four model variants")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CompatibilityError, CheckpointMismatchError) as exc:
        print(f"incompatible: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (NonFiniteLossError, NonFiniteError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
