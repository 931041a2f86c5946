"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
divergence, 4 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, GridSettings, apply_text, copy_config, load_config, set_value, to_text
from .errors import ConfigError, DivergenceError, GenerationError
from .fusion import FusionStrategy
from .model import MultiViewModel
from .train import (
    RESULT_COLUMNS,
    SUMMARY_COLUMNS,
    Cell,
    config_hash,
    export_attention,
    format_table,
    result_row,
    run_matrix,
    scaled_config,
    train,
    write_csv,
    write_history,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--config", default=argparse.SUPPRESS, help="key-value config file")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS, metavar="KEY=VALUE",
                   help="override one config key, e.g. model.depth=4")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="rtfvit", parents=[common],
                                     description="Multi-view ViT with random token fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic two-view dataset")
    g.add_argument("--kind", choices=D.KINDS)
    g.add_argument("--n", type=int, help="total samples, split 4:1:2 into train/val/test")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--noise", type=float)
    g.add_argument("--image-size", type=int)

    t = sub.add_parser("train", parents=[common], help="train one model")
    _run_flags(t)

    a = sub.add_parser("ablate", parents=[common], help="train a grid of configurations")
    a.add_argument("--grid", help="grid file (grid.* keys plus any base config keys)")
    a.add_argument("--data", help="dataset directory with manifest.tsv")
    a.add_argument("--workers", type=int)
    a.add_argument("--epochs", type=int)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")

    at = sub.add_parser("attention", parents=[common], help="export attention maps and balance")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--data", help="dataset directory; default: task from the config")
    at.add_argument("--n", type=int, default=4, help="number of samples (first by id)")
    at.add_argument("--split", default="test", choices=D.SPLITS)
    return parser


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rtf", choices=("on", "off"))
    p.add_argument("--split", type=float, help="fraction of blocks in the local encoder")
    p.add_argument("--strategy", choices=[s.value for s in FusionStrategy])
    p.add_argument("--epochs", type=int)
    p.add_argument("--data", help="dataset directory with manifest.tsv")
    p.add_argument("--view", choices=("both", "view1", "view2"))


def _base_config(args, *overlays) -> ExperimentConfig:
    """Defaults, then ``--config``, then each overlay file, then ``--set`` pairs."""
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for path in overlays:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        apply_text(cfg, Path(path).read_text())
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        set_value(cfg, key.strip(), value.strip())
    return cfg


def _out_dir(args, default: str) -> Path:
    out = Path(getattr(args, "out", None) or default)
    if not D.is_writable_dir(out):
        raise UsageError(f"output directory {out} is not writable")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from None
    return out


def write_manifest(out: Path) -> None:
    """List every file under ``out`` with its size and sha256."""
    lines = []
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.txt"):
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        lines.append(f"{path.relative_to(out).as_posix()}\t{path.stat().st_size}\t{digest}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _dataset(cfg: ExperimentConfig) -> D.Dataset:
    if cfg.data.path:
        return D.load_dataset(cfg.data.path)
    return D.generate(cfg.task)


# commands ----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    spec = cfg.task
    if args.kind:
        spec.kind = args.kind
    if args.n is not None:
        spec.n_train, spec.n_val, spec.n_test = D.split_sizes(args.n)
    for name in ("n_train", "n_val", "n_test", "alpha", "noise", "image_size"):
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    if hasattr(args, "seed"):
        spec.seed = args.seed
    out = _out_dir(args, "data")
    dataset = D.generate(spec)
    D.export_dataset(dataset, out)
    write_manifest(out)
    print(f"train={len(dataset.train)} val={len(dataset.val)} test={len(dataset.test)} -> {out}")
    return EXIT_OK


def _apply_run_flags(cfg: ExperimentConfig, args) -> None:
    if getattr(args, "rtf", None):
        cfg.fusion.rtf = args.rtf == "on"
    if getattr(args, "split", None) is not None:
        cfg.model.local_fraction = args.split
    if getattr(args, "strategy", None):
        cfg.fusion.strategy = args.strategy
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
    if getattr(args, "data", None):
        cfg.data.path = args.data
    if getattr(args, "view", None):
        cfg.run.input_view = args.view
    if hasattr(args, "seed"):
        cfg.train.seed = args.seed


def cmd_train(args) -> int:
    cfg = _base_config(args)
    _apply_run_flags(cfg, args)
    cfg.model = scaled_config(cfg.model, cfg.run.scale, cfg.model.local_fraction)
    cfg.validate()
    out = _out_dir(args, "runs/train")
    dataset = _dataset(cfg)
    (out / "config.txt").write_text(to_text(cfg))
    model = MultiViewModel(cfg.model, cfg.fusion.strategy, cfg.fusion.rtf, seed=cfg.train.seed,
                           input_view=cfg.run.input_view)
    verbose = getattr(args, "verbose", False)
    progress = (lambda e, l, a: print(f"epoch {e:3d} loss {l:.4f} val_auc {a:.4f}")) if verbose else None
    try:
        record = train(model, dataset, cfg.train, progress=progress)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    cell = Cell(FusionStrategy.parse(cfg.fusion.strategy).value, cfg.fusion.rtf,
                cfg.model.local_fraction, cfg.run.scale)
    record.config_hash = config_hash(cfg.model, cfg.train, cell.key)
    save_checkpoint(model, out / "checkpoint")
    write_history(out / "history.csv", record)
    write_csv(out / "results.csv", [result_row(cell, record)], RESULT_COLUMNS)
    write_manifest(out)
    print(f"test_auc={record.test_auc:.4f} best_epoch={record.best_epoch} config={record.config_hash}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _base_config(args, *([args.grid] if args.grid else []))
    if args.data:
        cfg.data.path = args.data
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    grid_cfg: GridSettings = cfg.grid
    seeds = list(grid_cfg.seeds)
    if not seeds:
        base = getattr(args, "seed", cfg.train.seed)
        seeds = [base + i for i in range(4)]
    workers = args.workers or cfg.run.workers
    cfg.validate()
    out = _out_dir(args, "runs/ablate")
    dataset = _dataset(cfg)
    archived = copy_config(cfg)
    archived.grid.seeds = tuple(seeds)
    (out / "config.txt").write_text(to_text(archived, sections=("model", "train", "task", "data", "grid")))
    result = run_matrix(grid_cfg.to_grid(), seeds, cfg.model, cfg.train, dataset, workers=workers)
    write_csv(out / "results.csv", result.rows, RESULT_COLUMNS)
    write_csv(out / "summary.csv", result.summary, SUMMARY_COLUMNS)
    (out / "table.txt").write_text(format_table(result.summary) + "\n")
    write_manifest(out)
    print(format_table(result.summary))
    for key, error in result.failed:
        print(f"failed cell {key}: {error}", file=sys.stderr)
    ok = sum(1 for r in result.summary if r["status"] == "ok")
    return EXIT_OK if ok else EXIT_DIVERGED


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    start = time.perf_counter()
    results = gradcheck.run_suite()
    width = max(len(r.name) for r in results)
    for r in results:
        flag = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  n={r.checked:<5d} {flag}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_attention(args) -> int:
    cfg = _base_config(args)
    model = load_checkpoint(args.checkpoint)
    if model.strategy is not FusionStrategy.CONCAT or model.input_view != "both":
        print("attention balance needs a two-view Concat checkpoint; token provenance "
              f"is undefined for {model.strategy.value}", file=sys.stderr)
        return EXIT_USAGE
    if args.data:
        cfg.data.path = args.data
    dataset = _dataset(cfg)
    samples = sorted(dataset.split(args.split), key=lambda s: s.id)[: args.n]
    out = _out_dir(args, "runs/attention")
    rows = export_attention(model, samples, out)
    gap = np.mean([abs(float(r["mass1"]) - 0.5) for r in rows]) if rows else float("nan")
    write_manifest(out)
    print(f"{len(rows)} samples, mean |mass1-0.5| = {gap:.4f} -> {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "attention": cmd_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, GenerationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
