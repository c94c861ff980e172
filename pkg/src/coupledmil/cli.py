"""Command-line entry point.

    coupledmil generate --config run.ini --out data/
    coupledmil train    --config run.ini --out runs/a
    coupledmil evaluate --out runs/a
    coupledmil ablate   --mode iterations --config run.ini --out runs/abl
    coupledmil plot     --out runs/a

Every command starts from the desk preset, overlays ``--config`` (INI) and
then ``--seed``/``--out``.  Exit codes: 0 ok, 1 user or config error,
2 training diverged.
"""
from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from .aggregator import aggregate_attention, aggregate_pool, load_aggregator
from .bagdata import BagDataError, save_dataset, split_dataset
from .classifier import load_classifier
from .config import ConfigError, RunConfig, build_dataset, from_ini, preset
from .coupling import DivergenceError
from .embedder import embed_bag, load_embedder
from .evalkit import plot_projection, project_embeddings, write_projection_csv
from .trainer import evaluate, precompute_embeddings, read_metrics, read_state, run_icmil

log = logging.getLogger("coupledmil")


class UsageError(Exception):
    pass


def resolve_config(args) -> RunConfig:
    cfg = preset(args.preset)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = from_ini(path.read_text(), base=cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out = args.out
    return cfg


def _run_config(run_dir: Path) -> RunConfig:
    path = run_dir / "config.ini"
    if not path.is_file():
        raise UsageError(f"{run_dir} is not a run directory (no config.ini)")
    return from_ini(path.read_text())


def _summary(records) -> str:
    test = [r for r in records if r.split == "test"][-1]
    return f"AUC={test.auc:.4f} F1={test.f1:.4f} Acc={test.acc:.4f}"


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    if cfg.dataset.kind == "directory":
        raise UsageError("generate needs a synthetic dataset kind (gaussian or image)")
    dataset = build_dataset(cfg.dataset)
    try:
        root = save_dataset(dataset, cfg.out, force=args.force)
    except FileExistsError as exc:
        raise UsageError(str(exc)) from None
    print(f"wrote {len(dataset)} bags to {root}")
    return 0


def _train(cfg: RunConfig, run_dir: Path, force: bool, T=None):
    if force and run_dir.exists():
        shutil.rmtree(run_dir)
    return run_icmil(build_dataset(cfg.dataset), cfg, T=T, run_dir=run_dir)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.iterations is not None:
        cfg.icmil.iterations = args.iterations
    state = _train(cfg, Path(cfg.out), args.force)
    print(_summary(state.history))
    return 0


def _latest(run_dir: Path):
    state = read_state(run_dir)
    if not state:
        raise UsageError(f"{run_dir} has no state.txt; train it first")
    missing = [k for k in ("embedder", "aggregator", "classifier")
               if not state.get(k) or not (run_dir / state[k]).is_file()]
    if missing:
        raise UsageError(f"{run_dir} is missing checkpoints: {', '.join(missing)}")
    return (load_embedder(run_dir / state["embedder"]), load_aggregator(run_dir / state["aggregator"]),
            load_classifier(run_dir / state["classifier"]))


def cmd_evaluate(args) -> int:
    run_dir = Path(args.run_dir or args.out or "")
    cfg = _run_config(run_dir)
    embedder, aggregator, classifier = _latest(run_dir)
    splits = split_dataset(build_dataset(cfg.dataset), cfg.dataset.split)
    records = []
    for name, ds in zip(("train", "val", "test"), splits):
        cache = precompute_embeddings(embedder, ds)
        records.append(evaluate(aggregator, classifier, cache, {b.id: b.label for b in ds}, name,
                                stage="evaluate"))
    with open(run_dir / "evaluation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "auc", "f1", "acc", "n_bags"])
        for r in records:
            writer.writerow([r.split, f"{r.auc:.6f}", f"{r.f1:.6f}", f"{r.acc:.6f}", r.n_bags])
    print(_summary(records))
    return 0


def _write_table(path: Path, key: str, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([key, "auc", "f1", "acc"])
        for label, rec in rows:
            writer.writerow([label, f"{rec.auc:.6f}", f"{rec.f1:.6f}", f"{rec.acc:.6f}"])


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "iterations":
        # one T=2 run evaluated every half iteration covers the whole sweep
        cfg.icmil.half_iteration_eval = True
        cfg.icmil.coupling_mode = "teacher-student"
        state = _train(cfg, out / "iterations", args.force, T=2)
        tests = [r for r in state.history if r.split == "test"]
        rows = [(f"{r.iteration:g}", r) for r in tests]
        table = out / "ablation_iterations.csv"
        _write_table(table, "T", rows)
    else:
        rows = []
        for mode in ("naive", "teacher-student"):
            cfg.icmil.coupling_mode = mode
            cfg.icmil.half_iteration_eval = False
            state = _train(cfg, out / mode, args.force, T=1)
            rows.append((mode, [r for r in state.history if r.split == "test"][-1]))
        table = out / "ablation_naive_vs_ts.csv"
        _write_table(table, "variant", rows)
    for label, rec in rows:
        print(f"{label}: AUC={rec.auc:.4f} F1={rec.f1:.4f} Acc={rec.acc:.4f}")
    print(f"wrote {table}")
    return 0


def _projection(embedder, aggregator, bags):
    inst, inst_labels, inst_ids, bag_vecs = [], [], [], []
    with torch.no_grad():
        for bag in bags:
            h = embed_bag(embedder, bag)
            if aggregator.arch.kind == "attention":
                bag_vecs.append(aggregate_attention(aggregator, h).bag_embedding.numpy())
            else:
                bag_vecs.append(aggregate_pool(aggregator.arch.kind, h).numpy())
            inst.append(h.numpy())
            # without instance truth fall back to the bag label
            inst_labels += [bag.label if i.true_class is None else i.true_class for i in bag.instances]
            inst_ids += [bag.id] * len(bag)
    return project_embeddings(np.vstack(inst), np.vstack(bag_vecs), inst_labels, [b.label for b in bags],
                              instance_bag_ids=inst_ids, bag_ids=[b.id for b in bags])


def cmd_plot(args) -> int:
    run_dir = Path(args.run_dir or args.out or "")
    cfg = _run_config(run_dir)
    first = run_dir / "iter_0"
    missing = [str(first / f"{p}.ckpt") for p in ("embedder", "aggregator")
               if not (first / f"{p}.ckpt").is_file()]
    if missing:
        raise UsageError(f"missing iteration-0 checkpoints: {', '.join(missing)}")
    before_models = (load_embedder(first / "embedder.ckpt"), load_aggregator(first / "aggregator.ckpt"))
    final_emb, final_agg, _ = _latest(run_dir)
    test = split_dataset(build_dataset(cfg.dataset), cfg.dataset.split)[2].bags
    before = _projection(*before_models, test)
    after = _projection(final_emb, final_agg, test)
    write_projection_csv(before, run_dir / "projection_before.csv")
    write_projection_csv(after, run_dir / "projection_after.csv")

    curve = [r for r in read_metrics(run_dir / "metrics.csv") if r.split == "test"]
    with open(run_dir / "metrics_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "auc", "f1", "acc"])
        for r in curve:
            writer.writerow([f"{r.iteration:g}", f"{r.auc:.6f}", f"{r.f1:.6f}", f"{r.acc:.6f}"])

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib unavailable; wrote CSV files only", file=sys.stderr)
        return 0
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.5))
    plot_projection(before, axes[0], "before coupling (T=0)")
    plot_projection(after, axes[1], "after coupling")
    fig.tight_layout()
    fig.savefig(run_dir / "projection.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    its = [r.iteration for r in curve]
    for metric in ("auc", "f1", "acc"):
        ax.plot(its, [getattr(r, metric) for r in curve], marker="o", label=metric)
    ax.set_xlabel("iteration")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(run_dir / "metrics_curve.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    print(f"wrote plots to {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file overlaid on the preset")
    common.add_argument("--preset", default="desk", choices=("desk", "paper"))
    common.add_argument("--seed", type=int, help="set every component seed")
    common.add_argument("--out", help="output directory (dataset, run or ablation root)")
    common.add_argument("--force", action="store_true", help="overwrite existing output")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coupledmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a synthetic dataset to disk")
    train = sub.add_parser("train", parents=[common], help="run the alternating pipeline")
    train.add_argument("--iterations", type=float, help="override icmil.iterations (T)")
    for name, text in (("evaluate", "re-evaluate the latest checkpoints of a run"),
                       ("plot", "projection and metric-curve plots for a run")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("run_dir", nargs="?", help="run directory (defaults to --out)")
    ablate = sub.add_parser("ablate", parents=[common], help="iteration or coupling-mode ablation")
    ablate.add_argument("--mode", choices=("iterations", "naive-vs-ts"), default="iterations")
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, BagDataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
