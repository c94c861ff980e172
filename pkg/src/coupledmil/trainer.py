"""Alternating training loop.

Stage one freezes the embedder, caches every bag's instance embeddings and
trains aggregator + classifier with bag-level cross-entropy, one bag per
step.  Stage two freezes the trained classifier and fine-tunes a copy of the
embedder through the teacher-student coupling (or, for the ablation, through
hard pseudo labels).  ``T`` iterations run ``T + 1`` stage ones interleaved
with ``T`` stage twos; a trailing half iteration spends half the coupling
budget before the last stage one.

Run directory layout::

    <run_dir>/config.ini                   resolved configuration
    <run_dir>/state.txt                    key=value progress manifest
    <run_dir>/metrics.csv                  stage,iteration,split,auc,f1,acc
    <run_dir>/iter_<n>/embedder.ckpt       embedder used by stage one n
    <run_dir>/iter_<n>/aggregator.ckpt     aggregator trained in stage one n
    <run_dir>/iter_<n>/classifier.ckpt
    <run_dir>/iter_<n>/coupling_log.csv    stage two that produced embedder n
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .aggregator import build_aggregator, load_aggregator, save_aggregator
from .bagdata import BagDataset, split_dataset
from .classifier import BagClassifier, build_classifier, load_classifier, save_classifier
from .config import RunConfig, StageOneConfig, to_ini
from .coupling import (
    CouplingConfig,
    DivergenceError,
    make_bundles,
    naive_finetune,
    naive_pseudo_labels,
    run_coupling,
)
from .embedder import InstanceEmbedder, build_embedder, clone_embedder, embed_bag, load_embedder, save_embedder
from .evalkit import MetricRecord, bag_metrics

log = logging.getLogger(__name__)

METRIC_COLUMNS = ["stage", "iteration", "split", "auc", "f1", "acc"]


class StaleCacheError(RuntimeError):
    """Embeddings were computed with different embedder parameters."""


def fingerprint(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


@dataclass
class EmbeddingCache:
    embeddings: dict  # bag id -> (K, D_hidden) tensor
    fingerprint: str

    def is_fresh(self, embedder: InstanceEmbedder) -> bool:
        return fingerprint(embedder) == self.fingerprint

    def check(self, embedder: InstanceEmbedder):
        if not self.is_fresh(embedder):
            raise StaleCacheError("embedding cache is stale: embedder parameters changed")

    def __getitem__(self, bag_id):
        return self.embeddings[bag_id]

    @property
    def hidden_dim(self) -> int:
        return next(iter(self.embeddings.values())).shape[1]


@torch.no_grad()
def precompute_embeddings(embedder: InstanceEmbedder, dataset: BagDataset) -> EmbeddingCache:
    if len(dataset) == 0:
        raise ValueError("cannot embed an empty dataset")
    embeddings = {bag.id: embed_bag(embedder, bag).detach() for bag in dataset.bags}
    return EmbeddingCache(embeddings, fingerprint(embedder))


def _forward(aggregator, classifier, h):
    return classifier(aggregator(h))


@torch.no_grad()
def predict_bags(aggregator, classifier, cache: EmbeddingCache, bag_ids) -> np.ndarray:
    """Positive-class probability per bag."""
    return np.array([_forward(aggregator, classifier, cache[b]).probs[1].item() for b in bag_ids])


@torch.no_grad()
def mean_bag_loss(aggregator, classifier, cache: EmbeddingCache, labels: dict) -> float:
    total = 0.0
    for bag_id, y in labels.items():
        logits = _forward(aggregator, classifier, cache[bag_id]).logits
        total += nn.functional.cross_entropy(logits[None], torch.tensor([y])).item()
    return total / len(labels)


def evaluate(aggregator, classifier, cache, labels: dict, split: str, iteration: float = 0.0,
             stage: str = "bag") -> MetricRecord:
    ids = list(labels)
    return bag_metrics(predict_bags(aggregator, classifier, cache, ids), [labels[b] for b in ids],
                       split, stage, iteration)


def train_bag_stage(
    cache: EmbeddingCache,
    labels: dict,
    aggregator_kind: str,
    config: StageOneConfig,
    warm_start: Optional[tuple] = None,
    val: Optional[tuple] = None,
    num_classes: int = 2,
) -> tuple:
    """Train aggregator + classifier on cached embeddings.

    ``labels`` maps bag id to label; ``val`` is an optional ``(cache, labels)``
    pair used to keep the epoch with the best validation AUC (ties broken by
    lower validation loss).  Returns ``(aggregator, classifier, history)``
    where ``history[0]`` is the loss before any update.
    """
    if warm_start is not None:
        aggregator, classifier = (copy.deepcopy(m) for m in warm_start)
    else:
        aggregator = build_aggregator(aggregator_kind, cache.hidden_dim, config.attn_dim, seed=config.seed)
        classifier = build_classifier((cache.hidden_dim, *config.head_widths, num_classes), seed=config.seed + 7919)
    params = list(aggregator.parameters()) + list(classifier.parameters())
    for p in params:
        p.requires_grad_(True)

    def val_score():
        if val is None:
            return None
        rec = evaluate(aggregator, classifier, val[0], val[1], "val")
        auc = -1.0 if np.isnan(rec.auc) else rec.auc
        return auc, -mean_bag_loss(aggregator, classifier, val[0], val[1])

    history = [{"epoch": 0, "loss": mean_bag_loss(aggregator, classifier, cache, labels), "val": val_score()}]
    if config.epochs == 0:
        return aggregator, classifier, history

    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    order_rng = np.random.default_rng(config.seed)
    ids = list(labels)
    targets = {b: torch.tensor([labels[b]]) for b in ids}
    best, best_state = None, None
    for epoch in range(1, config.epochs + 1):
        running = 0.0
        perm = order_rng.permutation(len(ids))
        for start in range(0, len(perm), config.batch_size_bags):
            batch = [ids[i] for i in perm[start: start + config.batch_size_bags]]
            loss = sum(
                nn.functional.cross_entropy(_forward(aggregator, classifier, cache[b]).logits[None], targets[b])
                for b in batch
            ) / len(batch)
            if not torch.isfinite(loss):
                raise DivergenceError(f"diverged: stage one loss {loss.item()!r} at epoch {epoch}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running += loss.item() * len(batch)
        score = val_score()
        history.append({"epoch": epoch, "loss": running / len(ids), "val": score})
        if config.select_on_val and score is not None and (best is None or score > best):
            best = score
            best_state = (copy.deepcopy(aggregator.state_dict()), copy.deepcopy(classifier.state_dict()))
    if best_state is not None:
        aggregator.load_state_dict(best_state[0])
        classifier.load_state_dict(best_state[1])
    return aggregator, classifier, history


def instance_pool(dataset: BagDataset) -> list:
    return [inst for bag in dataset.bags for inst in bag.instances]


def finetune_embedder_stage(
    embedder: InstanceEmbedder,
    classifier: BagClassifier,
    dataset: BagDataset,
    config: CouplingConfig,
    iterations: Optional[int] = None,
    mode: str = "teacher-student",
    log_path=None,
    on_step=None,
) -> InstanceEmbedder:
    """Stage two.  ``embedder`` and ``classifier`` act as the frozen teacher
    and come back bit-identical; the fine-tuned student embedder is returned.

    ``on_step`` is ``(step, callback)``; the callback receives a copy of the
    student embedder after that many coupling steps.
    """
    iterations = config.iterations if iterations is None else iterations
    pool = instance_pool(dataset)
    teacher, student = make_bundles(embedder, classifier)
    try:
        if mode == "naive":
            labels = naive_pseudo_labels(teacher, pool)
            return naive_finetune(teacher, embedder, pool, config, iterations=iterations, labels=labels)
        if mode != "teacher-student":
            raise ValueError(f"unknown coupling mode {mode!r}")
        if on_step is not None and 0 < on_step[0] < iterations:
            mid, callback = on_step
            run_coupling(teacher, student, pool, config, iterations=iterations, log_path=log_path,
                         on_step=(mid, lambda s: callback(clone_embedder(s.embedder))))
        else:
            run_coupling(teacher, student, pool, config, iterations=iterations, log_path=log_path)
        return student.embedder
    finally:
        teacher.release()


@dataclass
class ICMILState:
    embedder: InstanceEmbedder
    aggregator: nn.Module
    classifier: BagClassifier
    half_steps_done: int = 0
    history: list = field(default_factory=list)
    cache: Optional[EmbeddingCache] = None
    run_dir: Optional[Path] = None
    last_bag_index: int = 0

    @property
    def final_test(self) -> Optional[MetricRecord]:
        tests = [r for r in self.history if r.split == "test"]
        return tests[-1] if tests else None


def _stage_plan(t_half: int) -> list:
    """List of ("bag", index) and ("couple", index, budget_fraction) stages."""
    plan = [("bag", 0)]
    for i in range(1, t_half // 2 + 1):
        plan += [("couple", i, 1.0), ("bag", i)]
    if t_half % 2:
        i = t_half // 2 + 1
        plan += [("couple", i, 0.5), ("bag", i)]
    return plan


def _labels(ds: BagDataset) -> dict:
    return {bag.id: bag.label for bag in ds.bags}


def _splits(dataset, config: RunConfig):
    if isinstance(dataset, BagDataset):
        return split_dataset(dataset, config.dataset.split)
    train, val, test = dataset
    return train, val, test


def _write_state(run_dir: Path, items: dict):
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    (run_dir / "state.txt").write_text(text)


def read_state(run_dir) -> dict:
    path = Path(run_dir) / "state.txt"
    if not path.exists():
        return {}
    return dict(line.split("=", 1) for line in path.read_text().splitlines() if "=" in line)


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        MetricRecord(float(r["auc"]), float(r["f1"]), float(r["acc"]), r["split"], r["stage"], 0,
                     float(r["iteration"]))
        for r in rows
    ]


def _write_metrics(path: Path, records: Sequence[MetricRecord]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())


def run_icmil(
    dataset,
    config: RunConfig,
    T: Optional[float] = None,
    run_dir=None,
    resume: bool = True,
    max_stages: Optional[int] = None,
) -> ICMILState:
    """Run the alternating pipeline for ``T`` iterations (multiples of 0.5).

    ``dataset`` is a :class:`BagDataset` (split per ``config.dataset``) or a
    ``(train, val, test)`` tuple.  With ``run_dir`` every stage is
    checkpointed and an interrupted run resumes from the last finished stage.
    ``max_stages`` stops early after that many stages (used to test resuming).
    """
    T = config.icmil.iterations if T is None else T
    t_half = int(round(2 * T))
    if t_half < 0 or abs(2 * T - t_half) > 1e-9:
        raise ValueError(f"T must be a non-negative multiple of 0.5, got {T}")
    train, val, test = _splits(dataset, config)
    full = BagDataset(train.bags + val.bags + test.bags, train.num_classes, train.patch_shape, train.provenance)
    split_labels = {"train": _labels(train), "val": _labels(val), "test": _labels(test)}
    plan = _stage_plan(t_half)
    s1, cc = config.stage_one, config.coupling

    state = ICMILState(
        embedder=build_embedder(config.embedder_arch(train.patch_shape), seed=config.model.seed),
        aggregator=None,
        classifier=None,
    )
    done = 0
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        state.run_dir = run_dir
        saved = read_state(run_dir) if resume else {}
        if saved and saved.get("config_hash") == config.hash() and int(saved.get("t_half", -1)) == t_half:
            done = int(saved["stages_done"])
            state.embedder = load_embedder(run_dir / saved["embedder"])
            if saved.get("aggregator"):
                state.aggregator = load_aggregator(run_dir / saved["aggregator"])
                state.classifier = load_classifier(run_dir / saved["classifier"])
            state.history = read_metrics(run_dir / "metrics.csv")[: int(saved["metric_rows"])]
            state.half_steps_done = int(saved["half_steps_done"])
            log.info("resuming %s after %d stages", run_dir, done)
        (run_dir / "config.ini").write_text(to_ini(config))

    def stage_one(index: int, iteration: float, embedder, warm):
        cache = precompute_embeddings(embedder, full)
        cache.check(embedder)
        cfg = dataclasses.replace(s1, seed=s1.seed + index)
        agg, clf, _ = train_bag_stage(
            cache, split_labels["train"], config.model.aggregator, cfg,
            warm_start=warm if config.icmil.warm_start else None,
            val=(cache, split_labels["val"]), num_classes=train.num_classes,
        )
        records = [evaluate(agg, clf, cache, split_labels[s], s, iteration) for s in ("train", "val", "test")]
        return agg, clf, cache, records

    def checkpoint(stage_count: int, bag_index: int):
        if run_dir is None:
            return
        it_dir = run_dir / f"iter_{bag_index}"
        it_dir.mkdir(exist_ok=True)
        save_embedder(state.embedder, it_dir / "embedder.ckpt")
        items = {
            "run_id": run_dir.name,
            "config_hash": config.hash(),
            "seed": config.seed,
            "t_half": t_half,
            "stages_done": stage_count,
            "half_steps_done": state.half_steps_done,
            "metric_rows": len(state.history),
            "embedder": f"iter_{bag_index}/embedder.ckpt",
        }
        if state.aggregator is not None:
            agg_dir = run_dir / f"iter_{state.last_bag_index}"
            save_aggregator(state.aggregator, agg_dir / "aggregator.ckpt")
            save_classifier(state.classifier, agg_dir / "classifier.ckpt")
            items["aggregator"] = f"iter_{state.last_bag_index}/aggregator.ckpt"
            items["classifier"] = f"iter_{state.last_bag_index}/classifier.ckpt"
        _write_metrics(run_dir / "metrics.csv", state.history)
        _write_state(run_dir, items)

    for stage_no, stage in enumerate(plan):
        if stage[0] == "bag":
            state.last_bag_index = stage[1]
        if stage_no < done:
            continue
        if max_stages is not None and stage_no >= max_stages:
            break
        if stage[0] == "bag":
            index = stage[1]
            warm = (state.aggregator, state.classifier) if state.aggregator is not None else None
            iteration = state.half_steps_done / 2
            agg, clf, cache, records = stage_one(index, iteration, state.embedder, warm)
            state.aggregator, state.classifier, state.cache = agg, clf, cache
            state.history.extend(records)
            log.info("stage one %d (T=%g): test AUC %.4f", index, iteration, records[-1].auc)
            checkpoint(stage_no + 1, index)
        else:
            _, index, fraction = stage
            budget = int(round(cc.iterations * fraction))
            cfg = dataclasses.replace(cc, seed=cc.seed + index)
            log_path = None
            if run_dir is not None:
                (run_dir / f"iter_{index}").mkdir(exist_ok=True)
                log_path = run_dir / f"iter_{index}" / "coupling_log.csv"
                log_path.unlink(missing_ok=True)
            on_step = None
            if config.icmil.half_iteration_eval and fraction == 1.0 and config.icmil.coupling_mode != "naive":
                warm = (state.aggregator, state.classifier)
                half_iter = state.half_steps_done / 2 + 0.5

                def evaluate_half(embedder, warm=warm, index=index, half_iter=half_iter):
                    *_, records = stage_one(index, half_iter, embedder, warm)
                    state.history.extend(records)

                on_step = (budget // 2, evaluate_half)
            state.embedder = finetune_embedder_stage(
                state.embedder, state.classifier, train, cfg, iterations=budget,
                mode=config.icmil.coupling_mode, log_path=log_path, on_step=on_step,
            )
            state.half_steps_done += 2 if fraction == 1.0 else 1
            state.cache = None  # embedder changed; old embeddings are stale
            checkpoint(stage_no + 1, index)
    return state


def train_baseline(dataset, config: RunConfig) -> tuple:
    """Plain MIL: frozen initial embedder, one stage one.  Returns (aggregator, classifier, records)."""
    train, val, test = _splits(dataset, config)
    full = BagDataset(train.bags + val.bags + test.bags, train.num_classes, train.patch_shape, train.provenance)
    embedder = build_embedder(config.embedder_arch(train.patch_shape), seed=config.model.seed)
    cache = precompute_embeddings(embedder, full)
    agg, clf, _ = train_bag_stage(
        cache, _labels(train), config.model.aggregator, config.stage_one,
        val=(cache, _labels(val)), num_classes=train.num_classes,
    )
    records = [evaluate(agg, clf, cache, _labels(ds), s) for s, ds in (("train", train), ("val", val), ("test", test))]
    return agg, clf, records
