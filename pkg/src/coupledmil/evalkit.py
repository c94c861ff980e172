"""Bag-level metrics and 2-D projections of instance/bag embeddings."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

ROLES = ("instance-negative", "instance-positive", "bag-negative", "bag-positive")


@dataclass(frozen=True)
class MetricRecord:
    auc: float
    f1: float
    acc: float
    split: str
    stage: str
    n_bags: int
    iteration: float = 0.0

    def row(self) -> list:
        return [self.stage, f"{self.iteration:g}", self.split, f"{self.auc:.6f}", f"{self.f1:.6f}", f"{self.acc:.6f}"]


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC with ties counted as half a correct pair."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and of equal length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos + n_neg != len(labels):
        raise ValueError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(scores)  # average ranks for ties
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_and_acc(pred_labels: Sequence[int], labels: Sequence[int]) -> tuple:
    pred = np.asarray(pred_labels)
    true = np.asarray(labels)
    if pred.size == 0 or pred.shape != true.shape:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return float(f1), float(np.mean(pred == true))


def bag_metrics(pos_probs, labels, split: str, stage: str = "bag", iteration: float = 0.0,
                threshold: float = 0.5) -> MetricRecord:
    """AUC on the positive-class probability, F1/Acc at ``threshold``.

    AUC is NaN when the split holds a single class.
    """
    pos_probs = np.asarray(pos_probs, dtype=np.float64)
    labels = np.asarray(labels)
    try:
        auc = auc_score(pos_probs, labels)
    except ValueError:
        auc = float("nan")
    f1, acc = f1_and_acc((pos_probs >= threshold).astype(int), labels)
    return MetricRecord(auc, f1, acc, split, stage, len(labels), iteration)


@dataclass(frozen=True)
class ProjectionExport:
    points: np.ndarray  # (N, 2)
    roles: tuple
    bag_ids: tuple
    method: str


def _pca_2d(data: np.ndarray) -> tuple:
    mean = data.mean(axis=0)
    _, _, vt = np.linalg.svd(data - mean, full_matrices=False)
    comps = vt[:2]
    # sign convention: the largest-magnitude loading of each component is positive
    signs = np.sign(comps[np.arange(2), np.argmax(np.abs(comps), axis=1)])
    signs[signs == 0] = 1.0
    return mean, comps * signs[:, None]


def project_embeddings(
    instance_embeddings,
    bag_embeddings,
    instance_labels: Sequence[int],
    bag_labels: Sequence[int],
    method: str = "pca",
    instance_bag_ids: Optional[Sequence[str]] = None,
    bag_ids: Optional[Sequence[str]] = None,
) -> ProjectionExport:
    """Joint 2-D projection of instances and bags, fitted on their union.

    ``method="identity"`` passes already 2-D embeddings through unchanged.
    """
    inst = np.asarray(instance_embeddings, dtype=np.float64)
    bags = np.asarray(bag_embeddings, dtype=np.float64)
    if inst.ndim != 2 or bags.ndim != 2 or len(inst) == 0 or len(bags) == 0:
        raise ValueError("need non-empty (N, D) instance and bag embeddings")
    if inst.shape[1] != bags.shape[1]:
        raise ValueError("instance and bag embeddings must share the hidden dimension")
    if inst.shape[1] < 2:
        raise ValueError("hidden dimension must be >= 2 to project to 2-D")
    union = np.vstack([inst, bags])
    if method == "identity":
        if union.shape[1] != 2:
            raise ValueError("identity projection needs 2-D embeddings")
        points = union.copy()
    elif method == "pca":
        mean, comps = _pca_2d(union)
        points = (union - mean) @ comps.T
    else:
        raise ValueError(f"unknown projection method {method!r}")
    roles = [ROLES[int(y)] for y in instance_labels] + [ROLES[2 + int(y)] for y in bag_labels]
    ids = list(instance_bag_ids or [""] * len(inst)) + list(bag_ids or [""] * len(bags))
    if len(roles) != len(points) or len(ids) != len(points):
        raise ValueError("label/id counts do not match embedding counts")
    return ProjectionExport(points, tuple(roles), tuple(ids), method)


def write_projection_csv(export: ProjectionExport, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "role", "bag_id"])
        for (x, y), role, bag_id in zip(export.points, export.roles, export.bag_ids):
            writer.writerow([f"{x:.8f}", f"{y:.8f}", role, bag_id])


def plot_projection(export: ProjectionExport, ax, title: str = ""):
    styles = {
        "instance-negative": dict(c="tab:blue", s=6, alpha=0.35, marker="o"),
        "instance-positive": dict(c="tab:red", s=6, alpha=0.35, marker="o"),
        "bag-negative": dict(c="navy", s=40, marker="*"),
        "bag-positive": dict(c="darkred", s=40, marker="*"),
    }
    roles = np.asarray(export.roles)
    for role, style in styles.items():
        mask = roles == role
        if mask.any():
            ax.scatter(export.points[mask, 0], export.points[mask, 1], label=role, **style)
    ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
