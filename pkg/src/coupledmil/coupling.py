"""Teacher-student label propagation from the bag classifier to the embedder.

The frozen teacher ``f(g(x))`` labels each clean patch with a soft class
distribution.  The student ``f'(g'(x'))`` sees an augmented copy ``x'`` and
is pulled towards the teacher by a KL consistency term, while a second KL
term, summed over every layer of the head, keeps ``f'`` close to ``f``::

    loss = KL(f(g(x)) || f'(g'(x')))  +  alpha * sum_l KL(f_l(g(x)) || f'_l(g(x)))

Intermediate layer outputs are softmax-normalised over channels before the
KL; the final layer is already a distribution and is used as is.  Both
terms clamp their arguments at ``epsilon`` and renormalise.

The naive baseline replaces all of this with hard argmax pseudo labels and
plain cross-entropy.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .bagdata import Instance
from .classifier import BagClassifier, ClassifierOutput, init_instance_classifier
from .embedder import AugmentSpec, InstanceEmbedder, augment, clone_embedder, embed_batch

DTYPE = torch.float64


class DivergenceError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class CouplingConfig:
    alpha: float = 0.5
    learning_rate: float = 1e-3
    iterations: int = 200
    batch_size: int = 100
    epsilon: float = 1e-8
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    log_every: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class TeacherBundle:
    """Frozen ``g`` and ``f``; gradients stay off until :meth:`release`."""

    embedder: InstanceEmbedder
    classifier: BagClassifier

    def __post_init__(self):
        self._saved = [p.requires_grad for p in self.parameters()]
        for p in self.parameters():
            p.requires_grad_(False)

    def parameters(self):
        yield from self.embedder.parameters()
        yield from self.classifier.parameters()

    def release(self):
        for p, flag in zip(self.parameters(), self._saved):
            p.requires_grad_(flag)

    @torch.no_grad()
    def predict(self, patches) -> ClassifierOutput:
        return self.classifier(embed_batch(self.embedder, patches))


@dataclass
class StudentBundle:
    embedder: InstanceEmbedder
    classifier: BagClassifier

    def parameters(self):
        yield from self.embedder.parameters()
        yield from self.classifier.parameters()


def make_bundles(embedder: InstanceEmbedder, classifier: BagClassifier) -> tuple:
    """Student copies are taken before the teacher is frozen."""
    student = StudentBundle(clone_embedder(embedder), init_instance_classifier(classifier))
    for p in student.parameters():
        p.requires_grad_(True)
    return TeacherBundle(embedder, classifier), student


def make_optimizer(student: StudentBundle, learning_rate: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(list(student.parameters()), lr=learning_rate)


def _check_distribution(probs: torch.Tensor, name: str):
    sums = probs.detach().sum(dim=-1)
    if torch.any((sums - 1.0).abs() > 1e-5) or torch.any(probs.detach() < 0):
        raise ValueError(f"{name} is not a probability vector (sums {sums.tolist()})")


def _kl(p: torch.Tensor, q: torch.Tensor, epsilon: float) -> torch.Tensor:
    p = p.clamp(min=epsilon)
    p = p / p.sum(dim=-1, keepdim=True)
    q = q.clamp(min=epsilon)
    q = q / q.sum(dim=-1, keepdim=True)
    return (p * (p.log() - q.log())).sum(dim=-1)


def consistency_loss(teacher_probs, student_probs, epsilon: float = 1e-8) -> torch.Tensor:
    """KL(teacher || student) over the class axis; one value per row."""
    teacher_probs = torch.as_tensor(teacher_probs, dtype=DTYPE)
    student_probs = torch.as_tensor(student_probs, dtype=DTYPE)
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    _check_distribution(teacher_probs, "teacher_probs")
    _check_distribution(student_probs, "student_probs")
    return _kl(teacher_probs, student_probs, epsilon)


def layer_distributions(out: ClassifierOutput) -> list:
    *hidden, final = out.layer_outputs
    return [torch.softmax(h, dim=-1) for h in hidden] + [final]


def weight_similarity_loss(
    teacher_out: ClassifierOutput, student_out: ClassifierOutput, epsilon: float = 1e-8
) -> torch.Tensor:
    """Sum over layers of KL between the two heads' per-layer channel distributions."""
    if len(teacher_out.layer_outputs) != len(student_out.layer_outputs):
        raise ValueError(
            f"layer count mismatch: {len(teacher_out.layer_outputs)} vs {len(student_out.layer_outputs)}"
        )
    total = 0.0
    for t, s in zip(layer_distributions(teacher_out), layer_distributions(student_out)):
        if t.shape != s.shape:
            raise ValueError(f"layer width mismatch: {tuple(t.shape)} vs {tuple(s.shape)}")
        total = total + _kl(t, s, epsilon)
    return total


@dataclass
class CouplingLosses:
    total: torch.Tensor
    consistency: torch.Tensor
    similarity: torch.Tensor


def coupling_losses(
    teacher: TeacherBundle,
    student: StudentBundle,
    originals: Sequence[Instance],
    augmented: Sequence[Instance],
    alpha: float,
    epsilon: float = 1e-8,
) -> CouplingLosses:
    """Batch-mean objective for already-augmented inputs (deterministic in the parameters)."""
    with torch.no_grad():
        clean_embedding = embed_batch(teacher.embedder, originals)
        teacher_out = teacher.classifier(clean_embedding)
    student_out = student.classifier(embed_batch(student.embedder, augmented))
    lc = consistency_loss(teacher_out.probs, student_out.probs, epsilon)
    # both heads read the same un-augmented embedding; gradients reach f' only
    lw = weight_similarity_loss(teacher_out, student.classifier(clean_embedding), epsilon)
    lc, lw = lc.mean(), lw.mean()
    return CouplingLosses(lc + alpha * lw, lc, lw)


def coupling_objective(
    teacher: TeacherBundle,
    student: StudentBundle,
    patch: Instance,
    config: CouplingConfig,
    draw: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    draw = draw if draw is not None else np.random.default_rng(config.seed)
    x_aug = augment(config.augment, patch, draw)
    return coupling_losses(teacher, student, [patch], [x_aug], config.alpha, config.epsilon).total


def _step(teacher, student, patch_batch, config, optimizer, draw) -> CouplingLosses:
    if len(patch_batch) == 0:
        raise ValueError("empty patch batch")
    augmented = [augment(config.augment, p, draw) for p in patch_batch]
    losses = coupling_losses(teacher, student, patch_batch, augmented, config.alpha, config.epsilon)
    if not torch.isfinite(losses.total):
        raise DivergenceError(
            f"diverged: L_c={losses.consistency.item()!r} L_w={losses.similarity.item()!r}"
        )
    optimizer.zero_grad()
    losses.total.backward()
    optimizer.step()
    return losses


def coupling_step(
    teacher: TeacherBundle,
    student: StudentBundle,
    patch_batch: Sequence[Instance],
    config: CouplingConfig,
    optimizer: torch.optim.Optimizer,
    draw: Optional[np.random.Generator] = None,
) -> tuple:
    """One Adam update of g' and f' on the batch-mean objective.

    Returns the student and the loss measured before the update.
    """
    draw = draw if draw is not None else np.random.default_rng(config.seed)
    losses = _step(teacher, student, patch_batch, config, optimizer, draw)
    return student, losses.total.item()


def run_coupling(
    teacher: TeacherBundle,
    student: StudentBundle,
    pool: Sequence[Instance],
    config: CouplingConfig,
    iterations: Optional[int] = None,
    log_path=None,
    on_step=None,
) -> tuple:
    """Train the student on batches drawn uniformly (with replacement) from ``pool``.

    Returns ``(student, log)`` where ``log`` holds ``(step, L_c, L_w, total)``
    rows every ``config.log_every`` steps.  The same rows are appended to
    ``log_path`` as CSV when given.  ``on_step=(n, callback)`` calls
    ``callback(student)`` right after step ``n``.
    """
    iterations = config.iterations if iterations is None else iterations
    if not pool:
        raise ValueError("empty instance pool")
    draw = np.random.default_rng(config.seed)
    optimizer = make_optimizer(student, config.learning_rate)
    log = []
    for step in range(1, iterations + 1):
        batch = [pool[i] for i in draw.integers(len(pool), size=config.batch_size)]
        losses = _step(teacher, student, batch, config, optimizer, draw)
        if step == 1 or step % config.log_every == 0 or step == iterations:
            log.append((step, losses.consistency.item(), losses.similarity.item(), losses.total.item()))
        if on_step is not None and step == on_step[0]:
            on_step[1](student)
    if log_path is not None:
        _append_log(log_path, log)
    return student, log


def _append_log(path, rows):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["step", "L_c", "L_w", "total"])
        for step, lc, lw, total in rows:
            writer.writerow([step, f"{lc:.8f}", f"{lw:.8f}", f"{total:.8f}"])


def naive_pseudo_labels(teacher: TeacherBundle, instances: Sequence[Instance], chunk: int = 512) -> list:
    """Hard argmax of the teacher's prediction; ties go to the lower class index."""
    if len(instances) == 0:
        raise ValueError("no instances to label")
    labels = []
    for start in range(0, len(instances), chunk):
        probs = teacher.predict(instances[start: start + chunk]).probs.numpy()
        labels.extend(int(i) for i in np.argmax(probs, axis=1))
    return labels


def naive_finetune(
    teacher: TeacherBundle,
    fresh_embedder: InstanceEmbedder,
    instances: Sequence[Instance],
    config: CouplingConfig,
    iterations: Optional[int] = None,
    labels: Optional[Sequence[int]] = None,
) -> InstanceEmbedder:
    """Fit a copy of ``fresh_embedder`` plus a new linear head to hard pseudo labels.

    The head is discarded; only the embedder is returned.
    """
    iterations = config.iterations if iterations is None else iterations
    labels = naive_pseudo_labels(teacher, instances) if labels is None else list(labels)
    embedder = clone_embedder(fresh_embedder)
    for p in embedder.parameters():
        p.requires_grad_(True)
    if iterations == 0:
        return embedder
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = nn.Linear(embedder.hidden_dim, teacher.classifier.num_classes, dtype=DTYPE)
    optimizer = torch.optim.Adam(list(embedder.parameters()) + list(head.parameters()), lr=config.learning_rate)
    targets = torch.as_tensor(labels)
    draw = np.random.default_rng(config.seed)
    for _ in range(iterations):
        idx = draw.integers(len(instances), size=config.batch_size)
        batch = [augment(config.augment, instances[i], draw) for i in idx]
        loss = nn.functional.cross_entropy(head(embed_batch(embedder, batch)), targets[idx])
        if not torch.isfinite(loss):
            raise DivergenceError(f"diverged: naive fine-tuning loss {loss.item()!r}")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
    return embedder
