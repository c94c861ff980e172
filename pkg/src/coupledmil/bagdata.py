"""Bag datasets: synthetic generators, on-disk ingestion and stratified splits.

A bag is an ordered list of instances plus a binary label.  Synthetic bags
carry the per-instance ground truth so the MIL rule can be checked exactly.

On-disk layout (read by :func:`load_patch_directory`, written by
:func:`save_dataset`)::

    root/labels.tsv            <bag_id>\\t<0|1>
    root/truth.tsv             <bag_id>/<patch>\\t<class>   (synthetic only)
    root/<bag_id>/<patch>.png  image instances (.jpg also accepted)
    root/<bag_id>/<patch>.npy  feature-vector instances
"""
from __future__ import annotations

import math
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
VECTOR_SUFFIXES = (".npy",)
PROVENANCES = ("synthetic-image", "synthetic-gaussian", "ingested")


class BagDataError(ValueError):
    """Raised for malformed bags, generator arguments or on-disk datasets."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Instance:
    """One patch.  ``pixels`` is CxHxW in [0, 1] for images, or a 1-D feature vector."""

    pixels: np.ndarray
    true_class: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pixels", _frozen(self.pixels))
        if self.is_image and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise BagDataError(f"pixel values outside [0, 1] in instance {self.name!r}")

    @property
    def is_image(self) -> bool:
        return self.pixels.ndim == 3

    @property
    def shape(self) -> tuple:
        return tuple(self.pixels.shape)


@dataclass(frozen=True)
class Bag:
    instances: tuple
    label: int
    id: str

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if len(self.instances) == 0:
            raise BagDataError(f"empty bag {self.id!r}")
        if self.label not in (0, 1):
            raise BagDataError(f"bag label must be 0 or 1, got {self.label!r}")

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def true_classes(self) -> list:
        return [inst.true_class for inst in self.instances]


@dataclass(frozen=True)
class BagDataset:
    bags: tuple
    num_classes: int = 2
    patch_shape: tuple = ()
    provenance: str = "ingested"

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))
        object.__setattr__(self, "patch_shape", tuple(self.patch_shape))
        if self.num_classes < 2:
            raise BagDataError("num_classes must be >= 2")
        if self.provenance not in PROVENANCES:
            raise BagDataError(f"unknown provenance {self.provenance!r}")
        for bag in self.bags:
            for inst in bag.instances:
                if inst.shape != self.patch_shape:
                    raise BagDataError(
                        f"instance {inst.name!r} in bag {bag.id!r} has shape {inst.shape}, "
                        f"dataset patch shape is {self.patch_shape}"
                    )

    def __len__(self) -> int:
        return len(self.bags)

    def __iter__(self):
        return iter(self.bags)

    @property
    def labels(self) -> list:
        return [bag.label for bag in self.bags]

    @property
    def ids(self) -> list:
        return [bag.id for bag in self.bags]

    def subset(self, indices: Sequence[int]) -> "BagDataset":
        return BagDataset(
            bags=[self.bags[i] for i in indices],
            num_classes=self.num_classes,
            patch_shape=self.patch_shape,
            provenance=self.provenance,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f <= 0 for f in fracs):
            raise BagDataError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise BagDataError(f"split fractions must sum to 1, got {sum(fracs)!r}")


def bag_label_from_instances(instance_labels: Sequence[int]) -> int:
    """The MIL rule: a bag is positive iff any of its instances is positive."""
    labels = list(instance_labels)
    if not labels:
        raise BagDataError("empty bag")
    for value in labels:
        if value not in (0, 1):
            raise BagDataError(f"instance labels must be 0 or 1, got {value!r}")
    return int(any(value == 1 for value in labels))


def _check_common(n_bags, k_range, positive_ratio, witness_rate):
    if n_bags < 2:
        raise BagDataError("n_bags must be >= 2")
    k_min, k_max = k_range
    if k_min < 1 or k_max < k_min:
        raise BagDataError(f"invalid k_range {k_range!r}")
    if not 0.0 <= positive_ratio <= 1.0:
        raise BagDataError(f"positive_ratio must lie in [0, 1], got {positive_ratio!r}")
    if not 0.0 < witness_rate <= 1.0:
        raise BagDataError(f"witness_rate must lie in (0, 1], got {witness_rate!r}")


def _bag_layouts(rng, n_bags, k_range, positive_ratio, witness_rate):
    """Yield (bag_label, instance_classes) for every bag, in bag order."""
    n_pos = int(round(n_bags * positive_ratio))
    bag_labels = np.zeros(n_bags, dtype=int)
    bag_labels[rng.permutation(n_bags)[:n_pos]] = 1
    layouts = []
    for label in bag_labels:
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        classes = np.zeros(k, dtype=int)
        if label == 1:
            n_witness = min(k, math.ceil(witness_rate * k - 1e-12))
            classes[rng.permutation(k)[:n_witness]] = 1
        layouts.append((int(label), classes.tolist()))
    return layouts


def _render_texture(rng, cls, patch_shape):
    """Procedural texture patch.

    Class 0 renders a coarse grating (period 8-12 px); class 1 renders a fine
    grating (period 3-5 px) with a warm tint.  Orientation and phase are
    random for both, so only frequency and colour separate the classes.
    """
    channels, height, width = patch_shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2 * np.pi)
    period = rng.uniform(8.0, 12.0) if cls == 0 else rng.uniform(3.0, 5.0)
    wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    base = 0.5 + 0.3 * wave
    tint = np.full(channels, 0.0)
    if cls == 1 and channels >= 3:
        tint[:3] = (0.12, -0.05, -0.08)
    pixels = base[None, :, :] + tint[:, None, None]
    pixels = pixels + rng.normal(0.0, 0.05, size=pixels.shape)
    pixels = np.clip(pixels, 0.0, 1.0)
    # quantised to 8-bit levels so PNG serialization round-trips exactly
    return np.round(pixels * 255.0) / 255.0


def generate_image_bags(
    n_bags: int,
    k_range: tuple = (8, 16),
    positive_ratio: float = 0.5,
    witness_rate: float = 0.25,
    patch_shape: tuple = (3, 16, 16),
    seed: int = 0,
) -> BagDataset:
    """Bags of rendered texture patches with known instance classes."""
    _check_common(n_bags, k_range, positive_ratio, witness_rate)
    if len(patch_shape) != 3 or min(patch_shape) < 1:
        raise BagDataError(f"patch_shape must be (channels, h, w), got {patch_shape!r}")
    rng = np.random.default_rng(seed)
    bags = []
    for i, (label, classes) in enumerate(_bag_layouts(rng, n_bags, k_range, positive_ratio, witness_rate)):
        instances = [
            Instance(_render_texture(rng, cls, patch_shape), true_class=cls, name=f"p{j:03d}")
            for j, cls in enumerate(classes)
        ]
        bags.append(Bag(instances, label=bag_label_from_instances(classes), id=f"bag_{i:04d}"))
    return BagDataset(bags, num_classes=2, patch_shape=tuple(patch_shape), provenance="synthetic-image")


def generate_gaussian_bags(
    n_bags: int,
    k_range: tuple = (10, 30),
    dim: int = 16,
    class_separation: float = 3.0,
    seed: int = 0,
    positive_ratio: float = 0.5,
    witness_rate: float = 0.2,
) -> BagDataset:
    """Bags of feature vectors drawn from two unit-covariance Gaussians.

    Negative instances are centred at the origin and positive ones at
    ``class_separation * u`` for the unit diagonal direction ``u``, so the two
    means are exactly ``class_separation`` apart.
    """
    if dim < 2:
        raise BagDataError("dim must be >= 2")
    if class_separation < 0:
        raise BagDataError("class_separation must be >= 0")
    _check_common(n_bags, k_range, positive_ratio, witness_rate)
    rng = np.random.default_rng(seed)
    direction = np.ones(dim) / np.sqrt(dim)
    bags = []
    for i, (label, classes) in enumerate(_bag_layouts(rng, n_bags, k_range, positive_ratio, witness_rate)):
        noise = rng.normal(size=(len(classes), dim))
        instances = [
            Instance(noise[j] + cls * class_separation * direction, true_class=cls, name=f"p{j:03d}")
            for j, cls in enumerate(classes)
        ]
        bags.append(Bag(instances, label=bag_label_from_instances(classes), id=f"bag_{i:04d}"))
    return BagDataset(bags, num_classes=2, patch_shape=(dim,), provenance="synthetic-gaussian")


def _read_tsv(path: Path) -> dict:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise BagDataError(f"{path}:{lineno}: expected two tab-separated fields")
            table[parts[0]] = parts[1]
    return table


def _read_instance(path: Path) -> np.ndarray:
    try:
        if path.suffix.lower() in VECTOR_SUFFIXES:
            return np.load(path, allow_pickle=False).astype(np.float64)
        from PIL import Image

        with Image.open(path) as img:
            img = img.convert("L") if img.mode in ("L", "I", "I;16", "1") else img.convert("RGB")
            array = np.asarray(img, dtype=np.float64) / 255.0
    except Exception as exc:  # PIL raises a zoo of exception types
        raise BagDataError(f"unreadable instance file {path}: {exc}") from exc
    if array.ndim == 2:
        array = array[None, :, :]
    else:
        array = np.transpose(array, (2, 0, 1))
    return array


def load_patch_directory(root_path) -> BagDataset:
    """Read a dataset from ``root/<bag_id>/<patch>`` plus ``labels.tsv``."""
    root = Path(root_path)
    manifest = root / "labels.tsv"
    if not manifest.is_file():
        raise BagDataError(f"missing manifest {manifest}")
    labels = _read_tsv(manifest)
    truth_path = root / "truth.tsv"
    truth = _read_tsv(truth_path) if truth_path.is_file() else {}

    bag_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    on_disk = {p.name for p in bag_dirs}
    for bag_id in labels:
        if bag_id not in on_disk:
            raise BagDataError(f"labels.tsv names bag {bag_id!r} with no directory")

    bags = []
    patch_shape = None
    for bag_dir in bag_dirs:
        if bag_dir.name not in labels:
            raise BagDataError(f"unlabeled bag {bag_dir.name!r}")
        label = labels[bag_dir.name]
        if label not in ("0", "1"):
            raise BagDataError(f"bag {bag_dir.name!r} has label {label!r}, expected 0 or 1")
        files = sorted(
            p for p in bag_dir.iterdir()
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES + VECTOR_SUFFIXES
        )
        if not files:
            raise BagDataError(f"empty bag directory {bag_dir}")
        instances = []
        for path in files:
            pixels = _read_instance(path)
            key = f"{bag_dir.name}/{path.stem}"
            true_class = int(truth[key]) if key in truth else None
            instances.append(Instance(pixels, true_class=true_class, name=path.stem))
        patch_shape = patch_shape or instances[0].shape
        bags.append(Bag(instances, label=int(label), id=bag_dir.name))
    if not bags:
        raise BagDataError(f"no bag directories under {root}")
    return BagDataset(bags, num_classes=2, patch_shape=patch_shape, provenance="ingested")


def save_dataset(dataset: BagDataset, root_path, force: bool = False) -> Path:
    """Write ``dataset`` in the on-disk layout; refuses a non-empty target unless ``force``."""
    from PIL import Image

    root = Path(root_path)
    if root.exists() and any(root.iterdir()):
        if not force:
            raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    label_lines, truth_lines = [], []
    for bag in dataset.bags:
        bag_dir = root / bag.id
        bag_dir.mkdir()
        label_lines.append(f"{bag.id}\t{bag.label}\n")
        for j, inst in enumerate(bag.instances):
            stem = inst.name or f"p{j:03d}"
            if inst.is_image:
                array = np.round(np.transpose(inst.pixels, (1, 2, 0)) * 255.0).astype(np.uint8)
                img = Image.fromarray(array[:, :, 0] if array.shape[2] == 1 else array)
                img.save(bag_dir / f"{stem}.png")
            else:
                np.save(bag_dir / f"{stem}.npy", inst.pixels)
            if inst.true_class is not None:
                truth_lines.append(f"{bag.id}/{stem}\t{inst.true_class}\n")
    (root / "labels.tsv").write_text("".join(label_lines), encoding="utf-8")
    if truth_lines:
        (root / "truth.tsv").write_text("".join(truth_lines), encoding="utf-8")
    return root


def _largest_remainder(n: int, fractions: Sequence[float]) -> list:
    raw = [n * f for f in fractions]
    sizes = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(dataset: BagDataset, spec: SplitSpec) -> tuple:
    """Stratified train/val/test partition.

    Each class is shuffled independently and the classes are interleaved by
    relative rank, so any contiguous cut holds each class in proportion.
    """
    n = len(dataset)
    if n < 3:
        raise BagDataError("need at least 3 bags to split")
    sizes = _largest_remainder(n, (spec.train_frac, spec.val_frac, spec.test_frac))
    if min(sizes) == 0:
        raise BagDataError(f"split sizes {sizes} leave an empty partition")
    rng = np.random.default_rng(spec.seed)
    labels = np.asarray(dataset.labels)
    keyed = []
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        for rank, idx in enumerate(members):
            keyed.append(((rank + 0.5) / len(members), rng.random(), int(idx)))
    order = [idx for _, _, idx in sorted(keyed)]
    cuts = np.cumsum([0] + sizes)
    return tuple(
        dataset.subset(sorted(order[cuts[i]: cuts[i + 1]])) for i in range(3)
    )
