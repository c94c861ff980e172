import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupledmil.bagdata import (
    Bag,
    BagDataError,
    BagDataset,
    Instance,
    SplitSpec,
    bag_label_from_instances,
    generate_gaussian_bags,
    generate_image_bags,
    load_patch_directory,
    save_dataset,
    split_dataset,
)


@pytest.mark.parametrize("labels, expected", [([0, 0, 1], 1), ([0, 0, 0], 0), ([1, 1, 1], 1)])
def test_bag_label_rule(labels, expected):
    assert bag_label_from_instances(labels) == expected


def test_bag_label_empty():
    with pytest.raises(BagDataError, match="empty bag"):
        bag_label_from_instances([])


@given(st.lists(st.integers(0, 1), min_size=1, max_size=50))
def test_bag_label_is_max(labels):
    assert bag_label_from_instances(labels) == max(labels)


def test_image_bags_witness_count():
    ds = generate_image_bags(10, (4, 4), positive_ratio=0.5, witness_rate=0.25, seed=7)
    assert sum(ds.labels) == 5
    for bag in ds:
        witnesses = sum(c == 1 for c in bag.true_classes)
        assert witnesses == (1 if bag.label else 0)
        assert bag.label == bag_label_from_instances(bag.true_classes)


def test_image_bags_full_witness_rate():
    ds = generate_image_bags(6, (3, 5), witness_rate=1.0, seed=1)
    for bag in ds:
        if bag.label:
            assert all(c == 1 for c in bag.true_classes)


def test_image_bags_deterministic_and_valid():
    a = generate_image_bags(8, (2, 5), seed=11)
    b = generate_image_bags(8, (2, 5), seed=11)
    for x, y in zip(a, b):
        assert x.id == y.id and x.label == y.label
        for i, j in zip(x.instances, y.instances):
            assert i.pixels.tobytes() == j.pixels.tobytes()
            assert i.pixels.min() >= 0 and i.pixels.max() <= 1
            assert i.shape == a.patch_shape


@pytest.mark.parametrize("kwargs", [dict(n_bags=1), dict(k_range=(0, 3)), dict(k_range=(5, 2)), dict(witness_rate=0.0)])
def test_image_bags_degenerate_args(kwargs):
    args = dict(n_bags=4, k_range=(2, 3), witness_rate=0.5)
    args.update(kwargs)
    with pytest.raises(BagDataError):
        generate_image_bags(**args)


def test_gaussian_bags_linear_separability():
    from sklearn.linear_model import LogisticRegression

    ds = generate_gaussian_bags(40, (5, 10), dim=2, class_separation=10.0, seed=0)
    X = np.stack([i.pixels for b in ds for i in b.instances])
    y = np.array([i.true_class for b in ds for i in b.instances])
    acc = LogisticRegression().fit(X, y).score(X, y)
    assert acc > 0.99


def test_gaussian_zero_separation_identical_means():
    ds = generate_gaussian_bags(400, (10, 10), dim=3, class_separation=0.0, seed=2, witness_rate=0.5)
    X = np.stack([i.pixels for b in ds for i in b.instances])
    y = np.array([i.true_class for b in ds for i in b.instances])
    # same distribution: means agree to sampling error (~ 1/sqrt(1000))
    assert np.abs(X[y == 1].mean(0) - X[y == 0].mean(0)).max() < 0.15


def test_gaussian_counts_and_rule():
    ds = generate_gaussian_bags(100, (3, 9), dim=4, class_separation=2.0, seed=5)
    assert sum(ds.labels) == 50
    assert all(b.label == max(b.true_classes) for b in ds)


def test_gaussian_mean_distance():
    ds = generate_gaussian_bags(300, (20, 20), dim=5, class_separation=3.0, seed=9, witness_rate=1.0)
    X = np.stack([i.pixels for b in ds for i in b.instances])
    y = np.array([i.true_class for b in ds for i in b.instances])
    dist = np.linalg.norm(X[y == 1].mean(0) - X[y == 0].mean(0))
    assert abs(dist - 3.0) < 0.15


def test_gaussian_dim_too_small():
    with pytest.raises(BagDataError):
        generate_gaussian_bags(4, (2, 3), dim=1, class_separation=1.0, seed=0)


def test_instance_pixel_range_enforced():
    with pytest.raises(BagDataError):
        Instance(np.full((1, 2, 2), 1.5))


def test_dataset_rejects_mixed_shapes():
    bag = Bag([Instance(np.zeros((1, 2, 2))), Instance(np.zeros((1, 3, 3)))], label=0, id="b")
    with pytest.raises(BagDataError):
        BagDataset([bag], patch_shape=(1, 2, 2))


def _make_dir(root, bags, labels):
    from PIL import Image

    for bag_id, n in bags.items():
        (root / bag_id).mkdir()
        for j in range(n):
            Image.fromarray(np.full((4, 4, 3), 10 * j, dtype=np.uint8)).save(root / bag_id / f"p{j}.png")
    (root / "labels.tsv").write_text("".join(f"{k}\t{v}\n" for k, v in labels.items()))


def test_load_patch_directory(tmp_path):
    _make_dir(tmp_path, {"a": 3, "b": 3}, {"a": "0", "b": "1"})
    ds = load_patch_directory(tmp_path)
    assert len(ds) == 2 and [len(b) for b in ds] == [3, 3]
    assert ds.bags[1].label == 1
    assert ds.patch_shape == (3, 4, 4)
    assert ds.provenance == "ingested"
    # lexicographic order within the bag
    assert [i.name for i in ds.bags[0].instances] == ["p0", "p1", "p2"]


def test_load_missing_manifest(tmp_path):
    (tmp_path / "a").mkdir()
    with pytest.raises(BagDataError, match="missing manifest"):
        load_patch_directory(tmp_path)


def test_load_unlabeled_bag(tmp_path):
    _make_dir(tmp_path, {"a": 1, "b": 1}, {"a": "0"})
    with pytest.raises(BagDataError, match="unlabeled bag"):
        load_patch_directory(tmp_path)


def test_load_empty_bag_dir(tmp_path):
    _make_dir(tmp_path, {"a": 1}, {"a": "0", "b": "1"})
    (tmp_path / "b").mkdir()
    with pytest.raises(BagDataError, match="empty bag directory"):
        load_patch_directory(tmp_path)


def test_load_unreadable_file_named(tmp_path):
    _make_dir(tmp_path, {"a": 1}, {"a": "1"})
    (tmp_path / "a" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(BagDataError, match="broken.png"):
        load_patch_directory(tmp_path)


@pytest.mark.parametrize("maker", [
    lambda: generate_image_bags(5, (2, 4), seed=4),
    lambda: generate_gaussian_bags(5, (2, 4), dim=3, class_separation=2.0, seed=4),
])
def test_save_load_roundtrip(tmp_path, maker):
    ds = maker()
    save_dataset(ds, tmp_path / "d")
    assert (tmp_path / "d" / "labels.tsv").exists() and (tmp_path / "d" / "truth.tsv").exists()
    back = load_patch_directory(tmp_path / "d")
    assert back.ids == ds.ids and back.labels == ds.labels
    for x, y in zip(ds, back):
        for i, j in zip(x.instances, y.instances):
            np.testing.assert_array_equal(i.pixels, j.pixels)
            assert i.true_class == j.true_class


def test_save_refuses_nonempty(tmp_path):
    ds = generate_gaussian_bags(3, (1, 2), dim=2, class_separation=1.0, seed=0)
    save_dataset(ds, tmp_path)
    with pytest.raises(FileExistsError):
        save_dataset(ds, tmp_path)
    save_dataset(ds, tmp_path, force=True)


def test_split_sizes_7_1_2():
    ds = generate_gaussian_bags(10, (2, 3), dim=2, class_separation=1.0, seed=0)
    parts = split_dataset(ds, SplitSpec(0.7, 0.1, 0.2, seed=1))
    assert [len(p) for p in parts] == [7, 1, 2]


def test_split_partition_and_determinism():
    ds = generate_gaussian_bags(37, (2, 3), dim=2, class_separation=1.0, seed=0)
    a = split_dataset(ds, SplitSpec(seed=3))
    b = split_dataset(ds, SplitSpec(seed=3))
    assert [p.ids for p in a] == [p.ids for p in b]
    ids = [i for p in a for i in p.ids]
    assert sorted(ids) == sorted(ds.ids) and len(set(ids)) == len(ids)


def test_split_stratified():
    ds = generate_gaussian_bags(100, (2, 3), dim=2, class_separation=1.0, seed=0)
    for seed in range(5):
        for part in split_dataset(ds, SplitSpec(0.7, 0.1, 0.2, seed=seed)):
            assert abs(sum(part.labels) - len(part) / 2) <= 1


def test_split_errors():
    ds = generate_gaussian_bags(4, (2, 3), dim=2, class_separation=1.0, seed=0)
    with pytest.raises(BagDataError):
        split_dataset(ds.subset([0, 1]), SplitSpec())
    with pytest.raises(BagDataError):
        split_dataset(ds, SplitSpec(0.8, 0.1, 0.1))
    with pytest.raises(BagDataError):
        SplitSpec(0.5, 0.2, 0.2)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(10, 60), seed=st.integers(0, 100))
def test_split_partition_property(n, seed):
    ds = generate_gaussian_bags(n, (1, 2), dim=2, class_separation=1.0, seed=seed)
    parts = split_dataset(ds, SplitSpec(seed=seed))
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(ds.ids)
    assert math.isclose(sum(len(p) for p in parts), n)
