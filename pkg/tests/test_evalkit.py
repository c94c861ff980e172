import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupledmil.evalkit import (
    auc_score,
    bag_metrics,
    f1_and_acc,
    project_embeddings,
    write_projection_csv,
)
from oracles import pairwise_auc


@pytest.mark.parametrize("scores, labels, expected", [
    ([0.9, 0.1], [1, 0], 1.0),
    ([0.8, 0.6, 0.4], [1, 0, 1], 0.5),
    ([0.5, 0.5], [1, 0], 0.5),
])
def test_auc_examples(scores, labels, expected):
    assert auc_score(scores, labels) == expected
    assert pairwise_auc(scores, labels) == expected


def test_auc_single_class():
    with pytest.raises(ValueError, match="AUC undefined"):
        auc_score([0.1, 0.2], [1, 1])


scored = st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-40, 40).map(lambda v: v / 8), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n),
)).filter(lambda t: 0 < sum(t[1]) < len(t[1]))


@settings(max_examples=200, deadline=None)
@given(scored)
def test_auc_matches_pairwise_oracle(data):
    scores, labels = data
    assert abs(auc_score(scores, labels) - pairwise_auc(scores, labels)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(scored)
def test_auc_monotone_invariance(data):
    scores, labels = data
    transformed = np.exp(np.asarray(scores)) * 3 + 1
    assert abs(auc_score(transformed, labels) - auc_score(scores, labels)) < 1e-12


def test_f1_acc_examples():
    assert f1_and_acc([1, 0, 1], [1, 0, 1]) == (1.0, 1.0)
    assert f1_and_acc([0, 0, 0, 0], [1, 0, 1, 0]) == (0.0, 0.5)
    # tp=1 fp=1 fn=1 tn=1
    assert f1_and_acc([1, 1, 0, 0], [1, 0, 1, 0]) == (0.5, 0.5)
    with pytest.raises(ValueError):
        f1_and_acc([], [])


def test_metrics_permutation_invariant(rng):
    probs = rng.random(30)
    labels = (rng.random(30) > 0.5).astype(int)
    perm = rng.permutation(30)
    a = bag_metrics(probs, labels, "test")
    b = bag_metrics(probs[perm], labels[perm], "test")
    assert (a.auc, a.f1, a.acc) == (b.auc, b.f1, b.acc)
    assert 0 <= a.auc <= 1 and 0 <= a.f1 <= 1 and 0 <= a.acc <= 1


def test_projection_identity():
    inst = np.array([[0.0, 1.0], [2.0, 3.0]])
    bags = np.array([[1.0, 2.0]])
    exp = project_embeddings(inst, bags, [0, 1], [1], method="identity")
    np.testing.assert_array_equal(exp.points, np.vstack([inst, bags]))
    assert exp.roles == ("instance-negative", "instance-positive", "bag-positive")


def test_projection_linear_centroid(rng):
    inst = rng.normal(size=(12, 6))
    bag = inst[:5].mean(axis=0, keepdims=True)
    exp = project_embeddings(inst, bag, [0] * 12, [0])
    np.testing.assert_allclose(exp.points[-1], exp.points[:5].mean(axis=0), atol=1e-10)


def test_projection_keeps_clusters_apart(rng):
    a = rng.normal(size=(40, 8))
    b = rng.normal(size=(40, 8)) + 6.0
    exp = project_embeddings(np.vstack([a, b]), np.vstack([a.mean(0), b.mean(0)]), [0] * 40 + [1] * 40, [0, 1])
    pa, pb = exp.points[:40], exp.points[40:80]
    between = np.linalg.norm(pa.mean(0) - pb.mean(0))
    within = np.mean([np.linalg.norm(p - q) for p in pa[:10] for q in pa[10:20]])
    assert between > within


def test_projection_deterministic_and_errors(rng, tmp_path):
    inst = rng.normal(size=(10, 4))
    bags = rng.normal(size=(2, 4))
    a = project_embeddings(inst, bags, [0] * 10, [0, 1])
    b = project_embeddings(inst, bags, [0] * 10, [0, 1])
    np.testing.assert_array_equal(a.points, b.points)
    write_projection_csv(a, tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x,y,role,bag_id" and len(lines) == 13
    with pytest.raises(ValueError):
        project_embeddings(inst[:, :1], bags[:, :1], [0] * 10, [0, 1])
