import numpy as np
import pytest

from pseudoflow.errors import ContractError, QueryError
from pseudoflow.flowinit import LabelSet, coarse_upsample


def _idw_oracle(P, labels, k):
    out = np.empty((len(P), 3))
    lab = set(labels.indices.tolist())
    for i in range(len(P)):
        if i in lab:
            out[i] = labels.flows[labels.indices.tolist().index(i)]
            continue
        d = sorted((np.linalg.norm(P[i] - P[j]), t) for t, j in enumerate(labels.indices))[:k]
        zero = [labels.flows[t] for dist, t in d if dist == 0]
        if zero:
            out[i] = np.mean(zero, axis=0)
            continue
        w = np.array([1 / dist for dist, _ in d])
        out[i] = (w[:, None] * labels.flows[[t for _, t in d]]).sum(axis=0) / w.sum()
    return out


def test_constant_labels_copy_exactly():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(50, 3))
    t = np.array([0.1, -0.3, 0.7])
    labels = LabelSet(np.arange(0, 50, 5), np.tile(t, (10, 1)))
    out = coarse_upsample(P, labels, k=4)
    assert np.array_equal(out, np.tile(t, (50, 1)))


def test_hand_computed_weights():
    P = np.array([[0.0, 0, 0], [3.0, 0, 0], [1.0, 0, 0]])
    labels = LabelSet([0, 1], [[0, 0, 0], [3, 0, 0]])
    out = coarse_upsample(P, labels, k=2)
    np.testing.assert_allclose(out[2], [1.0, 0, 0], rtol=0, atol=1e-15)


def test_coincident_label_is_copied():
    P = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 0, 0]])
    labels = LabelSet([0, 1], [[0.5, 0.25, 0], [2, 2, 2]])
    out = coarse_upsample(P, labels, k=2)
    assert np.array_equal(out[2], [0.5, 0.25, 0])


def test_several_coincident_labels_averaged():
    P = np.array([[0.0, 0, 0], [0.0, 0, 0], [5.0, 0, 0], [0.0, 0, 0]])
    labels = LabelSet([0, 1, 2], [[1, 0, 0], [3, 0, 0], [9, 9, 9]])
    out = coarse_upsample(P, labels, k=3)
    np.testing.assert_allclose(out[3], [2, 0, 0])


def test_matches_loop_oracle_and_preserves_labels():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(120, 3))
    idx = np.sort(rng.choice(120, 15, replace=False))
    labels = LabelSet(idx, rng.normal(size=(15, 3)))
    out = coarse_upsample(P, labels, k=8)
    np.testing.assert_allclose(out, _idw_oracle(P, labels, 8), rtol=1e-12, atol=1e-14)
    assert np.array_equal(out[idx], labels.flows)


def test_convexity_over_neighbors():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(200, 3))
    idx = np.sort(rng.choice(200, 20, replace=False))
    labels = LabelSet(idx, rng.normal(size=(20, 3)))
    out = coarse_upsample(P, labels, k=5)
    for i in labels.unlabeled(200):
        d = np.linalg.norm(P[idx] - P[i], axis=1)
        nb = labels.flows[np.argsort(d, kind="stable")[:5]]
        assert np.all(out[i] >= nb.min(axis=0)) and np.all(out[i] <= nb.max(axis=0))


def test_translation_invariant():
    rng = np.random.default_rng(3)
    P = rng.normal(size=(60, 3))
    labels = LabelSet(np.arange(0, 60, 6), rng.normal(size=(10, 3)))
    a = coarse_upsample(P, labels, k=3)
    b = coarse_upsample(P + np.array([4.0, -2.0, 1.0]), labels, k=3)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)


def test_errors():
    P = np.zeros((4, 3))
    with pytest.raises(QueryError):
        coarse_upsample(P + np.arange(4)[:, None], LabelSet([0, 1], np.zeros((2, 3))), k=3)
    with pytest.raises(ContractError):
        coarse_upsample(P, LabelSet([], np.zeros((0, 3))), k=1)
    with pytest.raises(ContractError):
        coarse_upsample(P, LabelSet([0, 1, 2, 3], np.zeros((4, 3))), k=1)
    with pytest.raises(ContractError):
        LabelSet([0, 1], np.zeros((3, 3)))
