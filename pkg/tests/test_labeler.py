import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zspe.geometry import GeometryError
from zspe.labeler import EmbeddingMatrix, SimilarityTensor, assign, filter_masks, similarity


def templates(rows, n_obj, n_view):
    ids = [(o, v) for o in range(n_obj) for v in range(n_view)]
    return EmbeddingMatrix.normalized(rows, ids)


def brute_assign(values, threshold):
    out = []
    m, n, r = values.shape
    for i in range(m):
        best_obj, best = None, -np.inf
        for j in range(n):
            s = max(values[i, j, k] for k in range(r))
            if s > best:
                best_obj, best = j, s
        if best > threshold:
            out.append((i, best_obj, best))
    return out


def test_identical_and_orthogonal_rows():
    t = templates(np.eye(4), 2, 2)
    s = EmbeddingMatrix(np.eye(4)[[1, 2]], (0, 1))
    v = similarity(s, t).values
    assert v[0, 0, 1] == 1.0 and v[1, 1, 0] == 1.0
    assert v[0, 1, 0] == 0.0


def test_similarity_equals_loop():
    rng = np.random.default_rng(0)
    t = templates(rng.normal(size=(8, 5)), 2, 4)
    s = EmbeddingMatrix.normalized(rng.normal(size=(3, 5)), (0, 1, 2))
    v = similarity(s, t).values
    assert v.shape == (3, 2, 4)
    for m in range(3):
        for n in range(2):
            for r in range(4):
                assert v[m, n, r] == pytest.approx(s.rows[m] @ t.rows[n * 4 + r], abs=1e-12)


def test_assign_examples():
    sim = SimilarityTensor(np.array([[[0.9], [0.2]]]), (0,), (0, 1))
    (a,) = assign(sim, 0.5)
    assert a.object_id == 0 and a.score == pytest.approx(0.9)
    assert assign(SimilarityTensor(np.full((2, 2, 2), 0.1), (0, 1), (0, 1)), 0.5) == []


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_assign_matches_oracle_and_invariants(seed):
    rng = np.random.default_rng(seed)
    vals = rng.uniform(-1, 1, (4, 3, 2))
    sim = SimilarityTensor(vals, (0, 1, 2, 3), (0, 1, 2))
    got = [(a.mask_id, a.object_id, a.score) for a in assign(sim, 0.3)]
    assert got == [(i, j, pytest.approx(s)) for i, j, s in brute_assign(vals, 0.3)]
    # raising the threshold never adds assignments
    assert len(assign(sim, 0.6)) <= len(got)
    # view order is irrelevant
    perm = SimilarityTensor(vals[:, :, ::-1], sim.mask_ids, sim.object_ids)
    assert [(a.mask_id, a.object_id) for a in assign(perm, 0.3)] == [g[:2] for g in got]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    rows_t = rng.normal(size=(6, 4))
    rows_s = rng.normal(size=(3, 4))
    scale = rng.uniform(0.1, 10, (3, 1))
    t = templates(rows_t, 3, 2)
    a = assign(similarity(EmbeddingMatrix.normalized(rows_s, (0, 1, 2)), t), 0.2)
    b = assign(similarity(EmbeddingMatrix.normalized(rows_s * scale, (0, 1, 2)), t), 0.2)
    assert [(x.mask_id, x.object_id) for x in a] == [(x.mask_id, x.object_id) for x in b]


def test_validation():
    with pytest.raises(GeometryError):
        EmbeddingMatrix(np.ones((2, 2)), (0, 1))
    with pytest.raises(GeometryError):
        EmbeddingMatrix.normalized(np.zeros((1, 2)), (0,))
    t = templates(np.eye(3), 3, 1)
    with pytest.raises(GeometryError):
        similarity(EmbeddingMatrix(np.eye(4)[:1], (0,)), t)
    with pytest.raises(GeometryError):
        assign(SimilarityTensor(np.zeros((1, 1, 1)), (0,), (0,)), 1.0)


def test_filter_masks_boundary():
    def mask(n):
        m = np.zeros((20, 20), bool)
        m.flat[:n] = True
        return m
    kept = filter_masks([mask(199), mask(200), mask(350)], 200)
    assert [int(m.sum()) for m in kept] == [200, 350]
    assert len(filter_masks([mask(0), mask(5)], 0)) == 2
