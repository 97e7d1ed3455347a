import itertools
import os

import numpy as np
from sklearn.metrics import adjusted_rand_score

from semantic_ids.embedding_store import EmbeddingMatrix
from semantic_ids.quantizer import (KMeansModel, QuantizerException, QuantizerKind, RQCodebooks, disambiguate,
                                    encode_items, fit_codebooks, kmeans_fit, load_codebooks, rlfq_fit, rq_decode,
                                    rq_encode, rq_encode_batch, rq_fit, save_codebooks)

four_points = np.array([[0, 0], [0, 1], [10, 0], [10, 1]], dtype=np.float64)

def _codebooks(*levels):
    models = [KMeansModel(np.asarray(c, dtype=np.float32), 0.0, 0) for c in levels]
    return RQCodebooks(QuantizerKind.RQ_KMEANS, models[0].dim, models)

def _best_two_partition(points):
    best = None
    for mask in itertools.product([False, True], repeat=len(points)):
        mask = np.array(mask)
        if mask.all() or not mask.any():
            continue
        cost = sum(((points[m] - points[m].mean(axis=0)) ** 2).sum() for m in (mask, ~mask))
        best = cost if best is None else min(best, cost)
    return best

def test_kmeans_four_points():
    oracle = _best_two_partition(four_points)
    assert oracle == 1.0
    for seed in range(5):
        model = kmeans_fit(four_points, 2, seed=seed)
        assert model.k == 2
        assert abs(model.inertia - oracle) < 1e-9
        centroids = sorted(tuple(c) for c in model.centroids.tolist())
        assert centroids == [(0.0, 0.5), (10.0, 0.5)]

def test_kmeans_degenerate_sizes():
    points = np.array([[0, 0], [1, 0], [0, 3], [5, 5]], dtype=np.float64)
    model = kmeans_fit(points, 4, seed=3)
    assert model.inertia == 0.0
    assert sorted(map(tuple, model.centroids.tolist())) == sorted(map(tuple, points.tolist()))

    single = kmeans_fit(np.array([[2.0, -1.0]]), 1)
    assert single.inertia == 0.0
    assert single.centroids.tolist() == [[2.0, -1.0]]

def test_kmeans_clamps_k():
    model = kmeans_fit(four_points[:3], 10)
    assert model.k == 3
    assert model.requested_k == 10
    assert model.inertia == 0.0

def test_kmeans_rejects_bad_input():
    for points, K in ((np.zeros((0, 2)), 1), (four_points, 0)):
        try:
            kmeans_fit(points, K)
        except QuantizerException:
            pass
        else:
            assert False

def test_kmeans_recovers_blobs():
    centers = np.array([[0, 0], [3, 0], [0, 3], [3, 3]], dtype=np.float64)
    truth = np.repeat(np.arange(4), 50)
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        points = centers[truth] + 0.05 * rng.standard_normal((len(truth), 2))
        model = kmeans_fit(points, 4, seed=seed)
        labels, _ = model.assign(points)
        assert adjusted_rand_score(truth, labels) == 1.0

def test_kmeans_trace_is_monotone():
    rng = np.random.default_rng(7)
    for _ in range(10):
        points = rng.standard_normal((300, 5))
        model = kmeans_fit(points, 8, seed=int(rng.integers(1000)))
        trace = np.array(model.trace)
        assert len(trace) >= 1
        assert np.all(np.diff(trace) <= 1e-9 * trace[0])

def test_rq_default_budget():
    rng = np.random.default_rng(0)
    cb = rq_fit(EmbeddingMatrix(rng.standard_normal((300, 4))), max_iters=5)
    assert cb.depth == 2
    assert cb.level_sizes == (256, 256)
    assert sum(cb.level_sizes) == 512

def test_rq_perfect_codebook():
    rows = np.array([[1, 0, 0], [0, 2, 0], [0, 0, 3], [1, 1, 1]], dtype=np.float64)
    M = EmbeddingMatrix(np.repeat(rows, 3, axis=0))
    cb = rq_fit(M, L=1, K=4)
    assert cb.level_mse == (0.0,)
    assert cb.max_row_sq_error == 0.0

def test_rq_mse_is_non_increasing():
    rng = np.random.default_rng(11)
    for _ in range(20):
        M = EmbeddingMatrix(rng.standard_normal((200, 8)))
        for cb in (rq_fit(M, L=3, K=4, seed=int(rng.integers(100))), rlfq_fit(M, L=3)):
            start = (M.data.astype(np.float64) ** 2).sum(axis=1).mean()
            mse = (start,) + cb.level_mse
            for before, after in zip(mse, mse[1:]):
                assert after <= before * (1 + 1e-6)

def test_rq_mse_matches_recomputation():
    rng = np.random.default_rng(5)
    M = EmbeddingMatrix(rng.standard_normal((200, 8)))
    cb = rq_fit(M, L=3, K=4)
    codes = rq_encode_batch(M, cb)
    data = M.data.astype(np.float64)
    reconstruction = np.zeros_like(data)
    for level in range(3):
        reconstruction += cb.codewords(level, codes[:, level])
        mse = ((data - reconstruction) ** 2).sum(axis=1).mean()
        assert abs(mse - cb.level_mse[level]) <= 1e-6 * max(1.0, mse)

def test_rq_fit_is_deterministic():
    rng = np.random.default_rng(2)
    M = EmbeddingMatrix(rng.standard_normal((120, 6)))
    a = rq_fit(M, L=2, K=8, seed=4)
    b = rq_fit(M, L=2, K=8, seed=4)
    for x, y in zip(a.models, b.models):
        assert np.array_equal(x.centroids, y.centroids)
    assert a.level_mse == b.level_mse

def test_encode_exact_centroid():
    cb = _codebooks(10.0 * np.eye(8))
    assert rq_encode(10.0 * np.eye(8)[7], cb) == (7,)

def test_encode_two_levels_matches_exhaustive_search():
    first, second = 10.0 * np.eye(8), np.eye(8)
    cb = _codebooks(first, second)
    for a, b in ((0, 1), (3, 3), (7, 2)):
        v = first[a] + second[b]
        assert rq_encode(v, cb) == (a, b)
        brute = min(itertools.product(range(8), range(8)),
                    key=lambda ab: ((v - first[ab[0]] - second[ab[1]]) ** 2).sum())
        assert brute == (a, b)

def test_encode_ties_pick_lowest_index():
    centroids = np.full((6, 2), 10.0)
    centroids[3] = (1.0, 0.0)
    centroids[5] = (-1.0, 0.0)
    assert rq_encode(np.zeros(2), _codebooks(centroids)) == (3,)

def test_encode_under_codebook_permutation():
    rng = np.random.default_rng(8)
    centroids = rng.standard_normal((16, 4))
    points = rng.standard_normal((100, 4))
    original = rq_encode_batch(points, _codebooks(centroids))[:, 0]
    for _ in range(5):
        perm = rng.permutation(16)
        permuted = rq_encode_batch(points, _codebooks(centroids[perm]))[:, 0]
        assert np.array_equal(perm[permuted], original)

    tied = np.full((6, 2), 10.0)
    tied[3] = (1.0, 0.0)
    tied[5] = (-1.0, 0.0)
    swap = np.array([0, 1, 2, 5, 4, 3])
    assert rq_encode(np.zeros(2), _codebooks(tied[swap])) == (3,)

def test_encode_rejects_wrong_dimension():
    try:
        rq_encode(np.zeros(3), _codebooks(np.eye(2)))
    except QuantizerException:
        pass
    else:
        assert False

def test_decode():
    centroids = np.arange(12, dtype=np.float64).reshape(4, 3)
    cb = _codebooks(centroids)
    assert rq_decode([2], cb).tolist() == centroids[2].tolist()
    try:
        rq_decode([4], cb)
    except QuantizerException:
        pass
    else:
        assert False

def test_decode_error_within_recorded_bound():
    rng = np.random.default_rng(3)
    M = EmbeddingMatrix(rng.standard_normal((150, 6)))
    cb = rq_fit(M, L=2, K=8)
    data = M.data.astype(np.float64)
    for row in data:
        error = ((row - rq_decode(rq_encode(row, cb), cb)) ** 2).sum()
        assert error <= cb.max_row_sq_error + 1e-9

def test_lfq_exact_sign_match():
    cb = rlfq_fit(EmbeddingMatrix(np.array([[1.0, -1.0]])), L=1)
    assert cb.scales == (1.0,)
    assert cb.level_mse == (0.0,)
    assert cb.level_sizes == (4,)
    assert rq_encode(np.array([1.0, -1.0]), cb) == (1,)
    assert rq_decode([1], cb).tolist() == [1.0, -1.0]

def test_lfq_all_positive_residuals():
    rng = np.random.default_rng(4)
    data = rng.random((50, 5)) + 0.1
    cb = rlfq_fit(EmbeddingMatrix(data), L=1)
    codes = rq_encode_batch(data, cb)[:, 0]
    assert set(codes.tolist()) == {(1 << 5) - 1}
    data = EmbeddingMatrix(data).data.astype(np.float64)
    s = np.abs(data).mean()
    before = (data ** 2).sum(axis=1).mean()
    assert abs(cb.scales[0] - s) < 1e-12
    assert abs((before - cb.level_mse[0]) - 5 * s * s) < 1e-9

def test_lfq_code_width_is_capped():
    rng = np.random.default_rng(6)
    cb = rlfq_fit(EmbeddingMatrix(rng.standard_normal((20, 40))), L=2)
    assert cb.code_width == 16
    assert cb.level_sizes == (1 << 16, 1 << 16)
    codes = rq_encode_batch(rng.standard_normal((20, 40)), cb)
    assert codes.min() >= 0 and codes.max() < 1 << 16

def test_disambiguate():
    assert disambiguate([(1, 2), (3, 4)]) == [(1, 2, 0), (3, 4, 0)]
    assert disambiguate([(5,), (5,), (5,)]) == [(5, 0), (5, 1), (5, 2)]

    rng = np.random.default_rng(9)
    raw = [tuple(row) for row in rng.integers(0, 3, size=(200, 2)).tolist()]
    final = disambiguate(raw)
    assert len(set(final)) == len(final)
    assert [f[:-1] for f in final] == raw

def test_fit_codebooks_dispatch():
    rng = np.random.default_rng(1)
    M = EmbeddingMatrix(rng.standard_normal((40, 4)))
    assert fit_codebooks(QuantizerKind.RQ_KMEANS, M, 2, 4).kind == QuantizerKind.RQ_KMEANS
    assert fit_codebooks(QuantizerKind.RESIDUAL_LFQ, M, 2, 4).kind == QuantizerKind.RESIDUAL_LFQ
    try:
        QuantizerKind.from_string('vq_vae')
    except QuantizerException:
        pass
    else:
        assert False

def test_codebooks_persist(tmp_path):
    rng = np.random.default_rng(12)
    M = EmbeddingMatrix(rng.standard_normal((80, 6)))
    cb = rq_fit(M, L=2, K=5, seed=3)
    path = os.path.join(tmp_path, 'codebooks.bin')
    save_codebooks(path, cb)
    loaded = load_codebooks(path)
    assert loaded.level_sizes == cb.level_sizes
    assert loaded.level_mse == cb.level_mse
    assert loaded.seed == 3
    assert encode_items(M, loaded).codes == encode_items(M, cb).codes
