import numpy as np
import pytest

from qpr.annindex import IndexFormatError, IvfIndex, exact_search, kmeans_train


@pytest.fixture(scope="module")
def clustered():
    rng = np.random.default_rng(0)
    means = rng.normal(size=(20, 8)) * 4
    X = (means[rng.integers(20, size=3000)] + rng.normal(size=(3000, 8))).astype(np.float32)
    index = IvfIndex.train(X, 30, seed=1)
    index.add_batch(np.arange(len(X)), X)
    return X, index, rng.normal(size=(50, 8)) * 3


def test_kmeans_fixed_point():
    c = kmeans_train(np.array([[0.0], [10.0]]), 2, seed=3)
    assert sorted(c[:, 0].tolist()) == [0.0, 10.0]


def test_kmeans_single_centroid_is_mean():
    x = np.random.default_rng(1).normal(size=(50, 3))
    np.testing.assert_allclose(kmeans_train(x, 1)[0], x.mean(0), atol=1e-12)


def test_kmeans_objective_non_increasing_and_deterministic():
    x = np.random.default_rng(2).normal(size=(500, 4))
    hist = []
    c1 = kmeans_train(x, 12, iters=25, seed=5, history=hist)
    assert len(hist) >= 2
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))
    np.testing.assert_array_equal(c1, kmeans_train(x, 12, iters=25, seed=5))


def test_kmeans_reseeds_empty_clusters():
    x = np.vstack([np.zeros((10, 2)), [[5.0, 5.0]], [[6.0, 5.0]]])
    c = kmeans_train(x, 3, seed=0)
    assert np.isfinite(c).all() and len(np.unique(c, axis=0)) == 3


def test_kmeans_sample_too_small():
    with pytest.raises(ValueError):
        kmeans_train(np.zeros((3, 2)), 4)


def test_add_then_search_same_vector():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(100, 4)).astype(np.float32)
    index = IvfIndex.train(X, 5)
    for i, v in enumerate(X):
        index.add(i, v)
    res = index.search(X[17], k=3, nprobe=5)
    assert res[0] == (17, 0.0)
    assert index.total_count == 100


def test_add_errors():
    index = IvfIndex(np.zeros((1, 3)))
    index.add(1, np.ones(3))
    with pytest.raises(ValueError, match="duplicate"):
        index.add(1, np.zeros(3))
    with pytest.raises(ValueError, match="dimension"):
        index.add(2, np.zeros(4))
    with pytest.raises(ValueError):
        index.search(np.zeros(3), 1, nprobe=2)


def test_empty_index_search():
    assert IvfIndex(np.zeros((2, 3))).search(np.zeros(3), 5, 2) == []
    assert exact_search(np.array([]), np.zeros((0, 3)), np.zeros(3), 5) == []


def test_short_result_when_few_candidates():
    index = IvfIndex(np.zeros((1, 2)))
    index.add_batch([3, 4], np.eye(2))
    assert [i for i, _ in index.search(np.zeros(2), 10, 1)] == [3, 4]


def test_exact_search_basics():
    assert exact_search([9], np.ones((1, 2)), np.zeros(2), 3) == [(9, 2.0)]
    X = np.random.default_rng(1).normal(size=(20, 3))
    assert exact_search(np.arange(20), X, X[4], 1)[0] == (4, 0.0)


def test_tie_break_by_id():
    index = IvfIndex(np.zeros((1, 1)))
    index.add_batch([5, 2, 9], np.array([[1.0], [-1.0], [1.0]]))
    assert index.search(np.zeros(1), 3, 1) == [(2, 1.0), (5, 1.0), (9, 1.0)]


def test_add_order_independent(clustered):
    X, index, queries = clustered
    perm = np.random.default_rng(3).permutation(len(X))
    other = IvfIndex(index.centroids)
    other.add_batch(perm, X[perm])
    for q in queries[:10]:
        assert other.search(q, 10, 7) == index.search(q, 10, 7)


def test_full_probe_equals_exact(clustered):
    X, index, queries = clustered
    rng = np.random.default_rng(4)
    for q in np.vstack([queries, X[rng.integers(len(X), size=50)]]):
        assert index.search(q, 20, index.nlist) == exact_search(np.arange(len(X)), X, q, 20)


def test_partition_invariant(clustered):
    X, index, _ = clustered
    sizes = index.list_sizes()
    assert sum(sizes) == index.total_count == len(X)
    for j in range(index.nlist):
        ids, vecs = index.inverted_list(j)
        assert (index.assign(vecs) == j).all()
        np.testing.assert_array_equal(vecs, X[ids])


def test_recall_monotone_in_nprobe(clustered):
    X, index, queries = clustered
    truth = [{i for i, _ in exact_search(np.arange(len(X)), X, q, 20)} for q in queries]
    recalls = []
    for nprobe in (1, 2, 4, 8, 16, 30):
        hits = sum(len({i for i, _ in index.search(q, 20, nprobe)} & t) for q, t in zip(queries, truth))
        recalls.append(hits / (20 * len(queries)))
    assert recalls == sorted(recalls)
    assert recalls[-1] == 1.0


def test_distances_are_exact(clustered):
    X, index, queries = clustered
    for i, d in index.search(queries[0], 20, 5):
        assert d == pytest.approx(float(((X[i].astype(np.float64) - queries[0]) ** 2).sum()), rel=1e-5)


def test_save_load_round_trip(tmp_path, clustered):
    X, index, queries = clustered
    path = tmp_path / "ivf.bin"
    index.save(path)
    again = IvfIndex.load(path)
    for q in queries[:10]:
        assert again.search(q, 20, 8) == index.search(q, 20, 8)
    again.save(tmp_path / "ivf2.bin")
    assert path.read_bytes() == (tmp_path / "ivf2.bin").read_bytes()


def test_empty_index_round_trip(tmp_path):
    index = IvfIndex(np.arange(6, dtype=np.float32).reshape(2, 3))
    index.save(tmp_path / "e.bin")
    again = IvfIndex.load(tmp_path / "e.bin")
    assert again.total_count == 0 and again.nlist == 2
    np.testing.assert_array_equal(again.centroids, index.centroids)


def test_load_rejects_corruption(tmp_path, clustered):
    _, index, _ = clustered
    path = tmp_path / "ivf.bin"
    index.save(path)
    data = path.read_bytes()
    (tmp_path / "magic.bin").write_bytes(b"NOTANIDX" + data[8:])
    with pytest.raises(IndexFormatError, match="magic"):
        IvfIndex.load(tmp_path / "magic.bin")
    (tmp_path / "trunc.bin").write_bytes(data[:-5])
    with pytest.raises(IndexFormatError, match="truncated"):
        IvfIndex.load(tmp_path / "trunc.bin")
    (tmp_path / "ver.bin").write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(IndexFormatError, match="version"):
        IvfIndex.load(tmp_path / "ver.bin")
