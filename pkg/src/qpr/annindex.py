"""Exact and IVF-Flat k-nearest-neighbour search.

Vectors are partitioned by their nearest k-means centroid into inverted
lists and stored unquantized in single precision. A query scans only the
``nprobe`` lists whose centroids are closest and ranks candidates by exact
squared euclidean distance, ties broken by ascending id.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

INDEX_MAGIC = b"QPRIVF\x00\x00"
INDEX_VERSION = 1
_HEADER = struct.Struct("<8sIIIIQ")
_U64 = struct.Struct("<Q")

SearchResult = list[tuple[int, float]]


class IndexFormatError(ValueError):
    pass


def _sq_dists(vectors: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Squared euclidean distances from every float32 row to a float32 ``query``.

    Each row's value depends only on that row, so the index and the exact
    oracle produce bit-identical distances for the same stored vector.
    """
    diff = vectors - query
    return np.einsum("ij,ij->i", diff, diff)


def _top_k(ids: np.ndarray, dists: np.ndarray, k: int) -> SearchResult:
    if ids.size > k:
        kth = np.partition(dists, k - 1)[k - 1]
        keep = dists <= kth
        ids, dists = ids[keep], dists[keep]
    order = np.lexsort((ids, dists))[:k]
    return [(int(ids[i]), float(dists[i])) for i in order]


def exact_search(ids: np.ndarray, vectors: np.ndarray, query: np.ndarray, k: int) -> SearchResult:
    """Linear scan oracle with the same distance and tie rules as :meth:`IvfIndex.search`."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return []
    vecs = np.asarray(vectors, dtype=np.float32)
    q = np.asarray(query, dtype=np.float32)
    return _top_k(ids, _sq_dists(vecs, q), k)


def _assign(vectors: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid (lowest index on ties) and its squared distance, per row."""
    x = vectors.astype(np.float64)
    c = centroids.astype(np.float64)
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    np.maximum(d, 0.0, out=d)
    lab = d.argmin(axis=1)
    return lab, d[np.arange(len(x)), lab]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        np.minimum(closest, ((x - centers[i]) ** 2).sum(1), out=closest)
    return centers


def kmeans_train(
    vectors: np.ndarray,
    nlist: int,
    iters: int = 25,
    seed: int = 0,
    history: list[float] | None = None,
) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    An empty cluster is re-seeded at the point of the largest cluster that lies
    farthest from that cluster's centroid. If ``history`` is given, the
    objective (sum of squared distances to assigned centroids) after every
    assignment step is appended to it.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) < nlist:
        raise ValueError(f"need at least nlist={nlist} training vectors, got {len(x)}")
    if nlist < 1:
        raise ValueError("nlist must be >= 1")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(x, nlist, rng)
    prev = None
    for _ in range(iters):
        lab, d = _assign(x, centers)
        if history is not None:
            history.append(float(d.sum()))
        if prev is not None and np.array_equal(lab, prev):
            break
        prev = lab
        counts = np.bincount(lab, minlength=nlist)
        sums = np.zeros_like(centers)
        np.add.at(sums, lab, x)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        for empty in np.flatnonzero(~nonempty):
            big = int(np.argmax(counts))
            members = np.flatnonzero(lab == big)
            far = members[np.argmax(((x[members] - centers[big]) ** 2).sum(1))]
            centers[empty] = x[far]
            lab[far] = empty
            counts[big] -= 1
            counts[empty] = 1
            centers[big] = x[lab == big].mean(axis=0)
    return centers


class IvfIndex:
    """Inverted-file index with flat (unquantized) float32 storage."""

    def __init__(self, centroids: np.ndarray):
        self.centroids = np.ascontiguousarray(centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or len(self.centroids) == 0:
            raise ValueError("centroids must be a non-empty nlist x dim matrix")
        self.nlist, self.dim = self.centroids.shape
        self._ids = [np.zeros(0, dtype=np.int64) for _ in range(self.nlist)]
        self._vecs = [np.zeros((0, self.dim), dtype=np.float32) for _ in range(self.nlist)]
        self._pending: list[list] = [[] for _ in range(self.nlist)]
        self._known: set[int] = set()

    @classmethod
    def train(cls, sample: np.ndarray, nlist: int, iters: int = 25, seed: int = 0) -> "IvfIndex":
        return cls(kmeans_train(sample, nlist, iters, seed))

    @property
    def total_count(self) -> int:
        return len(self._known)

    def list_sizes(self) -> list[int]:
        self._compact()
        return [len(i) for i in self._ids]

    def inverted_list(self, list_no: int) -> tuple[np.ndarray, np.ndarray]:
        self._compact()
        return self._ids[list_no], self._vecs[list_no]

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        return _assign(np.asarray(vectors, dtype=np.float32), self.centroids)[0]

    def add(self, question_id: int, vector: np.ndarray) -> None:
        self.add_batch(np.array([question_id]), np.asarray(vector)[None, :])

    def add_batch(self, ids, vectors) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        vecs = np.asarray(vectors, dtype=np.float32)
        if vecs.ndim != 2 or vecs.shape[1] != self.dim:
            raise ValueError(f"expected vectors of dimension {self.dim}")
        if len(ids) != len(vecs):
            raise ValueError("ids and vectors differ in length")
        new = ids.tolist()
        if len(set(new)) != len(new) or not self._known.isdisjoint(new):
            raise ValueError("duplicate question id")
        if not np.isfinite(vecs).all():
            raise ValueError("non-finite vector")
        self._known.update(new)
        lab = self.assign(vecs)
        for list_no in np.unique(lab):
            sel = lab == list_no
            self._pending[list_no].append((ids[sel], vecs[sel]))

    def _compact(self) -> None:
        for j, chunks in enumerate(self._pending):
            if chunks:
                self._ids[j] = np.concatenate([self._ids[j]] + [c[0] for c in chunks])
                self._vecs[j] = np.concatenate([self._vecs[j]] + [c[1] for c in chunks])
                chunks.clear()

    def search(self, query: np.ndarray, k: int, nprobe: int) -> SearchResult:
        """The ``k`` nearest stored vectors among the ``nprobe`` closest lists."""
        if not 1 <= nprobe <= self.nlist:
            raise ValueError(f"nprobe must lie in [1, {self.nlist}]")
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.total_count == 0:
            return []
        self._compact()
        q = np.asarray(query, dtype=np.float32)
        cd = _sq_dists(self.centroids, q)
        probe = np.argsort(cd, kind="stable")[:nprobe]
        ids = np.concatenate([self._ids[j] for j in probe])
        if ids.size == 0:
            return []
        vecs = np.concatenate([self._vecs[j] for j in probe])
        return _top_k(ids, _sq_dists(vecs, q), k)

    # Layout (little-endian):
    #   8s magic b"QPRIVF\0\0" | u32 version | u32 dim | u32 nlist | u32 reserved | u64 total
    #   f32 centroids (nlist, dim)
    #   per list: u64 count | i64 ids[count] | f32 vectors (count, dim)
    def save(self, path: str | Path) -> None:
        self._compact()
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.dim, self.nlist, 0, self.total_count))
            fh.write(self.centroids.astype("<f4").tobytes())
            for ids, vecs in zip(self._ids, self._vecs):
                fh.write(_U64.pack(len(ids)))
                fh.write(ids.astype("<i8").tobytes())
                fh.write(vecs.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "IvfIndex":
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise IndexFormatError(f"{path}: truncated index header")
        magic, version, dim, nlist, _, total = _HEADER.unpack_from(data)
        if magic != INDEX_MAGIC:
            raise IndexFormatError(f"{path}: not an index file (bad magic)")
        if version != INDEX_VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        pos = _HEADER.size

        def take(nbytes):
            nonlocal pos
            if pos + nbytes > len(data):
                raise IndexFormatError(f"{path}: truncated index payload")
            chunk = data[pos:pos + nbytes]
            pos += nbytes
            return chunk

        cents = np.frombuffer(take(4 * nlist * dim), dtype="<f4").reshape(nlist, dim)
        index = cls(cents.astype(np.float32))
        for j in range(nlist):
            (count,) = _U64.unpack(take(_U64.size))
            index._ids[j] = np.frombuffer(take(8 * count), dtype="<i8").astype(np.int64)
            index._vecs[j] = np.frombuffer(take(4 * count * dim), dtype="<f4").reshape(count, dim).astype(np.float32)
            index._known.update(index._ids[j].tolist())
        if pos != len(data):
            raise IndexFormatError(f"{path}: trailing bytes after index payload")
        if len(index._known) != total:
            raise IndexFormatError(f"{path}: header count {total} does not match stored entries")
        return index
