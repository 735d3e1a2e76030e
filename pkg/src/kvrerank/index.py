"""IVF-flat nearest-neighbor index: k-means coarse quantizer plus inverted lists.

Vectors are L2-normalized on ingestion (zero vectors kept as-is) and ranked
by inner product, so similarity is cosine on the stored corpus. Every result
carries the coarse centroid id of its list; the shard layer keys cache
placement off that id, which is what keeps a one-probe search on a single
storage backend.

Similarities are computed with an elementwise multiply plus a per-row
reduction rather than a matrix-vector product: per-row results then do not
depend on how many candidates are scored together, and ``search`` with all
lists probed reproduces ``brute_force_search`` bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DuplicateChunkError, FormatError, ShapeError
from .hashing import SplitMix64

INDEX_MAGIC = b"HRIV"
INDEX_VERSION = 1


@dataclass(frozen=True)
class Candidate:
    chunk_id: str
    centroid_id: int
    similarity: float


def normalize(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float32)
    norm = np.float32(np.linalg.norm(vec))
    if norm == 0.0:
        return vec.copy()
    return vec / norm


def _similarities(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    # per-row inner product with a size-independent reduction order
    return (matrix * query).sum(axis=1)


def _rank(ids: list[str], centroid_ids: list[int], sims: np.ndarray,
          k: int) -> list[Candidate]:
    order = sorted(range(len(ids)), key=lambda i: (-sims[i], ids[i]))
    return [Candidate(ids[i], centroid_ids[i], float(sims[i])) for i in order[:k]]


def train_kmeans(vectors: np.ndarray, nlist: int, iters: int = 10,
                 seed: int = 0) -> np.ndarray:
    """Lloyd k-means with k-means++ seeding, deterministic for a given seed.

    Empty clusters are repaired by stealing the member farthest from its
    centroid in the currently largest cluster.
    """
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.ndim != 2 or vectors.shape[0] == 0:
        raise ConfigError("vectors must be a non-empty [n, dim] matrix")
    n = vectors.shape[0]
    if nlist < 1:
        raise ConfigError("nlist must be >= 1")
    if nlist > n:
        raise ConfigError(f"nlist ({nlist}) exceeds vector count ({n})")

    rng = SplitMix64(seed)
    v64 = vectors.astype(np.float64)
    centroids = np.empty((nlist, vectors.shape[1]), dtype=np.float64)
    centroids[0] = v64[rng.next_below(n)]
    d2 = ((v64 - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, nlist):
        total = d2.sum()
        if total <= 0.0:
            idx = rng.next_below(n)
        else:
            r = rng.next_unit() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), r, side="right")), n - 1)
        centroids[c] = v64[idx]
        d2 = np.minimum(d2, ((v64 - centroids[c]) ** 2).sum(axis=1))

    for _ in range(iters):
        dists = ((v64[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        assign = _repair_empty(assign, dists, nlist)
        for c in range(nlist):
            members = np.nonzero(assign == c)[0]
            centroids[c] = v64[members].mean(axis=0)
    return centroids.astype(np.float32)


def _repair_empty(assign: np.ndarray, dists: np.ndarray, nlist: int) -> np.ndarray:
    for c in range(nlist):
        if (assign == c).any():
            continue
        sizes = np.bincount(assign, minlength=nlist)
        donor = int(sizes.argmax())
        members = np.nonzero(assign == donor)[0]
        victim = members[int(dists[members, donor].argmax())]
        assign[victim] = c
    return assign


class IvfIndex:
    """Coarse centroids plus per-centroid inverted lists of (chunk_id, vector)."""

    def __init__(self, dim: int, nlist: int):
        if dim < 1 or nlist < 1:
            raise ConfigError("dim and nlist must be >= 1")
        self.dim = dim
        self.nlist = nlist
        self.centroids: np.ndarray | None = None
        self._lists: list[list[tuple[str, np.ndarray]]] = [[] for _ in range(nlist)]
        self._ids: dict[str, int] = {}

    @property
    def trained(self) -> bool:
        return self.centroids is not None

    def __len__(self) -> int:
        return len(self._ids)

    def train(self, vectors: np.ndarray, iters: int = 10, seed: int = 0) -> None:
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != self.dim:
            raise ShapeError(f"training vectors must be [n, {self.dim}]")
        normed = np.stack([normalize(v) for v in vectors])
        self.centroids = train_kmeans(normed, self.nlist, iters=iters, seed=seed)

    def assign(self, vec: np.ndarray) -> int:
        """Nearest centroid by Euclidean distance, ties to the lowest id."""
        if not self.trained:
            raise ConfigError("index is not trained")
        d2 = ((self.centroids - vec) ** 2).sum(axis=1)
        return int(d2.argmin())

    def add(self, chunk_id: str, vector: np.ndarray) -> int:
        if not self.trained:
            raise ConfigError("index is not trained")
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ShapeError(f"vector must have dim {self.dim}")
        if chunk_id in self._ids:
            raise DuplicateChunkError(f"chunk id {chunk_id!r} already indexed")
        vec = normalize(vector)
        centroid_id = self.assign(vec)
        self._lists[centroid_id].append((chunk_id, vec))
        self._ids[chunk_id] = centroid_id
        return centroid_id

    def centroid_of(self, chunk_id: str) -> int:
        return self._ids[chunk_id]

    def stored_items(self):
        """All (chunk_id, centroid_id, stored vector) tuples, list order."""
        for centroid_id, entries in enumerate(self._lists):
            for chunk_id, vec in entries:
                yield chunk_id, centroid_id, vec

    def search(self, query_vec: np.ndarray, k: int, nprobe: int) -> list[Candidate]:
        """Probe the nprobe nearest lists and return the top-k by inner product."""
        if not self.trained:
            raise ConfigError("index is not trained")
        if k < 1:
            raise ConfigError("k must be >= 1")
        if not 1 <= nprobe <= self.nlist:
            raise ConfigError(f"nprobe must be in [1, {self.nlist}]")
        qn = normalize(np.asarray(query_vec, dtype=np.float32))
        d2 = ((self.centroids - qn) ** 2).sum(axis=1)
        probe = np.lexsort((np.arange(self.nlist), d2))[:nprobe]

        ids: list[str] = []
        cents: list[int] = []
        vecs: list[np.ndarray] = []
        for c in probe:
            for chunk_id, vec in self._lists[c]:
                ids.append(chunk_id)
                cents.append(int(c))
                vecs.append(vec)
        if not ids:
            return []
        sims = _similarities(np.stack(vecs), qn)
        return _rank(ids, cents, sims, k)

    def save(self, path) -> None:
        if not self.trained:
            raise ConfigError("index is not trained")
        parts = [INDEX_MAGIC,
                 struct.pack("<HHIQ", INDEX_VERSION, self.dim, self.nlist, len(self))]
        parts.append(np.ascontiguousarray(self.centroids, dtype="<f4").tobytes())
        for entries in self._lists:
            parts.append(struct.pack("<I", len(entries)))
            for chunk_id, vec in entries:
                raw = chunk_id.encode("utf-8")
                parts.append(struct.pack("<H", len(raw)))
                parts.append(raw)
                parts.append(np.ascontiguousarray(vec, dtype="<f4").tobytes())
        with open(path, "wb") as f:
            f.write(b"".join(parts))

    @classmethod
    def load(cls, path) -> "IvfIndex":
        with open(path, "rb") as f:
            data = f.read()
        if data[:4] != INDEX_MAGIC:
            raise FormatError("not an index file (bad magic)")
        version, dim, nlist, count = struct.unpack_from("<HHIQ", data, 4)
        if version != INDEX_VERSION:
            raise FormatError(f"unsupported index version {version}")
        off = 4 + struct.calcsize("<HHIQ")
        index = cls(dim, nlist)
        cen = np.frombuffer(data, dtype="<f4", count=nlist * dim, offset=off)
        index.centroids = cen.reshape(nlist, dim).astype(np.float32)
        off += nlist * dim * 4
        loaded = 0
        for c in range(nlist):
            (length,) = struct.unpack_from("<I", data, off)
            off += 4
            for _ in range(length):
                (id_len,) = struct.unpack_from("<H", data, off)
                off += 2
                chunk_id = data[off:off + id_len].decode("utf-8")
                off += id_len
                vec = np.frombuffer(data, dtype="<f4", count=dim, offset=off)
                off += dim * 4
                index._lists[c].append((chunk_id, vec.astype(np.float32)))
                index._ids[chunk_id] = c
                loaded += 1
        if loaded != count or off != len(data):
            raise FormatError("index file is truncated or inconsistent")
        return index


def brute_force_search(items, query_vec: np.ndarray, k: int) -> list[Candidate]:
    """Exact top-k by inner product over (chunk_id, vector) items.

    Vectors are scored as given (pass stored, already-normalized vectors for
    cosine semantics); the query is normalized the same way ``search``
    normalizes it. Candidates carry centroid id -1.
    """
    items = list(items)
    qn = normalize(np.asarray(query_vec, dtype=np.float32))
    if not items:
        return []
    ids = [chunk_id for chunk_id, _ in items]
    sims = _similarities(np.stack([vec for _, vec in items]).astype(np.float32), qn)
    return _rank(ids, [-1] * len(ids), sims, k)
