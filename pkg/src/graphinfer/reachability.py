"""Multi-step random-walk reachability between reference nodes and all others.

The walk-probability vectors are computed by repeated vector-matrix products
against the transition matrix; dense matrix powers are never formed outside
the test oracle.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.sparse import csgraph

from .errors import ConfigError, DatasetError, GraphError
from .graphs import SparseGraph, SparseMatrix, transition_matrix
from .hashing import fnv1a64

DP_MIN = 2
DP_MAX = 10
FULL_BFS_LIMIT = 5000

_CACHE_MAGIC = b"GIRTABLE"
_CACHE_VERSION = 1


class ReachabilityTable:
    """Step-wise reach probabilities from a fixed reference set to all nodes.

    probs[r, j, t-1] is the probability that a t-step walk started at
    reference r ends at node j. Stored reference-major and immutable.
    """

    def __init__(self, reference_ids, d_p: int, probs: np.ndarray, validate: bool = True):
        self.reference_ids = np.ascontiguousarray(reference_ids, dtype=np.int64)
        self.d_p = int(d_p)
        self.probs = np.ascontiguousarray(probs, dtype=np.float64)
        self._index = {int(r): i for i, r in enumerate(self.reference_ids)}
        if validate:
            self._validate()
        self.reference_ids.setflags(write=False)
        self.probs.setflags(write=False)

    def _validate(self) -> None:
        if self.d_p < 1:
            raise ConfigError(f"d_p must be >= 1, got {self.d_p}")
        if len(self._index) != self.reference_ids.size:
            raise GraphError("duplicate reference ids")
        r, n = self.probs.shape[0], self.probs.shape[1]
        if self.probs.shape != (self.reference_ids.size, n, self.d_p):
            raise GraphError(f"probs shape {self.probs.shape} inconsistent with table")
        if self.probs.size:
            if self.probs.min() < 0.0 or self.probs.max() > 1.0:
                raise GraphError("walk probabilities outside [0, 1]")
            step_sums = self.probs.sum(axis=1)
            if step_sums.max(initial=0.0) > 1.0 + 1e-9:
                raise GraphError("per-step probabilities sum above 1")

    @property
    def num_references(self) -> int:
        return int(self.reference_ids.size)

    @property
    def num_nodes(self) -> int:
        return int(self.probs.shape[1])

    def index_of(self, node: int) -> int:
        return self._index[int(node)]

    def pair_vector(self, ref: int, query: int) -> np.ndarray:
        """f(ref, query): walk probabilities for steps 1..d_p."""
        return self.probs[self.index_of(ref), int(query), :]

    def features_for(self, queries) -> np.ndarray:
        """(num_references, len(queries), d_p) block for a query batch."""
        queries = np.asarray(queries, dtype=np.int64)
        return self.probs[:, queries, :]

    def save(self, path, dataset_hash: int = 0) -> None:
        refset_hash = fnv1a64(self.reference_ids.tobytes())
        header = struct.pack(
            "<8sIQQIIi",
            _CACHE_MAGIC,
            _CACHE_VERSION,
            dataset_hash,
            refset_hash,
            self.num_references,
            self.num_nodes,
            self.d_p,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.reference_ids.astype("<i8").tobytes())
            fh.write(self.probs.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, expect_dataset_hash: int | None = None) -> "ReachabilityTable":
        with open(path, "rb") as fh:
            raw = fh.read(struct.calcsize("<8sIQQIIi"))
            magic, version, ds_hash, refset_hash, nref, n, d_p = struct.unpack(
                "<8sIQQIIi", raw
            )
            if magic != _CACHE_MAGIC:
                raise DatasetError(f"{path}: not a reachability cache file")
            if version != _CACHE_VERSION:
                raise DatasetError(f"{path}: unsupported cache version {version}")
            if expect_dataset_hash is not None and ds_hash != expect_dataset_hash:
                raise DatasetError(f"{path}: cache was built for a different dataset")
            refs = np.frombuffer(fh.read(8 * nref), dtype="<i8")
            probs = np.frombuffer(fh.read(8 * nref * n * d_p), dtype="<f8")
        if probs.size != nref * n * d_p:
            raise DatasetError(f"{path}: truncated cache payload")
        if fnv1a64(refs.astype(np.int64).tobytes()) != refset_hash:
            raise DatasetError(f"{path}: reference set does not match header hash")
        return cls(refs, d_p, probs.reshape(nref, n, d_p))


def estimate_dp(g: SparseGraph, sample_size: int = 100, seed: int = 0) -> int:
    """Mean finite shortest-path length (hops) over sampled source nodes.

    BFS runs from min(sample_size, n) uniformly sampled sources; the mean over
    all reached ordered pairs (self excluded) is rounded to the nearest
    integer and clamped to [2, 10]. An edgeless graph yields the minimum.
    """
    if sample_size < 1:
        raise ConfigError("sample_size must be >= 1")
    n = g.n
    rng = np.random.default_rng(seed)
    k = min(sample_size, n)
    sources = np.sort(rng.choice(n, size=k, replace=False))
    dist = csgraph.dijkstra(
        g.adjacency.csr(), directed=False, unweighted=True, indices=sources
    )
    finite = dist[np.isfinite(dist) & (dist > 0)]
    if finite.size == 0:
        return DP_MIN
    mean = float(finite.mean())
    return int(np.clip(int(np.floor(mean + 0.5)), DP_MIN, DP_MAX))


def default_dp_sample_size(n: int, sampled: int = 100) -> int:
    """Full BFS below the tractability cutoff, sampled sources above it."""
    return n if n <= FULL_BFS_LIMIT else sampled


def reach_from_many(p: SparseMatrix, sources, d_p: int) -> np.ndarray:
    """(len(sources), n, d_p) walk probabilities via iterated v <- v P."""
    if d_p < 1:
        raise ConfigError(f"d_p must be >= 1, got {d_p}")
    n = p.shape[0]
    sources = np.asarray(sources, dtype=np.int64)
    csr = p.csr()
    v = np.zeros((sources.size, n))
    v[np.arange(sources.size), sources] = 1.0
    out = np.empty((sources.size, n, d_p))
    for t in range(d_p):
        v = v @ csr
        out[:, :, t] = v
    return out


def reach_from(p: SparseMatrix, source: int, d_p: int) -> np.ndarray:
    """(n, d_p) array whose column t-1 holds e_source P^t."""
    if not 0 <= source < p.shape[0]:
        raise GraphError(f"source {source} out of range for n={p.shape[0]}")
    return reach_from_many(p, [source], d_p)[0]


def build_table(g: SparseGraph, references, d_p: int) -> ReachabilityTable:
    """Reachability table for a reference node set; rejects duplicate ids."""
    references = np.asarray(references, dtype=np.int64)
    if references.size == 0:
        raise ConfigError("reference set must be non-empty")
    if np.unique(references).size != references.size:
        raise ConfigError("duplicate reference ids")
    if references.min() < 0 or references.max() >= g.n:
        raise GraphError("reference id out of range")
    p = transition_matrix(g)
    probs = reach_from_many(p, references, d_p)
    return ReachabilityTable(references, d_p, probs)


def dense_power_oracle(g: SparseGraph, d_p: int) -> np.ndarray:
    """Explicit dense P, P^2, ..., P^{d_p} as an (n, n, d_p) array.

    Test oracle only; refuses graphs above 64 nodes.
    """
    if g.n > 64:
        raise ConfigError(f"dense power oracle limited to n <= 64, got n={g.n}")
    p = transition_matrix(g).to_dense()
    out = np.empty((g.n, g.n, d_p))
    acc = np.eye(g.n)
    for t in range(d_p):
        acc = acc @ p
        out[:, :, t] = acc
    return out
