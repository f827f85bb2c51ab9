"""Sparse graph representation and the spectral/stochastic operators built from it."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, GraphError

DEFAULT_LAMBDA_MAX = 2.0


class SparseMatrix:
    """Immutable CSR matrix.

    Row pointers are non-decreasing, column indices sorted within each row
    with no duplicates. Values are float64.
    """

    __slots__ = ("indptr", "indices", "values", "shape", "_csr", "_transposed")

    def __init__(self, indptr, indices, values, shape, validate: bool = True):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.shape = (int(shape[0]), int(shape[1]))
        self._csr = None
        self._transposed = None
        if validate:
            self._validate()
        for arr in (self.indptr, self.indices, self.values):
            arr.setflags(write=False)

    def _validate(self) -> None:
        rows, cols = self.shape
        if self.indptr.shape != (rows + 1,):
            raise GraphError(f"indptr length {self.indptr.shape[0]} != rows+1 ({rows + 1})")
        if self.indptr[0] != 0 or self.indptr[-1] != self.indices.shape[0]:
            raise GraphError("indptr endpoints do not match index array length")
        if np.any(np.diff(self.indptr) < 0):
            raise GraphError("row pointers must be non-decreasing")
        if self.indices.shape != self.values.shape:
            raise GraphError("indices and values length mismatch")
        if self.indices.size:
            if self.indices.min() < 0 or self.indices.max() >= cols:
                raise GraphError("column index out of range")
        for r in range(rows):
            row = self.indices[self.indptr[r]:self.indptr[r + 1]]
            if row.size > 1:
                d = np.diff(row)
                if np.any(d < 0):
                    raise GraphError(f"row {r}: column indices not sorted")
                if np.any(d == 0):
                    raise GraphError(f"row {r}: duplicate column index")

    @classmethod
    def from_scipy(cls, m, validate: bool = False) -> "SparseMatrix":
        csr = m.tocsr()
        csr.sort_indices()
        return cls(csr.indptr, csr.indices, csr.data, csr.shape, validate=validate)

    @property
    def nnz(self) -> int:
        return int(self.indices.shape[0])

    def csr(self) -> sp.csr_matrix:
        if self._csr is None:
            self._csr = sp.csr_matrix(
                (self.values, self.indices, self.indptr), shape=self.shape
            )
        return self._csr

    def transposed(self) -> "SparseMatrix":
        if self._transposed is None:
            t = SparseMatrix.from_scipy(self.csr().T)
            t._transposed = self
            self._transposed = t
        return self._transposed

    def dot_dense(self, x: np.ndarray) -> np.ndarray:
        return self.csr().dot(x)

    def to_dense(self) -> np.ndarray:
        return self.csr().toarray()


class SparseGraph:
    """Immutable undirected graph: CSR adjacency, node features, node labels.

    Labels are integers in [0, num_classes); -1 marks an unlabeled node.
    Stored adjacency has no self-loops and is symmetric when undirected.
    """

    UNLABELED = -1

    def __init__(
        self,
        adjacency: SparseMatrix,
        features: np.ndarray,
        labels: np.ndarray,
        num_classes: int,
        undirected: bool = True,
    ):
        self.adjacency = adjacency
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.num_classes = int(num_classes)
        self.undirected = bool(undirected)
        self._validate()
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def _validate(self) -> None:
        n = self.adjacency.shape[0]
        if self.adjacency.shape != (n, n):
            raise GraphError("adjacency must be square")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise GraphError(
                f"features shape {self.features.shape} does not match n={n}"
            )
        if self.labels.shape != (n,):
            raise GraphError("labels must be a length-n vector")
        labeled = self.labels[self.labels != self.UNLABELED]
        if labeled.size and (labeled.min() < 0 or labeled.max() >= self.num_classes):
            raise GraphError("labeled node with label outside [0, num_classes)")
        if np.any(self.adjacency.values < 0):
            raise GraphError("edge weights must be non-negative")
        csr = self.adjacency.csr()
        if csr.diagonal().any():
            raise GraphError("self-loops are not allowed in the stored adjacency")
        if self.undirected:
            diff = abs(csr - csr.T)
            if diff.nnz and diff.max() > 0:
                raise GraphError("undirected graph has an asymmetric adjacency")

    @classmethod
    def from_edges(
        cls,
        n: int,
        edges: np.ndarray,
        weights: np.ndarray | None = None,
        features: np.ndarray | None = None,
        labels: np.ndarray | None = None,
        num_classes: int = 1,
        undirected: bool = True,
    ) -> "SparseGraph":
        """Build a graph from an (m, 2) node-pair array.

        Undirected inputs are symmetrized; duplicate pairs and self-loops
        are rejected.
        """
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        m = edges.shape[0]
        if weights is None:
            weights = np.ones(m, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        if m:
            if edges.min() < 0 or edges.max() >= n:
                raise GraphError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise GraphError("self-loop in edge list")
        rows, cols, vals = edges[:, 0], edges[:, 1], weights
        if undirected:
            rows = np.concatenate([rows, cols])
            cols = np.concatenate([cols, edges[:, 0]])
            vals = np.concatenate([vals, weights])
        coo = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
        keys = rows * n + cols
        if np.unique(keys).size != keys.size:
            raise GraphError("duplicate edge in edge list")
        if features is None:
            features = np.zeros((n, 1), dtype=np.float64)
        if labels is None:
            labels = np.full(n, cls.UNLABELED, dtype=np.int64)
        return cls(
            SparseMatrix.from_scipy(coo), features, labels, num_classes, undirected
        )


def degree_vector(g: SparseGraph) -> np.ndarray:
    """Weighted degree of every node; isolated nodes get 0."""
    return np.asarray(g.adjacency.csr().sum(axis=1)).ravel()


def normalized_laplacian(g: SparseGraph) -> SparseMatrix:
    """I - D^{-1/2} A D^{-1/2}, with identity rows for isolated nodes."""
    deg = degree_vector(g)
    inv_sqrt = np.zeros_like(deg)
    pos = deg > 0
    inv_sqrt[pos] = 1.0 / np.sqrt(deg[pos])
    a = g.adjacency.csr()
    scaled = a.multiply(inv_sqrt[:, None]).multiply(inv_sqrt[None, :])
    lap = (sp.eye(g.n, format="csr") - scaled).tocsr()
    lap.sort_indices()
    return SparseMatrix.from_scipy(lap)


def scaled_laplacian(lap: SparseMatrix, lambda_max: float = DEFAULT_LAMBDA_MAX) -> SparseMatrix:
    """2 L / lambda_max - I on L's sparsity pattern, diagonal kept explicit."""
    if not lambda_max > 0:
        raise ConfigError(f"lambda_max must be positive, got {lambda_max}")
    n = lap.shape[0]
    if lap.shape[1] != n:
        raise GraphError("scaled_laplacian expects a square matrix")
    values = lap.values * (2.0 / lambda_max)
    indptr, indices = lap.indptr, lap.indices
    out = values.copy()
    missing_diag = []
    for r in range(n):
        lo, hi = indptr[r], indptr[r + 1]
        pos = np.searchsorted(indices[lo:hi], r)
        if pos < hi - lo and indices[lo + pos] == r:
            out[lo + pos] -= 1.0
        else:
            missing_diag.append(r)
    if not missing_diag:
        return SparseMatrix(indptr, indices, out, lap.shape, validate=False)
    base = sp.csr_matrix((out, indices, indptr), shape=lap.shape)
    diag = sp.coo_matrix(
        (-np.ones(len(missing_diag)), (missing_diag, missing_diag)), shape=lap.shape
    )
    return SparseMatrix.from_scipy(base + diag)


def transition_matrix(g: SparseGraph) -> SparseMatrix:
    """Row-stochastic random-walk matrix D^{-1} A; zero rows for isolated nodes."""
    deg = degree_vector(g)
    inv = np.zeros_like(deg)
    pos = deg > 0
    inv[pos] = 1.0 / deg[pos]
    p = g.adjacency.csr().multiply(inv[:, None]).tocsr()
    p.sort_indices()
    return SparseMatrix.from_scipy(p)


def power_iteration_lambda_max(
    lap: SparseMatrix, iters: int = 50, tol: float = 1e-6
) -> float:
    """Largest-magnitude eigenvalue estimate of a symmetric PSD matrix."""
    n = lap.shape[0]
    csr = lap.csr()
    v = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    for _ in range(iters):
        w = csr.dot(v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new_est = float(v @ csr.dot(v))
        if abs(new_est - est) < tol:
            return new_est
        est = new_est
    return est
