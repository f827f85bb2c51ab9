"""Neutral on-disk dataset format: loaders, writers, and split handling.

A dataset is a directory of five files. ``manifest`` is key=value text
carrying counts and per-file FNV-1a checksums; ``edges``, ``features``,
``labels`` and ``splits`` are little-endian binary. Undirected edges are
stored once (u < v) and symmetrized on load.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError
from .graphs import SparseGraph
from .hashing import fnv1a64_hex

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

FEATURES_DENSE = 0
FEATURES_CSR = 1

_DATA_FILES = ("edges", "features", "labels", "splits")
_EDGE_DTYPE = np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<f8")])


@dataclass(frozen=True)
class Split:
    """Disjoint train/validation/test node id lists."""

    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray

    def validate(self, n: int, labels: np.ndarray | None = None) -> None:
        parts = [self.train_ids, self.val_ids, self.test_ids]
        total = np.concatenate(parts) if any(p.size for p in parts) else np.array([])
        if total.size:
            if total.min() < 0 or total.max() >= n:
                raise DatasetError("split contains a node id out of range")
            if np.unique(total).size != total.size:
                raise DatasetError("splits overlap")
        if labels is not None and self.train_ids.size:
            if np.any(labels[self.train_ids] == SparseGraph.UNLABELED):
                raise DatasetError("training split contains an unlabeled node")

    @classmethod
    def of(cls, train, val, test) -> "Split":
        return cls(
            np.asarray(train, dtype=np.int64),
            np.asarray(val, dtype=np.int64),
            np.asarray(test, dtype=np.int64),
        )


@dataclass(frozen=True)
class DatasetMeta:
    name: str
    num_nodes: int
    num_edges: int          # declared count (raw convention of the source data)
    num_edges_stored: int   # deduplicated undirected pairs on disk
    feature_dim: int
    num_classes: int
    directed: bool
    label_rate: float
    row_normalized: bool = False


@dataclass(frozen=True)
class DatasetBundle:
    graph: SparseGraph
    split: Split
    meta: DatasetMeta


def _write_manifest(path: Path, fields: dict) -> None:
    lines = [f"{k}={v}" for k, v in fields.items()]
    path.write_text("\n".join(lines) + "\n")


def _read_manifest(path: Path) -> dict:
    fields = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{ln}: expected key=value, got '{line}'")
        key, value = line.split("=", 1)
        fields[key.strip()] = value.strip()
    return fields


def _encode_features(features: np.ndarray, sparse: bool) -> bytes:
    n, d = features.shape
    if not sparse:
        head = struct.pack("<III", FEATURES_DENSE, n, d)
        return head + features.astype("<f8").tobytes()
    import scipy.sparse as sp

    csr = sp.csr_matrix(features)
    csr.sort_indices()
    head = struct.pack("<IIIQ", FEATURES_CSR, n, d, csr.nnz)
    return (
        head
        + csr.indptr.astype("<u8").tobytes()
        + csr.indices.astype("<u4").tobytes()
        + csr.data.astype("<f8").tobytes()
    )


def _decode_features(raw: bytes, path: Path) -> np.ndarray:
    flag, n, d = struct.unpack_from("<III", raw, 0)
    if flag == FEATURES_DENSE:
        body = np.frombuffer(raw, dtype="<f8", offset=12)
        if body.size != n * d:
            raise DatasetError(f"{path}: dense payload size mismatch")
        return body.reshape(n, d).astype(np.float64)
    if flag == FEATURES_CSR:
        (nnz,) = struct.unpack_from("<Q", raw, 12)
        off = 20
        indptr = np.frombuffer(raw, dtype="<u8", count=n + 1, offset=off)
        off += 8 * (n + 1)
        indices = np.frombuffer(raw, dtype="<u4", count=nnz, offset=off)
        off += 4 * nnz
        values = np.frombuffer(raw, dtype="<f8", count=nnz, offset=off)
        if values.size != nnz or off + 8 * nnz != len(raw):
            raise DatasetError(f"{path}: CSR payload size mismatch")
        import scipy.sparse as sp

        return (
            sp.csr_matrix(
                (values.astype(np.float64), indices.astype(np.int64),
                 indptr.astype(np.int64)),
                shape=(n, d),
            ).toarray()
        )
    raise DatasetError(f"{path}: unknown feature encoding flag {flag}")


def save_dataset(bundle: DatasetBundle, path, sparse_features: bool | None = None) -> None:
    """Write the neutral format; deterministic bytes for identical bundles."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    meta = bundle.meta

    csr = g.adjacency.csr().tocoo()
    mask = csr.row < csr.col if not meta.directed else np.ones(csr.nnz, dtype=bool)
    pairs = np.column_stack([csr.row[mask], csr.col[mask]])
    weights = csr.data[mask]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs, weights = pairs[order], weights[order]
    rec = np.empty(pairs.shape[0], dtype=_EDGE_DTYPE)
    rec["u"], rec["v"], rec["w"] = pairs[:, 0], pairs[:, 1], weights
    edge_buf = rec.tobytes()

    if sparse_features is None:
        sparse_features = (np.count_nonzero(g.features) * 3) < g.features.size
    feat_buf = _encode_features(g.features, sparse_features)
    label_buf = g.labels.astype("<i4").tobytes()
    split = bundle.split
    split_buf = struct.pack(
        "<III", split.train_ids.size, split.val_ids.size, split.test_ids.size
    )
    for part in (split.train_ids, split.val_ids, split.test_ids):
        split_buf += part.astype("<u4").tobytes()

    payloads = {
        "edges": edge_buf, "features": feat_buf,
        "labels": label_buf, "splits": split_buf,
    }
    for fname, buf in payloads.items():
        (path / fname).write_bytes(buf)
    fields = {
        "format": FORMAT_VERSION,
        "name": meta.name,
        "nodes": g.n,
        "edges": meta.num_edges,
        "edges_stored": pairs.shape[0],
        "features": g.feature_dim,
        "classes": g.num_classes,
        "directed": str(meta.directed).lower(),
        "label_rate": f"{meta.label_rate:.6f}",
    }
    for fname in _DATA_FILES:
        fields[f"checksum.{fname}"] = fnv1a64_hex(payloads[fname])
    _write_manifest(path / "manifest", fields)


def load_dataset(path, row_normalize: bool = False) -> DatasetBundle:
    """Load and validate a neutral-format dataset directory.

    ``row_normalize`` divides each feature row by its sum (zero rows kept).
    Off by default: normalized bag-of-words rows shrink the glorot-scaled
    activations into a softmax plateau the fixed SGD schedule cannot leave.
    """
    path = Path(path)
    manifest_path = path / "manifest"
    if not manifest_path.is_file():
        raise DatasetError(f"{path}: missing manifest")
    fields = _read_manifest(manifest_path)
    try:
        n = int(fields["nodes"])
        declared_edges = int(fields["edges"])
        stored_edges = int(fields.get("edges_stored", fields["edges"]))
        d = int(fields["features"])
        num_classes = int(fields["classes"])
        name = fields["name"]
        directed = fields.get("directed", "false") == "true"
    except KeyError as missing:
        raise DatasetError(f"{manifest_path}: missing field {missing}") from None

    raws = {}
    for fname in _DATA_FILES:
        fpath = path / fname
        if not fpath.is_file():
            raise DatasetError(f"{path}: missing file '{fname}'")
        raw = fpath.read_bytes()
        want = fields.get(f"checksum.{fname}")
        if want is not None and fnv1a64_hex(raw) != want:
            raise DatasetError(f"{fpath}: checksum mismatch")
        raws[fname] = raw

    if len(raws["edges"]) != 16 * stored_edges:
        raise DatasetError(
            f"{path}/edges: {len(raws['edges'])} bytes inconsistent with "
            f"declared count {stored_edges}"
        )
    rec = np.frombuffer(raws["edges"], dtype=_EDGE_DTYPE)
    pairs = np.column_stack([rec["u"], rec["v"]]).astype(np.int64)
    weights = rec["w"].astype(np.float64)

    features = _decode_features(raws["features"], path / "features")
    if features.shape != (n, d):
        raise DatasetError(
            f"{path}/features: shape {features.shape} != manifest ({n}, {d})"
        )
    if not np.all(np.isfinite(features)):
        raise DatasetError(f"{path}/features: non-finite entries")
    if not np.isin(np.unique(features), (0.0, 1.0)).all():
        logger.info("%s: stored features are not binary bag-of-words", path)

    labels = np.frombuffer(raws["labels"], dtype="<i4").astype(np.int64)
    if labels.size != n:
        raise DatasetError(f"{path}/labels: {labels.size} entries, expected {n}")

    tr_n, va_n, te_n = struct.unpack_from("<III", raws["splits"], 0)
    ids = np.frombuffer(raws["splits"], dtype="<u4", offset=12).astype(np.int64)
    if ids.size != tr_n + va_n + te_n:
        raise DatasetError(f"{path}/splits: id payload inconsistent with counts")
    split = Split.of(ids[:tr_n], ids[tr_n:tr_n + va_n], ids[tr_n + va_n:])

    if row_normalize:
        sums = features.sum(axis=1)
        pos = sums != 0
        features = features.copy()
        features[pos] = features[pos] / sums[pos, None]

    graph = SparseGraph.from_edges(
        n, pairs, weights=weights, features=features, labels=labels,
        num_classes=num_classes, undirected=not directed,
    )
    split.validate(n, labels)
    label_rate = split.train_ids.size / n if n else 0.0
    meta = DatasetMeta(
        name=name, num_nodes=n, num_edges=declared_edges,
        num_edges_stored=stored_edges, feature_dim=d, num_classes=num_classes,
        directed=directed, label_rate=label_rate, row_normalized=row_normalize,
    )
    return DatasetBundle(graph=graph, split=split, meta=meta)


def subsample_labels(bundle: DatasetBundle, rate: float, seed: int) -> DatasetBundle:
    """Stratified reduction of the training split to a target label rate.

    Keeps at least one node per class; validation and test splits are
    untouched. Requesting the current rate returns the identical train set.
    """
    n = bundle.graph.n
    train = bundle.split.train_ids
    labels = bundle.graph.labels
    if rate <= 0:
        raise ConfigError(f"label rate must be positive, got {rate}")
    target = int(round(rate * n))
    if target >= train.size:
        if target > train.size:
            raise ConfigError(
                f"rate {rate} needs {target} labeled nodes, only {train.size} available"
            )
        return bundle
    classes = np.unique(labels[train])
    if target < classes.size:
        raise ConfigError(
            f"rate {rate} keeps {target} nodes, fewer than {classes.size} classes"
        )
    rng = np.random.default_rng(seed)
    groups = {c: train[labels[train] == c] for c in classes}
    # largest-remainder allocation with a floor of one node per class
    quotas = {c: target * g.size / train.size for c, g in groups.items()}
    counts = {c: max(1, int(np.floor(q))) for c, q in quotas.items()}
    while sum(counts.values()) > target:
        c = max(counts, key=lambda c: (counts[c] - quotas[c], c))
        counts[c] -= 1
    remainders = sorted(
        classes, key=lambda c: (quotas[c] - counts[c], -c), reverse=True
    )
    idx = 0
    while sum(counts.values()) < target:
        c = remainders[idx % len(remainders)]
        if counts[c] < groups[c].size:
            counts[c] += 1
        idx += 1
    chosen = [rng.choice(g, size=counts[c], replace=False) for c, g in groups.items()]
    new_train = np.sort(np.concatenate(chosen))
    split = replace(bundle.split, train_ids=new_train)
    split.validate(n, labels)
    meta = replace(bundle.meta, label_rate=new_train.size / n)
    return DatasetBundle(graph=bundle.graph, split=split, meta=meta)


def make_bundle(
    graph: SparseGraph, split: Split, name: str = "toy",
    num_edges: int | None = None,
) -> DatasetBundle:
    """Wrap an in-memory graph as a bundle (declared edge count defaults to
    the stored undirected pair count)."""
    stored = graph.adjacency.nnz // 2 if graph.undirected else graph.adjacency.nnz
    split.validate(graph.n, graph.labels)
    meta = DatasetMeta(
        name=name, num_nodes=graph.n,
        num_edges=stored if num_edges is None else num_edges,
        num_edges_stored=stored, feature_dim=graph.feature_dim,
        num_classes=graph.num_classes, directed=not graph.undirected,
        label_rate=split.train_ids.size / graph.n if graph.n else 0.0,
    )
    return DatasetBundle(graph=graph, split=split, meta=meta)
