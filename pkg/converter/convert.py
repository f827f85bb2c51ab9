#!/usr/bin/env python3
"""One-shot converter from the public citation-dataset serialization
(ind.{name}.{x,y,tx,ty,allx,ally,graph,test.index}) to the neutral binary
dataset format, preserving the standard public splits.

Standalone by design: writes the neutral format directly and has no runtime
dependency on the consuming library.

Usage: convert.py --raw <dir> --name {cora,citeseer,pubmed} --out <dir>
"""

from __future__ import annotations

import argparse
import pickle
import struct
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

DATASETS = ("cora", "citeseer", "pubmed")
PIECES = ("x", "y", "tx", "ty", "allx", "ally", "graph")
VALIDATION_SIZE = 500

FORMAT_VERSION = 1
FEATURES_CSR = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def fnv1a64_hex(data: bytes) -> str:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"


class ConvertError(Exception):
    pass


def _load_pickle(path: Path):
    if not path.is_file():
        raise ConvertError(f"missing file: {path}")
    with open(path, "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def load_raw(raw_dir: Path, name: str) -> dict:
    objects = {}
    for piece in PIECES:
        objects[piece] = _load_pickle(raw_dir / f"ind.{name}.{piece}")
    index_path = raw_dir / f"ind.{name}.test.index"
    if not index_path.is_file():
        raise ConvertError(f"missing file: {index_path}")
    objects["test_index"] = np.array(
        [int(line) for line in index_path.read_text().split()], dtype=np.int64
    )
    return objects


def assemble(objects: dict, name: str) -> dict:
    """Standard assembly: stack allx/tx, reorder the test block to graph node
    ids, derive integer labels and the public train/val/test splits."""
    x, allx, tx = objects["x"], objects["allx"], objects["tx"]
    y, ally, ty = objects["y"], objects["ally"], objects["ty"]
    test_idx = objects["test_index"]
    if x.shape[1] != allx.shape[1] or tx.shape[1] != allx.shape[1]:
        raise ConvertError(
            f"ind.{name}.x/allx/tx disagree on feature dimension: "
            f"{x.shape[1]}/{allx.shape[1]}/{tx.shape[1]}"
        )
    if y.shape[1] != ally.shape[1] or ty.shape[1] != ally.shape[1]:
        raise ConvertError(f"ind.{name}.y/ally/ty disagree on class count")
    if test_idx.size == 0:
        raise ConvertError(f"ind.{name}.test.index is empty")
    if np.unique(test_idx).size != test_idx.size:
        raise ConvertError(f"ind.{name}.test.index contains duplicate ids")

    test_sorted = np.sort(test_idx)
    span = np.arange(test_sorted.min(), test_sorted.max() + 1)
    if span.size != test_idx.size:
        # known gaps (isolated test nodes): extend with zero rows, which end
        # up unlabeled and outside every split
        tx_full = sp.lil_matrix((span.size, tx.shape[1]))
        tx_full[test_sorted - span.min(), :] = tx
        tx = tx_full.tocsr()
        ty_full = np.zeros((span.size, ty.shape[1]))
        ty_full[test_sorted - span.min(), :] = ty
        ty = ty_full

    features = sp.vstack((allx, tx)).tolil()
    onehot = np.vstack((ally, ty))
    n = features.shape[0]
    if test_sorted.min() != allx.shape[0] or test_sorted.max() != n - 1:
        raise ConvertError(
            f"ind.{name}.test.index: ids [{test_sorted.min()}, {test_sorted.max()}] "
            f"do not map onto the feature block [{allx.shape[0]}, {n - 1}]"
        )
    features[test_idx, :] = features[test_sorted, :]
    onehot[test_idx, :] = onehot[test_sorted, :]

    labels = np.where(onehot.any(axis=1), onehot.argmax(axis=1), -1).astype(np.int64)
    train_ids = np.arange(y.shape[0], dtype=np.int64)
    val_ids = np.arange(y.shape[0], y.shape[0] + VALIDATION_SIZE, dtype=np.int64)
    if val_ids.size and val_ids.max() >= n:
        raise ConvertError(f"ind.{name}.y: validation range exceeds {n} nodes")

    graph = objects["graph"]
    arcs = 0
    unique = set()
    self_loops = 0
    for u, neighbors in graph.items():
        if not 0 <= u < n:
            raise ConvertError(f"ind.{name}.graph: node id {u} outside [0, {n})")
        arcs += len(neighbors)
        for v in neighbors:
            if not 0 <= v < n:
                raise ConvertError(f"ind.{name}.graph: node id {v} outside [0, {n})")
            if u == v:
                self_loops += 1
            else:
                unique.add((u, v) if u < v else (v, u))
    edges = np.array(sorted(unique), dtype=np.int64).reshape(-1, 2)
    return {
        "name": name,
        "n": n,
        "features": features.tocsr(),
        "labels": labels,
        "train_ids": train_ids,
        "val_ids": val_ids,
        "test_ids": test_sorted,
        "edges": edges,
        "edges_raw": arcs // 2,
        "self_loops": self_loops,
        "num_classes": int(onehot.shape[1]),
    }


def write_neutral(data: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    n = data["n"]
    edges = data["edges"]
    rec = np.empty(edges.shape[0], dtype=np.dtype([("u", "<u4"), ("v", "<u4"), ("w", "<f8")]))
    rec["u"], rec["v"], rec["w"] = edges[:, 0], edges[:, 1], 1.0
    edge_buf = rec.tobytes()

    feats = data["features"].tocsr()
    feats.sort_indices()
    feat_buf = (
        struct.pack("<IIIQ", FEATURES_CSR, n, feats.shape[1], feats.nnz)
        + feats.indptr.astype("<u8").tobytes()
        + feats.indices.astype("<u4").tobytes()
        + feats.data.astype("<f8").tobytes()
    )
    label_buf = data["labels"].astype("<i4").tobytes()
    split_buf = struct.pack(
        "<III", data["train_ids"].size, data["val_ids"].size, data["test_ids"].size
    )
    for part in ("train_ids", "val_ids", "test_ids"):
        split_buf += data[part].astype("<u4").tobytes()

    payloads = {
        "edges": edge_buf, "features": feat_buf,
        "labels": label_buf, "splits": split_buf,
    }
    for fname, buf in payloads.items():
        (out_dir / fname).write_bytes(buf)
    label_rate = data["train_ids"].size / n
    lines = [
        f"format={FORMAT_VERSION}",
        f"name={data['name']}",
        f"nodes={n}",
        f"edges={data['edges_raw']}",
        f"edges_stored={edges.shape[0]}",
        f"features={feats.shape[1]}",
        f"classes={data['num_classes']}",
        "directed=false",
        f"label_rate={label_rate:.6f}",
    ]
    for fname in ("edges", "features", "labels", "splits"):
        lines.append(f"checksum.{fname}={fnv1a64_hex(payloads[fname])}")
    (out_dir / "manifest").write_text("\n".join(lines) + "\n")


def convert(raw_dir: Path, name: str, out_dir: Path) -> dict:
    data = assemble(load_raw(raw_dir, name), name)
    write_neutral(data, out_dir)
    label_rate = data["train_ids"].size / data["n"]
    print(
        f"{data['name']}: nodes={data['n']} edges={data['edges_raw']} "
        f"classes={data['num_classes']} features={data['features'].shape[1]} "
        f"label_rate={label_rate:.3f}"
    )
    print(
        f"  stored unique undirected edges={data['edges'].shape[0]} "
        f"(self-loops dropped: {data['self_loops']}); "
        f"splits train/val/test={data['train_ids'].size}/"
        f"{data['val_ids'].size}/{data['test_ids'].size}"
    )
    return data


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--raw", required=True, help="directory with ind.* files")
    parser.add_argument("--name", required=True, choices=DATASETS)
    parser.add_argument("--out", required=True, help="output dataset directory")
    args = parser.parse_args(argv)
    try:
        convert(Path(args.raw), args.name, Path(args.out))
    except ConvertError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
