"""Small bundled graphs for tests, oracles, and CLI smoke runs."""

from __future__ import annotations

import numpy as np

from .graphs import SparseGraph


def toy_bundle(
    classes: int = 3,
    per_class: int = 8,
    seed: int = 0,
    train_per_class: int = 2,
    val_per_class: int = 2,
    name: str = "toy",
    **graph_kw,
):
    """Clustered-graph DatasetBundle with per-class train/val/test splits."""
    from .dataio import Split, make_bundle

    g = clustered_graph(classes, per_class, seed, **graph_kw)
    train, val, test = [], [], []
    for c in range(classes):
        ids = np.arange(c * per_class, (c + 1) * per_class)
        train.extend(ids[:train_per_class])
        val.extend(ids[train_per_class:train_per_class + val_per_class])
        test.extend(ids[train_per_class + val_per_class:])
    return make_bundle(g, Split.of(train, val, test), name=name)


def path_graph(n: int, **kwargs) -> SparseGraph:
    edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
    return SparseGraph.from_edges(n, edges, **kwargs)


def cycle_graph(n: int, **kwargs) -> SparseGraph:
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    return SparseGraph.from_edges(n, edges, **kwargs)


def complete_graph(n: int, **kwargs) -> SparseGraph:
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    return SparseGraph.from_edges(n, np.array(pairs), **kwargs)


def triangle(**kwargs) -> SparseGraph:
    return complete_graph(3, **kwargs)


def empty_graph(n: int, **kwargs) -> SparseGraph:
    return SparseGraph.from_edges(n, np.empty((0, 2), dtype=np.int64), **kwargs)


def random_graph(
    n: int,
    p: float,
    seed: int,
    feature_dim: int = 0,
    num_classes: int = 1,
    ensure_edge: bool = True,
) -> SparseGraph:
    """Seeded Erdos-Renyi graph, optionally with random features."""
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, k=1)
    mask = rng.random(iu[0].size) < p
    edges = np.column_stack([iu[0][mask], iu[1][mask]])
    if ensure_edge and edges.shape[0] == 0 and n >= 2:
        edges = np.array([[0, 1]])
    features = None
    if feature_dim:
        features = rng.standard_normal((n, feature_dim))
    return SparseGraph.from_edges(
        n, edges, features=features, num_classes=num_classes
    )


def eight_node_toy() -> SparseGraph:
    """Fixed 8-node, 3-class graph: three feature-separable clusters."""
    edges = np.array(
        [[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5], [6, 7], [2, 3], [5, 6]]
    )
    labels = np.array([0, 0, 0, 1, 1, 1, 2, 2])
    rng = np.random.default_rng(88)
    features = np.zeros((8, 3))
    features[np.arange(8), labels] = 1.0
    features += 0.1 * rng.standard_normal((8, 3))
    return SparseGraph.from_edges(
        8, edges, features=features, labels=labels, num_classes=3
    )


def clustered_graph(
    classes: int,
    per_class: int,
    seed: int,
    p_in: float = 0.8,
    p_out: float = 0.05,
    feature_dim: int | None = None,
    feature_noise: float = 0.1,
) -> SparseGraph:
    """Planted-partition graph whose features carry a noisy class indicator.

    Node i belongs to class i // per_class; features are the one-hot class
    vector (padded to feature_dim) plus Gaussian noise. All nodes labeled.
    """
    n = classes * per_class
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            prob = p_in if labels[i] == labels[j] else p_out
            if rng.random() < prob:
                pairs.append((i, j))
    if not pairs:
        pairs = [(i, i + 1) for i in range(n - 1)]
    d = feature_dim if feature_dim is not None else classes
    features = np.zeros((n, d))
    features[np.arange(n), labels % d] = 1.0
    features += feature_noise * rng.standard_normal((n, d))
    return SparseGraph.from_edges(
        n,
        np.array(pairs),
        features=features,
        labels=labels,
        num_classes=classes,
    )
