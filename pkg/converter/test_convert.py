import os
import pickle
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

sys.path.insert(0, str(Path(__file__).resolve().parent))
import convert  # noqa: E402

RAW_ROOT = Path(os.environ.get("GRAPHINFER_RAW", Path(__file__).resolve().parents[1] / "data_raw"))

TABLE_STATS = {
    # name: (nodes, edges, classes, features, label rate)
    "cora": (2708, 5429, 7, 1433, 0.052),
    "citeseer": (3327, 4732, 6, 3703, 0.036),
    "pubmed": (19717, 44338, 3, 500, 0.003),
}


def write_fake_family(raw_dir: Path, name: str = "cora", gap: bool = False):
    """Tiny synthetic ind.* family following the public layout: 4 labeled
    training rows, a 500-node validation range, 510 allx rows, 10 test ids
    in shuffled file order. Column 0 of every feature row carries the owning
    node id so reordering mistakes are detectable."""
    rng = np.random.default_rng(0)
    n_train, n_allx, n_test = 4, 510, 10
    n = n_allx + n_test
    classes = 2

    def feat(ids):
        rows = np.zeros((len(ids), 3))
        rows[:, 0] = ids
        rows[:, 1] = 1.0
        return sp.csr_matrix(rows)

    def onehot(ids):
        out = np.zeros((len(ids), classes))
        out[np.arange(len(ids)), np.asarray(ids) % classes] = 1.0
        return out

    test_ids = np.arange(n_allx, n)
    if gap:
        present = np.delete(test_ids, 5)  # drop one id from the index file
    else:
        present = test_ids
    file_order = rng.permutation(present)

    eight = {
        "x": feat(range(n_train)),
        "y": onehot(range(n_train)),
        "allx": feat(range(n_allx)),
        "ally": onehot(range(n_allx)),
        "tx": feat(file_order),
        "ty": onehot(file_order),
    }
    graph = defaultdict(list)
    for u in range(n - 1):  # ring plus one duplicate arc pair and a self-loop
        graph[u].append(u + 1)
        graph[u + 1].append(u)
    graph[0].append(n - 1)
    graph[n - 1].append(0)
    graph[2].append(3)  # duplicate of an existing edge, both directions
    graph[3].append(2)
    graph[7].append(7)  # self-loop, dropped from storage
    eight["graph"] = graph

    raw_dir.mkdir(parents=True, exist_ok=True)
    for piece, obj in eight.items():
        with open(raw_dir / f"ind.{name}.{piece}", "wb") as fh:
            pickle.dump(obj, fh)
    (raw_dir / f"ind.{name}.test.index").write_text(
        "\n".join(str(i) for i in file_order) + "\n"
    )
    return {
        "n": n, "train": n_train, "test_present": np.sort(present),
        "arcs": sum(len(v) for v in graph.values()),
        "unique": n + 1,  # ring (n) + the 0..n-1 chord... see below
    }


def test_convert_fake_family(tmp_path, capsys):
    raw = tmp_path / "raw"
    info = write_fake_family(raw)
    out = tmp_path / "out"
    assert convert.main(["--raw", str(raw), "--name", "cora", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert f"nodes={info['n']}" in printed
    assert f"edges={info['arcs'] // 2}" in printed

    from graphinfer.dataio import load_dataset

    bundle = load_dataset(out, row_normalize=False)
    assert bundle.graph.n == info["n"]
    assert bundle.graph.num_classes == 2
    assert bundle.meta.num_edges == info["arcs"] // 2
    # ring edges: n, dropping nothing else; duplicate arc deduplicated,
    # self-loop dropped
    assert bundle.meta.num_edges_stored == info["n"]
    assert bundle.split.train_ids.tolist() == [0, 1, 2, 3]
    assert bundle.split.val_ids.tolist() == list(range(4, 504))
    np.testing.assert_array_equal(bundle.split.test_ids, info["test_present"])


def test_feature_rows_map_to_node_ids(tmp_path):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    out = tmp_path / "out"
    assert convert.main(["--raw", str(raw), "--name", "cora", "--out", str(out)]) == 0
    from graphinfer.dataio import load_dataset

    bundle = load_dataset(out, row_normalize=False)
    # column 0 of each row was seeded with the owning node id
    np.testing.assert_array_equal(
        bundle.graph.features[:, 0], np.arange(bundle.graph.n, dtype=float)
    )
    labels = bundle.graph.labels
    np.testing.assert_array_equal(labels, np.arange(bundle.graph.n) % 2)


def test_gap_in_test_index_yields_isolated_unlabeled_node(tmp_path):
    raw = tmp_path / "raw"
    info = write_fake_family(raw, name="citeseer", gap=True)
    out = tmp_path / "out"
    assert convert.main(["--raw", str(raw), "--name", "citeseer", "--out", str(out)]) == 0
    from graphinfer.dataio import load_dataset

    bundle = load_dataset(out, row_normalize=False)
    missing = 510 + 5
    assert missing not in bundle.split.test_ids
    assert bundle.graph.labels[missing] == -1
    assert bundle.graph.features[missing].sum() == 0.0
    # other test nodes keep their identifying features
    for node in info["test_present"]:
        assert bundle.graph.features[node, 0] == node


def test_conversion_idempotent(tmp_path):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert convert.main(["--raw", str(raw), "--name", "cora", "--out", str(out1)]) == 0
    assert convert.main(["--raw", str(raw), "--name", "cora", "--out", str(out2)]) == 0
    for fname in ("manifest", "edges", "features", "labels", "splits"):
        assert (out1 / fname).read_bytes() == (out2 / fname).read_bytes(), fname


def test_missing_file_names_it(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    (raw / "ind.cora.allx").unlink()
    code = convert.main(["--raw", str(raw), "--name", "cora", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "ind.cora.allx" in capsys.readouterr().err


def test_shape_disagreement_rejected(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    with open(raw / "ind.cora.tx", "wb") as fh:
        pickle.dump(sp.csr_matrix(np.zeros((10, 99))), fh)
    code = convert.main(["--raw", str(raw), "--name", "cora", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "feature dimension" in capsys.readouterr().err


def test_duplicate_test_index_rejected(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    ids = [510] * 2 + list(range(511, 519))
    (raw / "ind.cora.test.index").write_text("\n".join(map(str, ids)) + "\n")
    code = convert.main(["--raw", str(raw), "--name", "cora", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "duplicate" in capsys.readouterr().err


def test_unmappable_test_index_rejected(tmp_path, capsys):
    raw = tmp_path / "raw"
    write_fake_family(raw)
    (raw / "ind.cora.test.index").write_text(
        "\n".join(str(i) for i in range(600, 610)) + "\n"
    )
    code = convert.main(["--raw", str(raw), "--name", "cora", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "test.index" in capsys.readouterr().err


def has_raw(name: str) -> bool:
    return (RAW_ROOT / f"ind.{name}.graph").is_file()


@pytest.mark.parametrize("name", sorted(TABLE_STATS))
def test_real_dataset_statistics(name, tmp_path, capsys):
    if not has_raw(name):
        pytest.skip(f"raw '{name}' files not found under {RAW_ROOT}")
    out = tmp_path / name
    assert convert.main(["--raw", str(RAW_ROOT), "--name", name, "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    nodes, edges, classes, features, rate = TABLE_STATS[name]
    assert f"nodes={nodes} " in printed
    assert f"edges={edges} " in printed
    assert f"classes={classes} " in printed
    assert f"features={features} " in printed
    assert f"label_rate={rate:.3f}" in printed

    from graphinfer.dataio import load_dataset

    bundle = load_dataset(out)
    assert bundle.graph.n == nodes
    assert bundle.meta.num_edges == edges
    assert round(bundle.meta.label_rate, 3) == rate
