import numpy as np
import pytest

from graphinfer.errors import ConfigError, GraphError
from graphinfer.graphs import (
    SparseGraph,
    SparseMatrix,
    degree_vector,
    normalized_laplacian,
    power_iteration_lambda_max,
    scaled_laplacian,
    transition_matrix,
)
from graphinfer.toys import (
    complete_graph,
    empty_graph,
    path_graph,
    random_graph,
    triangle,
)


def test_degree_two_node_path():
    g = path_graph(2)
    assert degree_vector(g).tolist() == [1.0, 1.0]


def test_degree_triangle():
    assert degree_vector(triangle()).tolist() == [2.0, 2.0, 2.0]


def test_degree_isolated_node():
    g = SparseGraph.from_edges(3, np.array([[0, 1]]))
    assert degree_vector(g).tolist() == [1.0, 1.0, 0.0]


def test_laplacian_two_node_path():
    lap = normalized_laplacian(path_graph(2)).to_dense()
    np.testing.assert_allclose(lap, [[1.0, -1.0], [-1.0, 1.0]])


def test_laplacian_triangle():
    lap = normalized_laplacian(triangle()).to_dense()
    expected = np.full((3, 3), -0.5)
    np.fill_diagonal(expected, 1.0)
    np.testing.assert_allclose(lap, expected)


def test_laplacian_single_isolated_node():
    lap = normalized_laplacian(empty_graph(1)).to_dense()
    np.testing.assert_allclose(lap, [[1.0]])


def test_scaled_laplacian_two_node_path():
    lap = normalized_laplacian(path_graph(2))
    np.testing.assert_allclose(
        scaled_laplacian(lap, 2.0).to_dense(), [[0.0, -1.0], [-1.0, 0.0]]
    )


def test_scaled_laplacian_identity_input():
    lap = normalized_laplacian(empty_graph(4))
    np.testing.assert_allclose(scaled_laplacian(lap, 2.0).to_dense(), np.zeros((4, 4)))


def test_scaled_laplacian_triangle():
    lhat = scaled_laplacian(normalized_laplacian(triangle()), 2.0).to_dense()
    expected = np.full((3, 3), -0.5)
    np.fill_diagonal(expected, 0.0)
    np.testing.assert_allclose(lhat, expected)


def test_scaled_laplacian_rejects_nonpositive_lambda():
    lap = normalized_laplacian(triangle())
    with pytest.raises(ConfigError):
        scaled_laplacian(lap, 0.0)
    with pytest.raises(ConfigError):
        scaled_laplacian(lap, -1.0)


def test_transition_three_node_path():
    p = transition_matrix(path_graph(3)).to_dense()
    np.testing.assert_allclose(p, [[0, 1, 0], [0.5, 0, 0.5], [0, 1, 0]])


def test_transition_triangle():
    p = transition_matrix(triangle()).to_dense()
    expected = np.full((3, 3), 0.5)
    np.fill_diagonal(expected, 0.0)
    np.testing.assert_allclose(p, expected)


def test_transition_isolated_row_is_zero():
    g = SparseGraph.from_edges(3, np.array([[0, 1]]))
    p = transition_matrix(g).to_dense()
    np.testing.assert_allclose(p[2], [0.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(8))
def test_transition_rows_stochastic(seed):
    g = random_graph(12, 0.3, seed)
    p = transition_matrix(g).to_dense()
    deg = degree_vector(g)
    sums = p.sum(axis=1)
    assert np.all(np.abs(sums[deg > 0] - 1.0) <= 1e-12)
    assert np.all(sums[deg == 0] == 0.0)


@pytest.mark.parametrize("seed", range(8))
def test_laplacian_symmetry(seed):
    lap = normalized_laplacian(random_graph(10, 0.35, seed)).to_dense()
    assert np.max(np.abs(lap - lap.T)) < 1e-12


@pytest.mark.parametrize(
    "g",
    [
        path_graph(5),
        complete_graph(6),
        random_graph(8, 0.4, 3),
        random_graph(7, 0.25, 11),
        empty_graph(4),
    ],
)
def test_laplacian_eigenvalues_in_0_2(g):
    # dense eigensolver oracle on small graphs
    lap = normalized_laplacian(g).to_dense()
    eig = np.linalg.eigvalsh(lap)
    assert eig.min() >= -1e-10
    assert eig.max() <= 2.0 + 1e-10


@pytest.mark.parametrize("seed", range(5))
def test_scaled_laplacian_inverts_at_two(seed):
    lap = normalized_laplacian(random_graph(9, 0.3, seed))
    lhat = scaled_laplacian(lap, 2.0)
    np.testing.assert_allclose(
        lhat.to_dense() + np.eye(9), lap.to_dense(), atol=1e-15
    )


def test_power_iteration_matches_dense():
    lap = normalized_laplacian(random_graph(10, 0.4, 5))
    est = power_iteration_lambda_max(lap, iters=200, tol=1e-12)
    exact = np.linalg.eigvalsh(lap.to_dense()).max()
    assert abs(est - exact) < 1e-6


def test_csr_validation_rejects_bad_structure():
    with pytest.raises(GraphError):
        SparseMatrix(np.array([0, 2, 1]), np.array([0, 1]), np.ones(2), (2, 2))
    with pytest.raises(GraphError):  # duplicate column in a row
        SparseMatrix(np.array([0, 2]), np.array([1, 1]), np.ones(2), (1, 2))
    with pytest.raises(GraphError):  # unsorted row
        SparseMatrix(np.array([0, 2]), np.array([1, 0]), np.ones(2), (1, 2))
    with pytest.raises(GraphError):  # column out of range
        SparseMatrix(np.array([0, 1]), np.array([5]), np.ones(1), (1, 2))


def test_graph_rejects_self_loop_and_asymmetry():
    with pytest.raises(GraphError):
        SparseGraph.from_edges(2, np.array([[0, 0]]))
    adj = SparseMatrix.from_scipy(
        __import__("scipy.sparse", fromlist=["csr_matrix"]).csr_matrix(
            np.array([[0.0, 1.0], [0.0, 0.0]])
        )
    )
    with pytest.raises(GraphError):
        SparseGraph(adj, np.zeros((2, 1)), np.array([-1, -1]), 1, undirected=True)


def test_graph_rejects_duplicate_edges():
    with pytest.raises(GraphError):
        SparseGraph.from_edges(3, np.array([[0, 1], [1, 0]]))


def test_graph_rejects_label_out_of_range():
    with pytest.raises(GraphError):
        SparseGraph.from_edges(
            2, np.array([[0, 1]]), labels=np.array([0, 5]), num_classes=2
        )
