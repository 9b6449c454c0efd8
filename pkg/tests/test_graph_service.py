import numpy as np
import pytest

from conftest import random_connected_graph
from models.errors import DisconnectedGraph, DuplicateEdge, IndexOutOfRange, LengthMismatch, MalformedRow, SelfLoop
from services.graph_service import (
    build_graph,
    graph_service,
    grid_graph,
    laplacian_dense,
    load_edges,
    load_site_labels,
    path_graph,
    quadratic_form,
    relabel,
)


def test_build_graph_degrees():
    graph = build_graph(4, [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert graph.n_edges == 4
    assert graph.degrees.tolist() == [2, 2, 2, 2]


def test_edges_are_stored_sorted():
    graph = build_graph(3, [(2, 1), (1, 0)])
    assert graph.edges.tolist() == [[1, 2], [0, 1]]


def test_single_site_without_edges():
    graph = build_graph(1, [])
    assert graph.n_edges == 0
    assert quadratic_form(graph, np.zeros(1)) == 0.0


@pytest.mark.parametrize("edges, error", [
    ([(0, 0), (0, 1)], SelfLoop),
    ([(0, 1), (1, 0)], DuplicateEdge),
    ([(0, 3)], IndexOutOfRange),
    ([(0, 1)], DisconnectedGraph),
])
def test_invalid_edge_lists(edges, error):
    with pytest.raises(error):
        build_graph(3, edges)


def test_disconnected_message_names_site():
    with pytest.raises(DisconnectedGraph, match="site 2"):
        build_graph(3, [(0, 1)])


def test_labels_must_match_sites():
    with pytest.raises(LengthMismatch):
        build_graph(2, [(0, 1)], labels=["a"])


def test_quadratic_form_path():
    graph = path_graph(3)
    assert quadratic_form(graph, np.array([1.0, 0.0, -1.0])) == pytest.approx(2.0)


def test_quadratic_form_matches_dense_laplacian(rng):
    for _ in range(20):
        n = int(rng.integers(2, 11))
        graph = random_connected_graph(n, rng)
        phi = rng.normal(size=n)
        dense = float(phi @ laplacian_dense(graph) @ phi)
        assert abs(quadratic_form(graph, phi) - dense) < 1e-12 * max(1.0, abs(dense))


def test_quadratic_form_length_check(small_graph):
    with pytest.raises(LengthMismatch):
        quadratic_form(small_graph, np.zeros(3))


def test_grid_graph_rook_adjacency():
    graph = grid_graph(2, 3)
    assert graph.n_sites == 6
    assert graph.n_edges == 7
    assert graph.degrees.tolist() == [2, 3, 2, 2, 3, 2]


def test_relabel_preserves_quadratic_form(rng):
    graph = random_connected_graph(7, rng)
    permutation = rng.permutation(7)
    renamed = relabel(graph, permutation)
    phi = rng.normal(size=7)
    moved = np.empty(7)
    moved[permutation] = phi
    assert quadratic_form(renamed, moved) == pytest.approx(quadratic_form(graph, phi))


def test_load_edges_one_based(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("site_a,site_b\n1,2\n2,3\n")
    graph = load_edges(str(path), 3, index_base=1)
    assert graph.edges.tolist() == [[0, 1], [1, 2]]


def test_load_edges_zero_based(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("site_a,site_b\n0,1\n1,2\n")
    assert load_edges(str(path), 3, index_base=0).n_edges == 2


def test_load_edges_bad_row(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("site_a,site_b\n1,2\nx,3\n")
    with pytest.raises(MalformedRow, match=":3"):
        load_edges(str(path), 3)


def test_load_edges_bad_header(tmp_path):
    path = tmp_path / "edges.csv"
    path.write_text("from,to\n1,2\n")
    with pytest.raises(MalformedRow):
        load_edges(str(path), 2)


def test_load_site_labels(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("site_id,label\n2,Beta\n1,Alpha\n")
    assert load_site_labels(str(path), 3) == ["Alpha", "Beta", "3"]


def test_graph_service_attaches_labels(tmp_path):
    edges = tmp_path / "edges.csv"
    edges.write_text("site_a,site_b\n0,1\n1,2\n")
    labels = tmp_path / "labels.csv"
    labels.write_text("site_id,label\n2,Beta\n1,Alpha\n")
    graph = graph_service.load(str(edges), 3, index_base=0, labels_path=str(labels), labels_base=1)
    assert graph.edges.tolist() == [[0, 1], [1, 2]]
    assert list(graph.labels) == ["Alpha", "Beta", "3"]
