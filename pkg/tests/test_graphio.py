import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnneval.graphio import (Graph, GraphError, GraphFormatError, Split, format_graph, generate_sbm,
                             graph_id, induced_subgraph, load_graph, load_split, quantize,
                             random_split, rng_from_seed, save_graph, save_split)

from conftest import sbm, small_graph


def write(tmp_path, text, name="g.gtxt"):
    p = tmp_path / name
    p.write_text(text)
    return p


TRIANGLE = "#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 1\n2 0 0.5 0.5\n0 1\n1 2\n"


def test_load_small_file(tmp_path):
    g = load_graph(write(tmp_path, TRIANGLE))
    assert g.num_nodes == 3 and g.num_edges == 2 and g.feature_dim == 2 and g.num_classes == 2
    assert g.labels.tolist() == [0, 1, 0]
    assert g.degrees().tolist() == [1, 2, 1]
    assert g.neighbors(1).tolist() == [0, 2]
    a = g.adjacency.toarray()
    assert (a == a.T).all() and a.sum() == 4


def test_label_blind_load_discards_labels(tmp_path):
    g = load_graph(write(tmp_path, TRIANGLE), with_labels=False)
    assert not g.has_labels
    assert (g.labels == -1).all()


@pytest.mark.parametrize("text,line", [
    ("#gtxt v2\n", 1),
    ("#gtxt v1\n3 2 2\n", 2),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 5 0 1\n2 0 0.5 0.5\n0 1\n1 2\n", 4),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 1\n2 0 0.5 0.5\n0 1\n1 1\n", 7),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 1\n2 0 0.5 0.5\n0 1\n1 3\n", 7),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 1\n2 0 0.5 0.5\n0 1\n0 1\n", 7),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 1\n2 0 0.5 0.5\n0 1\n2 1\n", 7),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n2 1 0 1\n2 0 0.5 0.5\n0 1\n1 2\n", 4),
    ("#gtxt v1\n3 2 2 2\n0 0 1 0\n1 1 0 x\n2 0 0.5 0.5\n0 1\n1 2\n", 4),
])
def test_malformed_files_report_line(tmp_path, text, line):
    with pytest.raises(GraphFormatError) as info:
        load_graph(write(tmp_path, text))
    assert info.value.line == line


def test_graph_invariants_are_enforced():
    x = np.zeros((3, 1))
    with pytest.raises(GraphError):
        Graph(x, [0, 0, 0], [(0, 0)], 1)
    with pytest.raises(GraphError):
        Graph(x, [0, 0, 0], [(0, 1), (1, 0)], 1)
    with pytest.raises(GraphError):
        Graph(x, [0, 0, 3], [(0, 1)], 2)
    g = Graph(x, [0, 0, 0], [(2, 1), (1, 0)], 1)
    assert g.edges.tolist() == [[0, 1], [1, 2]]
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 4), st.integers(0, 2**31))
def test_roundtrip_is_bit_identical(tmp_path_factory, n, d, seed):
    g = small_graph(n=n, d=d, c=3, seed=seed)
    g = g.replace(features=quantize(g.features))
    p = tmp_path_factory.mktemp("rt") / "g.gtxt"
    save_graph(g, p)
    h = load_graph(p)
    assert h.equals(g)
    assert format_graph(h) == format_graph(g)
    assert graph_id(h) == graph_id(g)


def test_graph_id_depends_on_content():
    g = small_graph(seed=1)
    assert graph_id(g) == graph_id(g.replace())
    assert graph_id(g) != graph_id(g.replace(labels=np.zeros(g.num_nodes, dtype=int)))


def test_split_roundtrip_and_checks(tmp_path):
    s = random_split(50, 0.6, 0.2, 3)
    assert (s.train.size, s.val.size, s.test.size) == (30, 10, 10)
    assert np.union1d(np.union1d(s.train, s.val), s.test).tolist() == list(range(50))
    save_split(s, tmp_path / "s.split")
    t = load_split(tmp_path / "s.split")
    assert all(np.array_equal(getattr(s, k), getattr(t, k)) for k in ("train", "val", "test"))
    with pytest.raises(GraphError):
        Split([0, 1], [1], [])
    with pytest.raises(GraphError):
        Split([0, 9], [], []).check(5)


def test_induced_subgraph_relabels_nodes():
    g = Graph(np.arange(5.0)[:, None], [0, 1, 0, 1, 0], [(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)], 2)
    h = induced_subgraph(g, [1, 2, 4])
    assert h.features.ravel().tolist() == [1.0, 2.0, 4.0]
    assert h.labels.tolist() == [1, 0, 0]
    assert h.edges.tolist() == [[0, 1]]


def test_sbm_is_seeded_and_well_formed():
    a, b = sbm(seed=4), sbm(seed=4)
    assert a.equals(b)
    assert not a.equals(sbm(seed=5))
    assert a.num_nodes == 200 and a.num_classes == 2
    assert np.array_equal(quantize(a.features), a.features)


def test_sbm_edge_density_matches_probabilities():
    g = generate_sbm(0, [(150, 0), (150, 1)], 0.2, 0.02, np.zeros((2, 1)), 1.0)
    same = g.labels[g.edges[:, 0]] == g.labels[g.edges[:, 1]]
    pairs_in, pairs_out = 2 * 150 * 149 / 2, 150 * 150
    assert abs(same.sum() / pairs_in - 0.2) < 0.02
    assert abs((~same).sum() / pairs_out - 0.02) < 0.005


def test_rng_streams_are_independent_and_reproducible():
    a = rng_from_seed(1, 2).random(4)
    assert np.array_equal(a, rng_from_seed(1, 2).random(4))
    assert not np.array_equal(a, rng_from_seed(1, 3).random(4))
