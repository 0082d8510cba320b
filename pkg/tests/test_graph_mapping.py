import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corptree.dataset import INDICATOR_NAMES, IndicatorPanel
from corptree.errors import DataError, InsufficientHistory, UnknownFormat
from corptree.graph_mapping import (
    CorpGraph,
    augment_plus,
    build_graph,
    cosine_similarity,
    export_graph,
    indicator_vectors,
    is_spanning_tree,
    max_spanning_tree,
    node_features,
    parse_edge_json,
)
from oracles import best_spanning_tree_weight


def panel_with_years(years, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(len(years), 29))
    return IndicatorPanel("A", list(years), values, [None] * len(years))


def random_similarity(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.uniform(-1.0, 1.0, size=(n, n))
    s = np.triu(s, k=1)
    s = s + s.T
    np.fill_diagonal(s, 1.0)
    return s


# --- indicator_vectors / node_features -----------------------------------------


def test_window_slices_most_recent_years():
    panel = panel_with_years(range(2014, 2022))
    rows = indicator_vectors(panel, 2021, 4)
    np.testing.assert_array_equal(rows, panel.values[4:8])


def test_window_clamps_short_history():
    panel = panel_with_years([2019, 2020, 2021])
    rows = indicator_vectors(panel, 2021, 8)
    assert rows.shape == (3, 29)


def test_window_respects_end_year():
    panel = panel_with_years(range(2014, 2022))
    rows = indicator_vectors(panel, 2017, 4)
    np.testing.assert_array_equal(rows, panel.values[0:4])


def test_single_year_panel_is_insufficient():
    panel = panel_with_years([2021])
    with pytest.raises(InsufficientHistory):
        indicator_vectors(panel, 2021, 4)


def test_node_features_left_pads_to_window():
    panel = panel_with_years([2020, 2021])
    feats = node_features(panel, 2021, 4)
    assert feats.shape == (29, 4)
    np.testing.assert_array_equal(feats[:, :2], 0.0)
    np.testing.assert_array_equal(feats[:, 2:], panel.values.T)


# --- cosine_similarity -----------------------------------------------------------


def test_cosine_identical_columns():
    m = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    s = cosine_similarity(m)
    assert s[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal_columns():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert cosine_similarity(m)[0, 1] == 0.0


def test_cosine_known_value():
    m = np.array([[1.0, 1.0], [0.0, 1.0]])
    expected = 1.0 / math.sqrt(2.0)  # direct evaluation of the formula
    assert cosine_similarity(m)[0, 1] == pytest.approx(expected, abs=1e-12)
    assert f"{cosine_similarity(m)[0, 1]:.8f}" == "0.70710678"


def test_cosine_symmetric_unit_diagonal_bounded():
    rng = np.random.default_rng(0)
    s = cosine_similarity(rng.normal(size=(5, 29)))
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 1.0)
    assert np.abs(s).max() <= 1.0 + 1e-12


def test_cosine_zero_norm_column_rule():
    m = np.array([[0.0, 1.0, 2.0], [0.0, 2.0, 1.0]])
    s = cosine_similarity(m)
    assert s[0, 1] == 0.0 and s[0, 2] == 0.0
    assert s[0, 0] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.floats(1e-3, 1e3), st.integers(0, 4))
def test_cosine_invariant_under_positive_column_rescale(seed, scale, col):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(4, 5))
    scaled = m.copy()
    scaled[:, col] *= scale
    assert np.abs(cosine_similarity(m) - cosine_similarity(scaled)).max() < 1e-9


def test_cosine_rejects_single_row():
    with pytest.raises(DataError):
        cosine_similarity(np.ones((1, 29)))


# --- max_spanning_tree -------------------------------------------------------------


def test_mst_two_vertices():
    s = np.array([[1.0, 0.3], [0.3, 1.0]])
    tree = max_spanning_tree(s)
    assert tree.edges == ((0, 1, 0.3),)


def test_mst_29_vertices_tree_contract():
    tree = max_spanning_tree(random_similarity(29, seed=5))
    assert tree.n_edges == 28
    assert is_spanning_tree(29, tree.edges)


def test_mst_matches_exhaustive_enumeration_n6():
    s = random_similarity(6, seed=11)
    tree = max_spanning_tree(s)
    got = math.fsum(w for _, _, w in sorted(tree.edges))
    assert got == best_spanning_tree_weight(s)


def test_mst_tie_break_is_lexicographic():
    n = 5
    s = np.full((n, n), 0.5)
    np.fill_diagonal(s, 1.0)
    tree = max_spanning_tree(s)
    assert [(i, j) for i, j, _ in tree.edges] == [(0, j) for j in range(1, n)]


def test_mst_edge_set_invariant_under_weight_shift():
    s = random_similarity(8, seed=3)
    base = {(i, j) for i, j, _ in max_spanning_tree(s).edges}
    shifted = {(i, j) for i, j, _ in max_spanning_tree(s + 0.37).edges}
    assert base == shifted


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 7), st.integers(0, 2**16))
def test_mst_optimal_for_small_graphs(n, seed):
    s = random_similarity(n, seed)
    tree = max_spanning_tree(s)
    assert is_spanning_tree(n, tree.edges)
    got = math.fsum(w for _, _, w in sorted(tree.edges))
    assert got == best_spanning_tree_weight(s)


# --- augment_plus ---------------------------------------------------------------------


def test_augment_zero_is_identity():
    s = random_similarity(10, seed=1)
    tree = max_spanning_tree(s)
    assert augment_plus(s, tree, 0).edges == tree.edges


def test_augment_adds_top_ten():
    s = random_similarity(29, seed=2)
    tree = max_spanning_tree(s)
    plus = augment_plus(s, tree, 10)
    assert plus.n_edges == 38
    assert plus.kind == "tree_plus" and plus.k_extra == 10


def test_augment_clamps_to_complete_graph():
    s = random_similarity(4, seed=4)
    tree = max_spanning_tree(s)
    plus = augment_plus(s, tree, 10)
    assert plus.n_edges == 6  # complete graph on 4 vertices
    assert plus.k_extra == 3


def test_augment_superset_and_distinct():
    s = random_similarity(12, seed=9)
    tree = max_spanning_tree(s)
    plus = augment_plus(s, tree, 5)
    tree_pairs = {(i, j) for i, j, _ in tree.edges}
    extra_pairs = [(i, j) for i, j, _ in plus.edges if (i, j) not in tree_pairs]
    assert set(plus.edges) >= set(tree.edges)
    assert len(extra_pairs) == len(set(extra_pairs)) == 5


def test_augment_picks_highest_leftover_weights():
    s = random_similarity(7, seed=13)
    tree = max_spanning_tree(s)
    plus = augment_plus(s, tree, 2)
    tree_pairs = {(i, j) for i, j, _ in tree.edges}
    leftovers = sorted(
        ((s[i, j], i, j) for i in range(7) for j in range(i + 1, 7) if (i, j) not in tree_pairs),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    expected = {(i, j) for _, i, j in leftovers[:2]}
    got = {(i, j) for i, j, _ in plus.edges if (i, j) not in tree_pairs}
    assert got == expected


# --- export / parse -----------------------------------------------------------------------


def test_export_two_vertex_dot():
    g = CorpGraph(n=2, edges=((0, 1, 0.25),))
    text = export_graph(g, "dot", ("alpha", "beta"))
    assert 'label="alpha"' in text
    assert '0 -- 1 [weight="0.25"];' in text


def test_export_29_vertex_dot_edge_lines():
    tree = max_spanning_tree(random_similarity(29, seed=21))
    text = export_graph(tree, "dot", INDICATOR_NAMES)
    assert sum("--" in line for line in text.splitlines()) == 28


def test_edge_json_round_trip():
    s = random_similarity(9, seed=8)
    plus = augment_plus(s, max_spanning_tree(s), 3)
    assert parse_edge_json(export_graph(plus, "edge-json")) == plus


def test_export_unknown_format():
    g = CorpGraph(n=2, edges=((0, 1, 1.0),))
    with pytest.raises(UnknownFormat):
        export_graph(g, "graphml")


def test_export_deterministic():
    s = random_similarity(9, seed=8)
    tree = max_spanning_tree(s)
    assert export_graph(tree, "edge-json") == export_graph(tree, "edge-json")
    payload = json.loads(export_graph(tree, "edge-json", INDICATOR_NAMES[:9]))
    assert payload["names"][0] == "total_assets"


# --- build_graph -------------------------------------------------------------------------


def test_build_graph_abs_similarity_changes_ranking():
    rng = np.random.default_rng(6)
    m = rng.normal(size=(4, 29))
    signed = build_graph(m)
    absolute = build_graph(m, abs_similarity=True)
    assert all(w >= 0 for _, _, w in absolute.edges)
    assert signed.n_edges == absolute.n_edges == 28


def test_build_graph_plus_k():
    rng = np.random.default_rng(7)
    g = build_graph(rng.normal(size=(4, 29)), plus_k=10)
    assert g.n_edges == 38
