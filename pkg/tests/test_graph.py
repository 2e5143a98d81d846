import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipsbr._validation import UsageError
from clipsbr.dataset import Session
from clipsbr.graph import (Graph, build_graph, integrate_item, read_edgelist,
                           write_edgelist)


def sess(*items):
    return Session(user=0, items=tuple(items), ordinal=0)


class TestBuild:
    def test_adjacent_pair_counts(self):
        g = build_graph([sess(0, 1, 2, 1)], num_items=3)
        assert g.weight(0, 1) == 1.0
        assert g.weight(1, 2) == 2.0  # 1->2 and 2->1 both count the {1,2} edge
        assert g.weight(0, 2) == 0.0

    def test_repeat_becomes_self_loop(self):
        g = build_graph([sess(4, 4, 5)], num_items=6)
        assert g.weight(4, 4) == 1.0
        assert g.strength(4) == 3.0  # loop counts twice plus the edge to 5

    def test_accumulates_across_sessions(self):
        g = build_graph([sess(0, 1), sess(1, 0), sess(0, 1)], num_items=2)
        assert g.weight(0, 1) == 3.0

    def test_degree_is_twice_total_weight(self):
        g = build_graph([sess(0, 1, 2, 0, 0)], num_items=3)
        assert g.degree_sum() == pytest.approx(2 * g.total_weight())

    @given(st.lists(st.lists(st.integers(0, 5), min_size=2, max_size=8),
                    min_size=1, max_size=10))
    @settings(max_examples=60, deadline=None)
    def test_mass_equals_transition_count(self, sessions):
        objs = [Session(user=0, items=tuple(s), ordinal=i)
                for i, s in enumerate(sessions)]
        g = build_graph(objs, num_items=6)
        assert g.total_weight() == sum(len(s) - 1 for s in sessions)
        assert g.degree_sum() == pytest.approx(2 * g.total_weight())


class TestGraphOps:
    def test_edge_validation(self):
        g = Graph(3)
        with pytest.raises(ValueError):
            g.add_edge(0, 3)
        with pytest.raises(ValueError):
            g.add_edge(0, 1, weight=0)

    def test_copy_is_independent(self):
        g = Graph(2)
        g.add_edge(0, 1)
        h = g.copy()
        h.add_edge(0, 1)
        assert g.weight(0, 1) == 1.0 and h.weight(0, 1) == 2.0

    def test_connected_within(self):
        g = Graph(5)
        g.add_edge(0, 1)
        g.add_edge(1, 2)
        g.add_edge(3, 4)
        assert g.connected_within([0, 1, 2])
        assert not g.connected_within([0, 1, 3])
        assert g.connected_within([4])
        assert g.connected_within([])

    def test_integrate_item(self):
        g = Graph(5)
        g.add_edge(0, 1)
        added = integrate_item(g, 4, [0, 2, 0, 4])
        assert added
        assert g.weight(4, 0) == 1.0 and g.weight(4, 2) == 1.0
        assert g.weight(4, 4) == 0.0  # never links to itself
        assert not integrate_item(g, 3, [3])


class TestEdgeList:
    def test_round_trip(self, tmp_path):
        g = build_graph([sess(0, 1, 2, 2)], num_items=4)
        path = tmp_path / "g.edges"
        write_edgelist(g, path)
        back = read_edgelist(path)
        assert back.num_nodes == 4
        assert sorted(back.edges()) == sorted(g.edges())

    def test_header_declares_isolated_nodes(self, tmp_path):
        g = Graph(10)
        g.add_edge(0, 1)
        path = tmp_path / "g.edges"
        write_edgelist(g, path)
        assert read_edgelist(path).num_nodes == 10

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "bad.edges"
        path.write_text("#nodes 3\n0 1\n")
        with pytest.raises(UsageError):
            read_edgelist(path)
        path.write_text("#nodes 3\n0 x 1.0\n")
        with pytest.raises(UsageError):
            read_edgelist(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(UsageError):
            read_edgelist(tmp_path / "none.edges")
