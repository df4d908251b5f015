import math

import numpy as np
import pytest
from hypothesis import given, settings

from nesycl.symbolic import (
    DEFAULT_COSTS,
    DuplicateClass,
    EmptyClass,
    EmptyKnowledgeBase,
    GedCache,
    GedCosts,
    GraphTooLarge,
    KnowledgeBase,
    classify,
    ged,
    kb_update,
    predict,
    select_prototype,
    sim,
)

from oracles import brute_force_ged, graphs, make_graph, random_graph, softmax_ref

A = make_graph([(2, 0)])
B = make_graph([(2, 1)])


class TestGed:
    @given(graphs(max_nodes=6))
    @settings(max_examples=50, deadline=None)
    def test_identity(self, g):
        assert ged(g, g) == 0

    def test_color_substitution(self):
        assert ged(A, B) == 1.0 == brute_force_ged(A, B)

    def test_single_deletion(self):
        assert ged(A, make_graph([])) == 2.0

    def test_edge_substitution_and_orientation(self):
        g1 = make_graph([(0, 0), (1, 1)], {(0, 1): 0})
        g2 = make_graph([(0, 0), (1, 1)], {(0, 1): 3})
        assert ged(g1, g2) == 1.0
        # stored from the other end the same relation reads bin + 4
        g3 = make_graph([(1, 1), (0, 0)], {(0, 1): 4})
        assert ged(g1, g3) == 0.0

    def test_brute_force_200_pairs(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            a, b = random_graph(rng, 4), random_graph(rng, 4)
            assert ged(a, b) == brute_force_ged(a, b)

    def test_brute_force_custom_costs(self):
        rng = np.random.default_rng(5)
        costs = GedCosts(0.5, 1.5, 1.25, 0.75, 2.0)
        for _ in range(40):
            a, b = random_graph(rng, 4), random_graph(rng, 3)
            assert ged(a, b, costs) == pytest.approx(brute_force_ged(a, b, 0.5, 1.5, 1.25, 0.75, 2.0), abs=1e-12)

    def test_upper_bound_is_exact_below_and_clipped_above(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = random_graph(rng, 5), random_graph(rng, 5)
            d = ged(a, b)
            assert ged(a, b, upper_bound=d + 0.5) == d
            assert ged(a, b, upper_bound=d) == d

    def test_size_limit(self):
        big = make_graph([(0, 0)] * 7)
        with pytest.raises(GraphTooLarge):
            ged(big, A)
        assert ged(big, big, max_nodes=7) == 0

    def test_negative_costs_rejected(self):
        with pytest.raises(ValueError):
            GedCosts(node_indel=-1)

    def test_six_node_graphs_are_fast_enough(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            ged(random_graph(rng, 6, 6), random_graph(rng, 6, 6))


class TestMetricAxioms:
    @given(graphs(max_nodes=5), graphs(max_nodes=5))
    @settings(max_examples=100, deadline=None)
    def test_symmetry(self, a, b):
        assert ged(a, b) == ged(b, a)

    def test_symmetry_and_triangle_1000_triples(self):
        rng = np.random.default_rng(77)
        for _ in range(1000):
            a, b, c = (random_graph(rng, 5) for _ in range(3))
            ab, bc, ac = ged(a, b), ged(b, c), ged(a, c)
            assert ab == ged(b, a)
            assert ab + bc >= ac - 1e-12


class TestSim:
    def test_values(self):
        assert sim(A, A) == 1.0
        assert sim(A, B) == 0.5
        g = make_graph([(0, 0), (1, 1)], {(0, 1): 0})
        h = make_graph([(0, 0)])
        assert ged(g, h) == 3.0 and sim(g, h) == 0.25


class TestSelectPrototype:
    def test_singleton_and_identical(self):
        assert select_prototype([A]) is A
        assert select_prototype([B, B, B]) == B

    def test_empty(self):
        with pytest.raises(EmptyClass):
            select_prototype([])

    def test_majority_medoid(self):
        a = make_graph([(0, 0), (1, 1)], {(0, 1): 0})
        b = make_graph([(0, 0), (1, 1)], {(0, 1): 2})
        b2 = make_graph([(0, 0), (1, 2)], {(0, 1): 0})
        assert ged(a, b) == 1
        assert select_prototype([b, a, a]) == a
        # a-b2 differ by a color; a is still the unique minimiser of total distance
        c = make_graph([(0, 0), (1, 1), (2, 2)], {(0, 1): 0, (0, 2): 0, (1, 2): 0})
        assert ged(a, c) == 4
        assert select_prototype([a, a, c]) == a
        assert select_prototype([b2, a, b]) == a

    def test_tie_breaks_by_key(self):
        assert select_prototype([B, A]) == min([A, B], key=lambda g: g.key)
        assert select_prototype([A, B]) == select_prototype([B, A])

    def test_matches_direct_sum(self):
        rng = np.random.default_rng(4)
        members = [random_graph(rng, 3) for _ in range(8)]
        totals = [sum(ged(g, h) for h in members) for g in members]
        best = min(totals)
        chosen = select_prototype(members)
        assert sum(ged(chosen, h) for h in members) == best


class TestKnowledgeBase:
    def test_update_sizes_and_timestep(self):
        kb = kb_update(KnowledgeBase(), {0: [A]})
        assert len(kb) == 1 and kb.timestep == 1
        rng = np.random.default_rng(0)
        big = KnowledgeBase({y: random_graph(rng, 3) for y in range(10)}, 1)
        kb2 = kb_update(big, {y: [random_graph(rng, 3)] for y in range(10, 20)})
        assert len(kb2) == 20 and kb2.timestep == 2

    def test_old_entries_untouched(self):
        kb1 = kb_update(KnowledgeBase(), {0: [A]})
        kb2 = kb_update(kb1, {1: [B]})
        assert kb2.entries[0] is kb1.entries[0]
        assert len(kb1) == 1
        with pytest.raises(TypeError):
            kb2.entries[0] = B

    def test_duplicate_class(self):
        kb = kb_update(KnowledgeBase(), {0: [A]})
        with pytest.raises(DuplicateClass):
            kb_update(kb, {0: [B]})

    def test_order_invariance(self):
        rng = np.random.default_rng(8)
        t1 = {y: [random_graph(rng, 4) for _ in range(5)] for y in range(3)}
        t2 = {y: [random_graph(rng, 4) for _ in range(5)] for y in range(3, 6)}
        forward = kb_update(kb_update(KnowledgeBase(), t1), t2)
        backward = kb_update(kb_update(KnowledgeBase(), t2), t1)
        assert forward.to_json() == backward.to_json()

    def test_json_roundtrip(self):
        rng = np.random.default_rng(3)
        kb = kb_update(KnowledgeBase(), {y: [random_graph(rng, 4)] for y in (5, 2, 9)})
        again = KnowledgeBase.from_json(kb.to_json())
        assert again.to_json() == kb.to_json()
        assert list(again.entries) == [2, 5, 9]


class TestClassify:
    def test_single_class(self):
        kb = KnowledgeBase({3: A}, 1)
        assert classify(kb, B) == [(3, 1.0)]

    def test_softmax_value(self):
        g4 = make_graph([(0, 0), (1, 1)], {(0, 1): 0})
        far = make_graph([(1, 4)])
        assert ged(g4, far) == 4.0
        kb = KnowledgeBase({0: g4, 1: far}, 1)
        dist = dict(classify(kb, g4))
        expected = math.e / (math.e + math.exp(0.2))
        assert dist[0] == pytest.approx(expected, abs=1e-12)
        assert dist[0] == pytest.approx(0.68997, abs=1e-5)

    def test_equidistant_tie_goes_to_lowest_id(self):
        q = make_graph([(2, 2)])
        kb = KnowledgeBase({7: A, 4: B}, 1)
        dist = classify(kb, q)
        assert dist[0][1] == dist[1][1]
        assert predict(dist) == 4

    def test_empty(self):
        with pytest.raises(EmptyKnowledgeBase):
            classify(KnowledgeBase(), A)

    def test_unknown_scope(self):
        with pytest.raises(KeyError):
            classify(KnowledgeBase({0: A}, 1), A, classes=[1])

    @given(graphs(max_nodes=4))
    @settings(max_examples=50, deadline=None)
    def test_distribution_sums_to_one(self, q):
        rng = np.random.default_rng(0)
        kb = KnowledgeBase({y: random_graph(rng, 4) for y in range(6)}, 1)
        dist = classify(kb, q)
        assert abs(sum(p for _, p in dist) - 1.0) < 1e-9
        assert all(p >= 0 for _, p in dist)
        ref = softmax_ref([1 / (1 + brute_force_ged(q, kb.entries[y])) for y in range(6)])
        assert [p for _, p in dist] == pytest.approx(ref, abs=1e-12)

    def test_masking_ignores_unrelated_classes(self):
        rng = np.random.default_rng(12)
        kb = KnowledgeBase({y: random_graph(rng, 4) for y in range(4)}, 1)
        queries = [random_graph(rng, 4) for _ in range(20)]
        before = [classify(kb, q, classes=[0, 1, 2, 3]) for q in queries]
        kb2 = kb_update(kb, {y: [random_graph(rng, 4)] for y in range(4, 10)})
        after = [classify(kb2, q, classes=[0, 1, 2, 3]) for q in queries]
        assert before == after

    def test_zero_forgetting_across_updates(self):
        rng = np.random.default_rng(21)
        task0 = {y: [random_graph(rng, 4) for _ in range(4)] for y in range(3)}
        kb = kb_update(KnowledgeBase(), task0)
        queries = [random_graph(rng, 4) for _ in range(15)]
        ref = [repr(classify(kb, q, classes=task0)) for q in queries]
        for t in range(1, 5):
            kb = kb_update(kb, {y: [random_graph(rng, 4) for _ in range(3)] for y in range(3 * t, 3 * t + 3)})
            assert [repr(classify(kb, q, classes=task0)) for q in queries] == ref

    def test_cache_is_transparent(self):
        rng = np.random.default_rng(2)
        kb = KnowledgeBase({y: random_graph(rng, 4) for y in range(5)}, 1)
        cache = GedCache(DEFAULT_COSTS)
        for _ in range(10):
            q = random_graph(rng, 4)
            assert classify(kb, q, distance=cache) == classify(kb, q)
        assert 0 < len(cache) <= 50
