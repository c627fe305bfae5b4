import math

import numpy as np
import pytest

from grapool import autodiff as ad
from grapool.autodiff import DimensionError, Tensor
from grapool.layers import GcnLayer, glorot, normalize_adjacency
from grapool.pooling import (
    AttentionAggregator,
    DiffPool,
    SAGPool,
    SpaPool,
    TopKPool,
    TopKScorer,
    affinity_attention,
    affinity_cosine,
    affinity_scalar,
    aux_loss,
    aux_loss_diffpool,
    aux_loss_dmon_adaptive,
    aux_loss_mincut_adaptive,
    connect_adjacency,
    diffpool_layer,
    modularity_matrix,
    pool_size,
    reduce_embeddings,
    sagpool_layer,
    spapool_select,
    topk_select,
    topkpool_layer,
)

from conftest import cliques, pool_objective, random_graph, tie_free_graph

PATH2 = np.array([[0.0, 1.0], [1.0, 0.0]])
TRIANGLE = 1 - np.eye(3)


def fixed_scorer(p, ratio=0.5):
    scorer = TopKScorer(len(p), np.random.default_rng(0), ratio)
    scorer.p = Tensor(np.asarray(p, float).reshape(-1, 1), requires_grad=True)
    return scorer


def fixed_gcn(weight, activation="none"):
    w = np.asarray(weight, float)
    layer = GcnLayer(*w.shape, np.random.default_rng(0), activation)
    layer.weight = Tensor(w, requires_grad=True)
    return layer


def assert_row_stochastic(s):
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


class TestTopkSelect:
    def test_hand_example(self):
        h = Tensor([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]])
        reps, scores, idx, y = topk_select(h, fixed_scorer([1.0, 0.0]))
        np.testing.assert_allclose(y, [1.0, 0.0, 2.0])
        assert idx == [2, 0]
        np.testing.assert_array_equal(reps.data, [[2.0, 0.0], [1.0, 0.0]])
        np.testing.assert_array_equal(scores.data, [[2.0], [1.0]])

    def test_score_ignores_norm_of_p(self):
        h = Tensor([[1.0, 0.0], [0.0, 1.0]])
        _, s1, _, _ = topk_select(h, fixed_scorer([3.0, 4.0]))
        _, s2, _, _ = topk_select(h, fixed_scorer([0.3, 0.4]))
        np.testing.assert_allclose(s1.data, s2.data, rtol=1e-14)

    @pytest.mark.parametrize("n, m", [(1, 1), (2, 1), (5, 3), (10, 5), (37, 19)])
    def test_size(self, n, m):
        assert pool_size(n, 0.5) == m

    def test_size_float_noise(self):
        assert pool_size(30, 0.1) == 3

    def test_single_node(self):
        _, _, idx, _ = topk_select(Tensor([[-4.0, 1.0]]), fixed_scorer([1.0, 1.0]))
        assert idx == [0]

    def test_ties_keep_lower_index(self):
        _, _, idx, _ = topk_select(Tensor(np.ones((6, 2))), fixed_scorer([1.0, -0.5]))
        assert idx == [0, 1, 2]

    def test_gradient_reaches_p_through_scaling(self, rng):
        h = Tensor(rng.normal(size=(5, 3)))
        scorer = TopKScorer(3, rng)

        def f():
            reps, scores, _, _ = topk_select(h, scorer)
            return ad.tsum(ad.scale_rows(reps, scores))

        assert ad.grad_check(f, scorer.p) < 1e-6


class TestAffinities:
    def test_cosine_examples(self):
        assert affinity_cosine(Tensor([[1.0, 0.0]]), Tensor([[2.0, 0.0]])).item() == pytest.approx(1.0)
        assert affinity_cosine(Tensor([[1.0, 0.0]]), Tensor([[0.0, 5.0]])).item() == 0.0
        assert affinity_cosine(Tensor([[3.0, 4.0]]), Tensor([[4.0, 3.0]])).item() == pytest.approx(0.96, abs=1e-15)

    def test_cosine_bounded(self, rng):
        out = affinity_cosine(Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(3, 4)))).data
        assert out.shape == (6, 3)
        assert np.all(np.abs(out) <= 1 + 1e-12)

    def test_scalar_examples(self, rng):
        assert affinity_scalar(Tensor([[1.0, 0.0]]), Tensor([[2.0, 0.0]])).item() == 2.0
        zero = ad.softmax_rows(affinity_scalar(Tensor(np.zeros((1, 3))), Tensor(rng.normal(size=(4, 3))))).data
        np.testing.assert_allclose(zero, np.full((1, 4), 0.25))
        h, r = Tensor(rng.normal(size=(3, 2))), rng.normal(size=(2, 2))
        np.testing.assert_allclose(
            affinity_scalar(h, Tensor(2.5 * r)).data, 2.5 * affinity_scalar(h, Tensor(r)).data, rtol=1e-14
        )

    def test_attention_identity(self):
        agg = AttentionAggregator.from_weights([(np.eye(2), np.zeros(2))], [(np.eye(2), np.zeros(2))])
        out = affinity_attention(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]]), agg)
        assert out.item() == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_attention_zero_keys_uniform(self, rng):
        agg = AttentionAggregator(3, rng)
        agg.key = AttentionAggregator.from_weights([(np.eye(3), np.zeros(3))], [(np.zeros((3, 16)), np.zeros(16))]).key
        out = affinity_attention(Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(2, 3))), agg)
        np.testing.assert_array_equal(out.data, np.zeros((5, 2)))
        np.testing.assert_allclose(ad.softmax_rows(out).data, 0.5)

    @pytest.mark.parametrize("n, c", [(1, 1), (4, 2), (7, 4)])
    def test_attention_shape(self, rng, n, c):
        agg = AttentionAggregator(3, rng)
        assert affinity_attention(Tensor(rng.normal(size=(n, 3))), Tensor(rng.normal(size=(c, 3))), agg).shape == (n, c)

    def test_attention_width_mismatch(self, rng):
        agg = AttentionAggregator(3, rng)
        with pytest.raises(DimensionError):
            affinity_attention(Tensor(np.ones((2, 4))), Tensor(np.ones((1, 4))), agg)


class TestSpapoolAssign:
    def test_duplicated_directions(self):
        h = Tensor([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        s, centroids, idx, scores = spapool_select(h, fixed_scorer([1.0, 0.0]))
        np.testing.assert_allclose(scores, [1, 1, 0, 0])
        assert idx == [0, 1]
        np.testing.assert_array_equal(centroids.data, [[1.0, 0.0], [1.0, 0.0]])
        np.testing.assert_allclose(s.data, np.full((4, 2), 0.5))

    def test_two_nodes_one_column(self, rng):
        layer = SpaPool(3, rng)
        out = layer(PATH2, Tensor(rng.normal(size=(2, 3))))
        np.testing.assert_array_equal(out.assignment.data, [[1.0], [1.0]])

    @pytest.mark.parametrize("aggregator", ["cosine", "scalar", "attention"])
    @pytest.mark.parametrize("selection", ["topk", "sag"])
    @pytest.mark.parametrize("n", [1, 2, 5, 9, 16])
    def test_shape_and_stochastic(self, rng, aggregator, selection, n):
        g = random_graph(rng, n, f=4)
        out = SpaPool(4, rng, aggregator=aggregator, selection=selection)(g.adjacency, Tensor(g.features))
        assert out.assignment.shape == (n, pool_size(n, 0.5))
        assert out.features.shape == (pool_size(n, 0.5), 4)
        assert_row_stochastic(out.assignment.data)
        a = out.adjacency.data
        np.testing.assert_allclose(a, a.T, atol=1e-12)

    def test_pools_input_features(self, rng):
        g = random_graph(rng, 6, f=3)
        out = SpaPool(3, rng)(g.adjacency, Tensor(g.features))
        np.testing.assert_allclose(out.features.data, out.assignment.data.T @ g.features, atol=1e-14)

    def test_unknown_aggregator(self, rng):
        with pytest.raises(ValueError):
            SpaPool(3, rng, aggregator="dot")

    @pytest.mark.parametrize("aggregator", ["cosine", "scalar", "attention"])
    @pytest.mark.parametrize("selection", ["topk", "sag"])
    def test_gradients_with_cross_entropy(self, rng, aggregator, selection):
        layer = SpaPool(3, rng, aggregator=aggregator, selection=selection)
        g = tie_free_graph(rng, layer, 5, 3)
        w = glorot(rng, 3, 2)
        h = Tensor(g.features, requires_grad=True)
        obj = pool_objective(layer, g, w, 1)
        assert ad.grad_check(lambda: obj(h)[0], [h, w] + layer.parameters()) < 1e-4


class TestReduceConnect:
    def test_reduce_examples(self, rng):
        h = rng.normal(size=(3, 2))
        np.testing.assert_array_equal(reduce_embeddings(Tensor(np.eye(3)), Tensor(h)).data, h)
        ones = reduce_embeddings(Tensor(np.ones((2, 1))), Tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(ones.data, [[4.0, 6.0]])
        uniform = reduce_embeddings(Tensor(np.full((2, 2), 0.5)), Tensor([[2.0, 0.0], [0.0, 2.0]]))
        np.testing.assert_array_equal(uniform.data, [[1.0, 1.0], [1.0, 1.0]])

    def test_reduce_mismatch(self):
        with pytest.raises(DimensionError):
            reduce_embeddings(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))

    def test_connect_examples(self, rng):
        a = random_graph(rng, 4).adjacency
        np.testing.assert_array_equal(connect_adjacency(Tensor(np.eye(4)), a).data, a)
        assert connect_adjacency(Tensor(np.ones((2, 1))), PATH2).item() == 2.0

    def test_connect_one_hot_keeps_mass(self):
        adj, s = cliques([3, 4, 2])
        assert connect_adjacency(Tensor(s), adj).data.sum() == adj.sum()

    def test_connect_mismatch(self):
        with pytest.raises(DimensionError):
            connect_adjacency(Tensor(np.ones((3, 2))), np.ones((2, 2)))


class TestAuxLosses:
    def test_diffpool_path(self):
        rep = aux_loss_diffpool(Tensor(np.full((2, 2), 0.5)), PATH2).values()
        assert rep["link_pred"] == pytest.approx(1.0, abs=1e-9)
        assert rep["entropy"] == pytest.approx(math.log(2), abs=1e-9)

    def test_diffpool_zero_cases(self):
        s = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        rep = aux_loss_diffpool(Tensor(s), s @ s.T).values()
        assert rep["link_pred"] == pytest.approx(0.0, abs=1e-12)
        assert rep["entropy"] == pytest.approx(0.0, abs=1e-9)

    def test_mincut_cliques(self):
        adj, s = cliques([3, 3])
        rep = aux_loss_mincut_adaptive(Tensor(s), adj).values()
        assert rep["cut"] == pytest.approx(-1.0, abs=1e-9)
        assert rep["orthogonality"] == pytest.approx(0.0, abs=1e-9)

    def test_mincut_range(self, rng):
        for _ in range(20):
            g = random_graph(rng, 7)
            s = ad.softmax_rows(Tensor(rng.normal(size=(7, 3)))).data
            cut = aux_loss_mincut_adaptive(Tensor(s), g.adjacency).values()["cut"]
            assert -1 - 1e-12 <= cut <= 0

    def test_modularity_triangle(self):
        b = modularity_matrix(TRIANGLE)
        np.testing.assert_allclose(b, np.where(np.eye(3) == 1, -2 / 3, 1 / 3), atol=1e-15)

    def test_dmon_two_triangles(self):
        adj, s = cliques([3, 3])
        rep = aux_loss_dmon_adaptive(Tensor(s), adj).values()
        assert rep["modularity"] == pytest.approx(-0.5, abs=1e-9)
        assert rep["collapse"] == pytest.approx(0.0, abs=1e-9)

    def test_dmon_edgeless(self):
        rep = aux_loss_dmon_adaptive(Tensor(np.full((3, 1), 1.0)), np.zeros((3, 3))).values()
        assert rep["modularity"] == 0.0

    def test_nonnegative(self, rng):
        g = random_graph(rng, 6)
        s = ad.softmax_rows(Tensor(rng.normal(size=(6, 3)))).data
        rep = aux_loss_diffpool(Tensor(s), g.adjacency).values()
        assert rep["link_pred"] >= 0 and rep["entropy"] >= 0

    @pytest.mark.parametrize("kind", ["diffpool", "mincut", "dmon"])
    def test_gradients(self, rng, kind):
        adj = random_graph(rng, 6, p=0.6).adjacency
        logits = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        assert ad.grad_check(lambda: aux_loss(kind, ad.softmax_rows(logits), adj).total, logits) < 1e-6

    def test_none_and_unknown(self):
        s = Tensor(np.ones((2, 1)))
        assert aux_loss("none", s, PATH2) is None
        with pytest.raises(ValueError):
            aux_loss("entropy", s, PATH2)


class TestSparseBaselines:
    def test_topk_full_ratio(self, rng):
        g = random_graph(rng, 4, f=2)
        scorer = TopKScorer(2, rng, ratio=1.0)
        out = topkpool_layer(g.adjacency, Tensor(g.features), scorer)
        y = g.features @ scorer.p.data / np.linalg.norm(scorer.p.data)
        order = np.argsort(-y.ravel(), kind="stable")
        np.testing.assert_allclose(out.features.data, (g.features * np.tanh(y))[order], atol=1e-14)
        np.testing.assert_array_equal(out.adjacency.data, g.adjacency[np.ix_(order, order)])

    def test_topk_single_node(self):
        out = topkpool_layer(np.zeros((1, 1)), Tensor([[0.5, 0.5]]), fixed_scorer([1.0, 0.0]))
        np.testing.assert_allclose(out.features.data, [[0.5 * math.tanh(0.5), 0.5 * math.tanh(0.5)]])

    def test_topk_path_endpoints(self):
        path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
        h = Tensor([[2.0], [0.0], [1.0]])
        out = topkpool_layer(path, h, fixed_scorer([1.0], ratio=0.5))
        assert out.indices == [0, 2]
        np.testing.assert_array_equal(out.adjacency.data, np.zeros((2, 2)))

    def test_sag_ties_regular(self, rng):
        out = sagpool_layer(TRIANGLE, Tensor(np.ones((3, 2))), GcnLayer(2, 1, rng, "none"))
        assert out.indices == [0, 1]

    def test_sag_full_ratio(self, rng):
        g = random_graph(rng, 5, f=2)
        out = sagpool_layer(g.adjacency, Tensor(g.features), GcnLayer(2, 1, rng, "none"), ratio=1.0)
        assert sorted(out.indices) == list(range(5))

    def test_sag_star(self):
        # centre 0; degrees with self-loop 4, 2, 2, 2
        star = np.zeros((4, 4))
        star[0, 1:] = star[1:, 0] = 1
        h = Tensor([[1.0], [2.0], [3.0], [4.0]])
        out = sagpool_layer(star, h, fixed_gcn([[1.0]]))
        centre = 1 / 4 + (2 + 3 + 4) / math.sqrt(8)
        leaves = [1 / math.sqrt(8) + v / 2 for v in (2, 3, 4)]
        np.testing.assert_allclose(out.scores, [centre] + leaves, rtol=1e-14)
        assert out.indices == [0, 3]

    def test_sag_needs_one_column(self, rng):
        with pytest.raises(DimensionError):
            sagpool_layer(TRIANGLE, Tensor(np.ones((3, 2))), GcnLayer(2, 2, rng))

    @pytest.mark.parametrize("cls", [TopKPool, SAGPool])
    def test_gradients(self, rng, cls):
        layer = cls(3, rng)
        g = random_graph(rng, 6, f=3)
        h = Tensor(g.features, requires_grad=True)
        assert ad.grad_check(lambda: ad.tsum(layer(g.adjacency, h).features), [h] + layer.parameters()) < 1e-5


class TestDiffPool:
    def test_single_cluster(self, rng):
        g = random_graph(rng, 5, f=3)
        embed = GcnLayer(3, 3, rng)
        out = diffpool_layer(g.adjacency, Tensor(g.features), GcnLayer(3, 1, rng, "none"), embed)
        np.testing.assert_array_equal(out.assignment.data, np.ones((5, 1)))
        z = embed(normalize_adjacency(g.adjacency), Tensor(g.features)).data
        np.testing.assert_allclose(out.features.data, z.sum(axis=0, keepdims=True), atol=1e-13)

    def test_two_node_by_hand(self):
        h = np.array([[1.0, 0.0], [0.0, 2.0]])
        a_norm = np.full((2, 2), 0.5)
        wa = np.array([[1.0, -1.0], [0.0, 1.0]])
        we = np.array([[1.0, 0.0], [-1.0, 1.0]])
        out = diffpool_layer(PATH2, Tensor(h), fixed_gcn(wa), fixed_gcn(we, "relu"))
        logits = a_norm @ h @ wa
        s = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        z = np.maximum(a_norm @ h @ we, 0)
        np.testing.assert_allclose(out.assignment.data, s, atol=1e-15)
        np.testing.assert_allclose(out.features.data, s.T @ z, atol=1e-15)
        np.testing.assert_allclose(out.adjacency.data, s.T @ PATH2 @ s, atol=1e-15)
        assert set(out.aux.terms) == {"link_pred", "entropy"}

    def test_stochastic_and_gradients(self, rng):
        layer = DiffPool(3, rng, clusters=3)
        g = random_graph(rng, 6, f=3)
        h = Tensor(g.features, requires_grad=True)
        assert_row_stochastic(layer(g.adjacency, h).assignment.data)

        def f():
            out = layer(g.adjacency, h)
            return ad.tsum(out.features) + out.aux.total

        assert ad.grad_check(f, [h] + layer.parameters()) < 1e-4
