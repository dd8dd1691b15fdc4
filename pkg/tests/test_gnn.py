"""Message passing encoder: a hand-traced two-node graph, batching, locality and gradients."""

import numpy as np
import pytest

from conftest import random_term
from gnn import (
    OOV_TOKEN, GnnError, GnnParams, GraphBatch, RoundParams, Vocabulary, embed_graphs,
    embed_graphs_backward, encode, pool
)
from graphrep import BLIND_TOKEN, TermGraph, add_random_edges, build_ast, represent
from numerics import DenseLayer, MlpParams, mlp_forward
from schemas import Direction, GnnConfig, GraphKind, RepresentationConfig
from sexpr import parse


def _layer(store, name, weight, activation="identity"):
    weight = np.asarray(weight, dtype=np.float64)
    store[f"{name}/w"] = weight
    store[f"{name}/b"] = np.zeros(weight.shape[1])
    return MlpParams(store, (DenseLayer(f"{name}/w", f"{name}/b", activation),))


def hand_params(direction_weight: float = 2.0) -> GnnParams:
    """
    Width 2, two rounds. Token vectors pass through unchanged, edge label
    embeddings are zero, an s-message is the parent state, an s-hat-message
    is the child state, and the update adds ``direction_weight`` times the
    mean s-message plus the mean s-hat-message.
    """
    store = {"emb": np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])}
    eye, zero = np.eye(2), np.zeros((2, 2))
    first_block = np.vstack([eye, zero, zero])
    update = np.vstack([zero, direction_weight * eye, eye])
    rounds = tuple(
        RoundParams(
            edge=_layer(store, f"r{t}/edge", first_block),
            edge_hat=_layer(store, f"r{t}/edge_hat", first_block),
            aggr=_layer(store, f"r{t}/aggr", update)
        )
        for t in range(2)
    )
    config = GnnConfig(hops=2, token_embedding_size=2, node_embedding_size=2,
                       mlp_hidden_size=2, pooling_widths=(2, 2))
    return GnnParams(
        store=store,
        embedding="emb",
        mlp_v=_layer(store, "v", eye),
        mlp_e=_layer(store, "e", np.zeros((1, 2))),
        rounds=rounds,
        pool=_layer(store, "pool", eye, activation="relu"),
        config=config
    )


# vocabulary rows: <oov>, f, y, x
VOCAB = Vocabulary((OOV_TOKEN, "f", "y", "x"))


def two_nodes(direction=Direction.BOTH) -> TermGraph:
    """Parent f with one child y."""
    return TermGraph(("f", "y"), ((0, 1, 0),), 0, GraphKind.SUBEXPR_SHARED, direction)


class TestHandTrace:

    def test_both_directions(self):
        # round 1: f = [1,0] + [0,1] = [1,1];  y = [0,1] + 2*[1,0] = [2,1]
        # round 2: f = [1,1] + [2,1] = [3,2];  y = [2,1] + 2*[1,1] = [4,3]
        out, _ = encode(GraphBatch.from_graphs([two_nodes()], VOCAB), hand_params())
        np.testing.assert_allclose(out.values, [[3.0, 2.0], [4.0, 3.0]])
        assert out.rounds == 2

    def test_top_down_only(self):
        # the parent never hears from its child
        out, _ = encode(GraphBatch.from_graphs([two_nodes(Direction.TOP_DOWN)], VOCAB), hand_params())
        np.testing.assert_allclose(out.values, [[1.0, 0.0], [4.0, 1.0]])

    def test_bottom_up_only(self):
        # round 1: f = [1,1], y = [0,1];  round 2: f = [1,2], y = [0,1]
        out, _ = encode(GraphBatch.from_graphs([two_nodes(Direction.BOTTOM_UP)], VOCAB), hand_params())
        np.testing.assert_allclose(out.values, [[1.0, 2.0], [0.0, 1.0]])

    def test_max_pooling(self):
        params = hand_params()
        nodes, _ = encode(GraphBatch.from_graphs([two_nodes()], VOCAB), params)
        pooled, _ = pool(nodes, params)
        np.testing.assert_allclose(pooled, [[4.0, 3.0]])

    def test_zero_rounds_is_the_token_projection(self):
        params = hand_params()
        params = GnnParams(params.store, params.embedding, params.mlp_v, params.mlp_e, (),
                           params.pool, params.config)
        out, _ = encode(GraphBatch.from_graphs([two_nodes()], VOCAB), params)
        np.testing.assert_allclose(out.values, [[1.0, 0.0], [0.0, 1.0]])


class TestBatch:

    def test_disjoint_union(self, forall_refl):
        g1 = represent(forall_refl)
        g2 = build_ast(parse("(a f x)"))
        vocab = Vocabulary.from_graphs([g1, g2])
        batch = GraphBatch.from_graphs([g1, g2], vocab)
        assert list(batch.segments) == [0, g1.node_count, g1.node_count + 3]
        assert batch.src.min() >= 0 and batch.dst.max() < batch.node_count
        assert batch.src[-1] == g1.node_count

    def test_batched_equals_separate(self, forall_refl):
        config = GnnConfig(hops=2, token_embedding_size=4, node_embedding_size=4,
                           mlp_hidden_size=6, pooling_widths=(5, 7), residual_init_scale=1.0)
        graphs = [represent(forall_refl), represent(parse("(a f x)"), RepresentationConfig(random_edges=True))]
        vocab = Vocabulary.from_graphs(graphs)
        params = GnnParams.create({}, "g", len(vocab), config, np.random.default_rng(0), np.float64)
        together, _ = embed_graphs(graphs, vocab, params)
        for i, g in enumerate(graphs):
            alone, _ = embed_graphs([g], vocab, params)
            np.testing.assert_allclose(together[i], alone[0], rtol=1e-12)

    def test_unknown_tokens_use_the_oov_row(self):
        vocab = Vocabulary.from_tokens(["f", "y"])
        assert vocab.tokens == (OOV_TOKEN, "f", BLIND_TOKEN, "y")
        assert list(vocab.ids(["y", "zzz"])) == [3, 0]

    def test_vocabulary_must_start_with_oov(self):
        with pytest.raises(GnnError):
            Vocabulary(("f",))

    def test_no_graphs(self):
        with pytest.raises(GnnError):
            GraphBatch.from_graphs([], VOCAB)

    def test_parameter_layout(self):
        config = GnnConfig(hops=3, token_embedding_size=4, node_embedding_size=4,
                           mlp_hidden_size=6, pooling_widths=(5, 7))
        store = {}
        params = GnnParams.create(store, "g", 10, config, np.random.default_rng(0))
        assert store["g/token_embedding"].shape == (10, 4)
        assert len(params.rounds) == 3
        assert params.rounds[0].edge.input_size == 12
        assert params.pool.output_size == 7
        assert "g/round2/aggr/w1" in store
        assert "g/round0/edge/w0" in store and "g/round1/edge/w0" in store


class TestGradients:

    def test_encoder_and_pool_match_finite_differences(self, forall_refl):
        config = GnnConfig(hops=2, token_embedding_size=3, node_embedding_size=3,
                           mlp_hidden_size=4, pooling_widths=(4, 5), residual_init_scale=1.0)
        graphs = [represent(forall_refl), represent(parse("(a (v A f) (c B g))"),
                                                    RepresentationConfig(random_edges=True, random_seed=2))]
        vocab = Vocabulary.from_graphs(graphs)
        store = {}
        params = GnnParams.create(store, "g", len(vocab), config, np.random.default_rng(3), np.float64)
        weights = np.random.default_rng(5).normal(size=(2, 5))

        def loss():
            pooled, _ = embed_graphs(graphs, vocab, params)
            return float((pooled * weights).sum())

        _, tapes = embed_graphs(graphs, vocab, params)
        grads = embed_graphs_backward(tapes, weights.copy(), {})
        rng = np.random.default_rng(9)
        names = ["g/token_embedding", "g/mlp_v/w0", "g/mlp_e/w0", "g/mlp_e/b1",
                 "g/round0/edge/w0", "g/round1/edge_hat/w1", "g/round0/aggr/w0", "g/pool/w1"]
        for name in names:
            for _ in range(3):
                index = tuple(int(rng.integers(0, s)) for s in store[name].shape)
                eps, old = 1e-6, store[name][index]
                store[name][index] = old + eps
                up = loss()
                store[name][index] = old - eps
                down = loss()
                store[name][index] = old
                assert grads[name][index] == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-7), name


def random_params(vocab, hops=2, scale=1.0, seed=0, **overrides):
    config = GnnConfig(hops=hops, token_embedding_size=4, node_embedding_size=4, mlp_hidden_size=6,
                       pooling_widths=(5, 7), residual_init_scale=scale, **overrides)
    return GnnParams.create({}, "g", len(vocab), config, np.random.default_rng(seed), np.float64)


def path_graph(length: int) -> TermGraph:
    tokens = tuple(f"t{i}" for i in range(length))
    edges = tuple((i, i + 1, 0) for i in range(length - 1))
    return TermGraph(tokens, edges, 0, GraphKind.TREE)


def with_token(graph: TermGraph, node: int, token: str) -> TermGraph:
    tokens = list(graph.tokens)
    tokens[node] = token
    return TermGraph(tuple(tokens), graph.edges, graph.root, graph.kind, graph.direction)


def node_values(graph, vocab, params):
    return encode(GraphBatch.from_graphs([graph], vocab), params)[0].values


class TestInitialization:

    def test_fresh_rounds_start_as_the_identity(self, forall_refl):
        graph = represent(forall_refl)
        vocab = Vocabulary.from_graphs([graph])
        params = random_params(vocab, hops=3, scale=0.0)
        batch = GraphBatch.from_graphs([graph], vocab)
        projected, _ = mlp_forward(params.mlp_v, params.store[params.embedding][batch.token_ids])
        out, _ = encode(batch, params)
        np.testing.assert_array_equal(out.values, projected)

    def test_default_depth_keeps_embeddings_bounded(self, forall_refl):
        graph = represent(forall_refl)
        vocab = Vocabulary.from_graphs([graph])
        store = {}
        params = GnnParams.create(store, "g", len(vocab), GnnConfig(), np.random.default_rng(0))
        pooled, _ = embed_graphs([graph], vocab, params)
        assert np.abs(pooled).max() < 10.0


class TestEdgeLabels:

    def test_labels_are_never_dropped(self):
        graph = add_random_edges(build_ast(parse("(a f x)")), seed=1)
        vocab = Vocabulary.from_graphs([graph])
        params = random_params(vocab, dropout_keep=0.5)
        batch = GraphBatch.from_graphs([graph], vocab)
        for seed in range(20):
            _, tape = encode(batch, params, training=True, rng=np.random.default_rng(seed))
            np.testing.assert_array_equal(tape.e_tape.inputs[0][:, 0], [0.0, 1.0, 2.0])
            assert tape.e_tape.masks[0] is None


class TestLocality:

    @pytest.mark.parametrize("hops", [0, 1, 3])
    def test_node_only_sees_hops_far(self, hops):
        graph = path_graph(7)
        vocab = Vocabulary.from_graphs([graph])
        params = random_params(vocab, hops=hops)
        base = node_values(graph, vocab, params)
        far = node_values(with_token(graph, hops + 1, "t6"), vocab, params)
        np.testing.assert_array_equal(far[0], base[0])
        near = node_values(with_token(graph, hops, "t6"), vocab, params)
        assert not np.allclose(near[0], base[0])

    def test_top_down_root_ignores_leaves(self):
        rng = np.random.default_rng(21)
        config = RepresentationConfig(direction=Direction.TOP_DOWN)
        trials = 0
        while trials < 100:
            graph = represent(random_term(rng), config)
            children = graph.children()
            leaves = [v for v in range(graph.node_count) if not children[v] and v != graph.root]
            if not leaves:
                continue
            trials += 1
            vocab = Vocabulary.from_tokens(graph.tokens + ("perturbed",))
            params = random_params(vocab, seed=trials)
            changed = with_token(graph, int(rng.choice(leaves)), "perturbed")
            np.testing.assert_array_equal(node_values(changed, vocab, params)[graph.root],
                                          node_values(graph, vocab, params)[graph.root])

    def test_bottom_up_leaves_ignore_the_root(self):
        rng = np.random.default_rng(22)
        config = RepresentationConfig(direction=Direction.BOTTOM_UP)
        trials = 0
        while trials < 100:
            graph = represent(random_term(rng), config)
            children = graph.children()
            leaves = [v for v in range(graph.node_count) if not children[v] and v != graph.root]
            if not leaves:
                continue
            trials += 1
            vocab = Vocabulary.from_tokens(graph.tokens + ("perturbed",))
            params = random_params(vocab, seed=trials)
            changed = with_token(graph, graph.root, "perturbed")
            np.testing.assert_array_equal(node_values(changed, vocab, params)[leaves],
                                          node_values(graph, vocab, params)[leaves])


class TestPermutation:

    def test_relabelling_nodes_permutes_embeddings(self, forall_refl):
        graph = represent(forall_refl)
        vocab = Vocabulary.from_graphs([graph])
        params = random_params(vocab, hops=3)
        order = np.random.default_rng(4).permutation(graph.node_count)  # new id -> old id
        new_id = np.argsort(order)
        shuffled = TermGraph(
            tuple(graph.tokens[int(old)] for old in order),
            tuple((int(new_id[s]), int(new_id[d]), label) for s, d, label in graph.edges),
            int(new_id[graph.root]), graph.kind, graph.direction
        )
        base = node_values(graph, vocab, params)
        moved = node_values(shuffled, vocab, params)
        np.testing.assert_allclose(moved, base[order], rtol=1e-12, atol=1e-12)
        pooled, _ = embed_graphs([graph], vocab, params)
        pooled_shuffled, _ = embed_graphs([shuffled], vocab, params)
        np.testing.assert_allclose(pooled_shuffled, pooled, rtol=1e-12, atol=1e-12)
