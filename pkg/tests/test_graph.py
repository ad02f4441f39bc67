import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from need import tensor as T
from need.baseline import load_mlp, mlp_train, save_mlp
from need.corpus import Event, SynthConfig, event_kfold_split, generate_synthetic, select_events
from need.errors import ConfigError, SchemaError
from need.gradcheck import ga_loss_case, random_graph
from need.graph import (EventGraph, GaModel, TrainHyper, build_event_graph, ga_forward, ga_train, gat_layer,
                        load_ga, merge_graphs, predict_events, save_ga)
from need.tensor import Tensor

from conftest import make_event, make_video
from oracles import ga_forward_loop, gat_layer_loop


def small_model(d=5, hidden=4, seed=0):
    return GaModel(d, np.random.default_rng(seed), hidden=hidden)


class TestBuildGraph:
    def test_single_video(self):
        g = build_event_graph(make_event(["real"]))
        assert len(g) == 1 and g.adjacency.tolist() == [[True]]

    def test_target_mask(self):
        g = build_event_graph(make_event(["fake", "fake", "debunking"]))
        assert g.target_mask.tolist() == [True, True, False]
        assert g.labels.tolist() == [1, 1, -1]

    def test_complete_with_self_loops(self):
        g = build_event_graph(make_event(["real"] * 5))
        assert g.adjacency.sum() == 25

    def test_dimension_mismatch(self):
        vids = (make_video("a", d_base=4), make_video("b", d_base=3))
        with pytest.raises(SchemaError):
            build_event_graph(Event("e0", vids))
        with pytest.raises(SchemaError):
            build_event_graph(make_event(["real"]), d_base=7)

    def test_debunking_nodes_can_be_excluded(self):
        g = build_event_graph(make_event(["fake", "debunking"]), include_debunking=False)
        assert len(g) == 1

    def test_merge_is_block_diagonal(self):
        g = merge_graphs([build_event_graph(make_event(["real"] * 2)), build_event_graph(make_event(["real"] * 3))])
        assert g.adjacency.sum() == 4 + 9
        assert not g.adjacency[:2, 2:].any()


class TestGatLayer:
    def test_single_node(self):
        rng = np.random.default_rng(0)
        x, W, a = rng.normal(size=(1, 3)), rng.normal(size=(3, 2)), rng.normal(size=4)
        out = gat_layer(Tensor(x), Tensor(W), Tensor(a), np.ones((1, 1), bool), 0.2, T.relu)
        np.testing.assert_allclose(out.data, np.maximum(x @ W, 0), atol=1e-15)

    def test_identical_features_give_uniform_attention(self):
        rng = np.random.default_rng(1)
        x = np.tile(rng.normal(size=3), (4, 1))
        seen = []
        with T.softmax_observer(seen.append):
            gat_layer(Tensor(x), Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=4)), np.ones((4, 4), bool))
        np.testing.assert_allclose(seen[0], np.full((4, 4), 0.25), atol=1e-15)

    def test_four_node_loop_oracle(self):
        rng = np.random.default_rng(2)
        x, W, a = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=4)
        adj = rng.random((4, 4)) < 0.6
        np.fill_diagonal(adj, True)
        out = gat_layer(Tensor(x), Tensor(W), Tensor(a), adj, 0.2, T.relu)
        expected = gat_layer_loop(x.tolist(), W.tolist(), a.tolist(), adj.tolist(), 0.2, relu=True)
        np.testing.assert_allclose(out.data, expected, rtol=0, atol=1e-9)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        rows = []
        with T.softmax_observer(rows.append):
            ga_forward(random_graph(rng, 6, 5), small_model())
        for r in rows:
            np.testing.assert_allclose(r.sum(axis=-1), 1.0, atol=1e-9)


class TestForward:
    def test_zero_logits_give_half(self):
        model = small_model()
        model.W2.data[:] = 0.0
        g = random_graph(np.random.default_rng(0), 3, 5)
        np.testing.assert_array_equal(ga_forward(g, model), [0.5, 0.5, 0.5])

    def test_eval_deterministic(self):
        g = random_graph(np.random.default_rng(0), 4, 5)
        model = small_model()
        np.testing.assert_array_equal(ga_forward(g, model), ga_forward(g, model))

    def test_train_mode_uses_dropout(self):
        g = random_graph(np.random.default_rng(0), 4, 5)
        model = small_model(hidden=32)
        a = ga_forward(g, model, "train", np.random.default_rng(1))
        assert not np.array_equal(a, ga_forward(g, model))

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            ga_forward(random_graph(np.random.default_rng(0), 2, 5), small_model(), "test")

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10**6))
    def test_permutation_equivariance(self, n, seed):
        rng = np.random.default_rng(seed)
        g = random_graph(rng, n, 5)
        perm = rng.permutation(n)
        permuted = EventGraph(tuple(g.node_ids[i] for i in perm), g.node_features[perm], g.adjacency,
                              g.target_mask[perm], g.labels[perm])
        model = small_model(seed=seed)
        p = dict(zip(g.node_ids, ga_forward(g, model)))
        q = dict(zip(permuted.node_ids, ga_forward(permuted, model)))
        for vid in p:
            assert abs(p[vid] - q[vid]) <= 1e-12

    def test_single_node_is_per_sample(self):
        rng = np.random.default_rng(4)
        model = small_model()
        x = rng.normal(size=(1, 5))
        alone = ga_forward(EventGraph(("a",), x, np.ones((1, 1), bool), np.ones(1, bool), np.zeros(1, int)), model)
        h = np.maximum(x @ model.W1.data, 0) @ model.W2.data
        expected = 1.0 / (1.0 + np.exp(h[0, 0] - h[0, 1]))
        assert abs(alone[0] - expected) < 1e-12

    def test_loop_oracle_many_graphs(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            n = int(rng.integers(1, 7))
            g = random_graph(rng, n, 5)
            model = small_model(seed=int(rng.integers(1000)))
            expected = ga_forward_loop(g.node_features.tolist(), model.W1.data.tolist(), model.a1.data.tolist(),
                                       model.W2.data.tolist(), model.a2.data.tolist(), g.adjacency.tolist())
            np.testing.assert_allclose(ga_forward(g, model), expected, rtol=0, atol=1e-9)

    def test_merged_graph_equals_separate(self):
        rng = np.random.default_rng(6)
        gs = [random_graph(rng, n, 5) for n in (2, 3, 1)]
        model = small_model()
        merged = ga_forward(merge_graphs(gs), model)
        separate = np.concatenate([ga_forward(g, model) for g in gs])
        np.testing.assert_allclose(merged, separate, atol=1e-12)


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_three_node_ga_loss(self, seed):
        loss, params = ga_loss_case(np.random.default_rng(seed), n=3)
        assert T.grad_check(loss, params, 1e-5) <= 1e-4


@pytest.fixture(scope="module")
def fold():
    corpus = generate_synthetic(SynthConfig(n_events=120, seed=11))
    train, test = event_kfold_split(corpus, 5, 0).folds[0]
    return select_events(corpus, train), select_events(corpus, test)


def accuracy(model, events):
    p = predict_events(model, events)
    return np.mean([(p[v.video_id] >= 0.5) == v.label for e in events for v in e.targets])


class TestTraining:
    def test_loss_decreases(self, fold):
        _, trace = ga_train(fold[0], TrainHyper(seed=1))
        assert len(trace) == 30 and trace[-1] < trace[0]

    def test_deterministic(self, fold):
        a, ta = ga_train(fold[0], TrainHyper(epochs=3, seed=2))
        b, tb = ga_train(fold[0], TrainHyper(epochs=3, seed=2))
        assert ta == tb
        for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert ka == kb and np.array_equal(pa.data, pb.data)

    def test_no_signal_is_chance(self):
        # labels cluster by event, so a large fresh test corpus keeps the class balance near 50%
        train = generate_synthetic(SynthConfig(n_events=300, rho=0.0, seed=7))
        test = generate_synthetic(SynthConfig(n_events=1000, rho=0.0, seed=8))
        model, _ = ga_train(train, TrainHyper(seed=0))
        assert 0.45 <= accuracy(model, test) <= 0.55

    def test_no_targets(self):
        with pytest.raises(ConfigError):
            ga_train([make_event(["debunking"])])

    def test_checkpoint_round_trip(self, tmp_path, fold):
        model, _ = ga_train(fold[0], TrainHyper(epochs=1))
        save_ga(tmp_path / "ga.ckpt", model)
        back = load_ga(tmp_path / "ga.ckpt")
        for (_, a), (_, b) in zip(model.named_parameters(), back.named_parameters()):
            assert np.array_equal(a.data, b.data)

    def test_baseline_checkpoint(self, tmp_path, fold):
        model, trace = mlp_train(fold[0], TrainHyper(epochs=2))
        save_mlp(tmp_path / "m.ckpt", model)
        back = load_mlp(tmp_path / "m.ckpt")
        assert back.state_dict().keys() == model.state_dict().keys()
        assert all(np.array_equal(back.state_dict()[k], v) for k, v in model.state_dict().items())
