import numpy as np
import pytest

from sketchgraphnet import graphops as gops
from sketchgraphnet.gradcheck import grad_check
from sketchgraphnet.model import (
    GraphBatch,
    ModelConfig,
    collate,
    forward,
    init_model_params,
    load_checkpoint,
    load_model_config,
    predict_topk,
    save_checkpoint,
    save_model_config,
    softmax_probs,
)
from sketchgraphnet.tensor import Tensor, cross_entropy_label_smoothing, no_grad

from conftest import build_separable_graphs


def toy_batch(rng, b=3, n=12, num_classes=4, dtype=np.float32):
    graphs_sizes = [n] * b
    edges = []
    start = 0
    for s in graphs_sizes:
        edges.extend((start + i, start + i + 1) for i in range(s - 1))
        start += s
    feats = rng.uniform(0, 255, size=(b * n, 3)).astype(dtype)
    feats[:, 2] = rng.uniform(0, 1, b * n)
    topo = gops.GraphTopology(sizes=np.asarray(graphs_sizes), edges=np.asarray(edges))
    labels = rng.integers(0, num_classes, b)
    return GraphBatch(features=feats, topo=topo, labels=labels)


class TestForward:
    def test_logit_shape_and_determinism(self):
        rng = np.random.default_rng(0)
        config = ModelConfig(hidden_dim=32, num_blocks=2, num_heads=4, num_classes=5, block_q=5, block_k=7)
        params = init_model_params(config, np.random.default_rng(1))
        batch = toy_batch(rng, b=4, num_classes=5)
        with no_grad():
            a = forward(batch, params, config, training=False).data
            b_ = forward(batch, params, config, training=False).data
        assert a.shape == (4, 5)
        assert np.array_equal(a, b_)

    def test_zero_blocks_reduces_to_embedding_pool_classifier(self):
        rng = np.random.default_rng(2)
        config = ModelConfig(hidden_dim=16, num_blocks=0, num_heads=4, num_classes=3)
        params = init_model_params(config, np.random.default_rng(3))
        batch = toy_batch(rng, b=2, num_classes=3)
        with no_grad():
            logits = forward(batch, params, config, training=False).data
            h0 = gops.cheb_conv(Tensor(batch.features), batch.topo, params.cheb)
            pooled = gops.global_pool(h0, batch.topo, "mean")
            expected = pooled.data @ params.cls_w.data + params.cls_b.data
        assert np.abs(logits - expected).max() < 1e-6

    def test_node_permutation_leaves_logits_unchanged(self):
        # float64 so the 1e-5 bound measures the operators, not f32 noise
        # on canvas-scale activations
        rng = np.random.default_rng(4)
        config = ModelConfig(hidden_dim=32, num_blocks=2, num_heads=4, num_classes=4, block_q=6, block_k=6)
        params = init_model_params(config, np.random.default_rng(5), dtype=np.float64)
        batch = toy_batch(rng, b=2, n=10, num_classes=4, dtype=np.float64)
        with no_grad():
            base = forward(batch, params, config, training=False).data
        perm = np.concatenate([rng.permutation(10), 10 + rng.permutation(10)])
        inv = np.empty_like(perm)
        inv[perm] = np.arange(20)
        batch_p = GraphBatch(
            features=batch.features[perm],
            topo=gops.GraphTopology(sizes=batch.topo.sizes, edges=inv[batch.topo.edges]),
            labels=batch.labels,
        )
        with no_grad():
            permuted = forward(batch_p, params, config, training=False).data
        assert np.abs(base - permuted).max() < 1e-5
        assert np.array_equal(base.argmax(1), permuted.argmax(1))

    def test_eval_forward_is_batch_size_independent(self):
        rng = np.random.default_rng(6)
        config = ModelConfig(hidden_dim=32, num_blocks=2, num_heads=4, num_classes=4, block_q=4, block_k=4)
        params = init_model_params(config, np.random.default_rng(7))
        batch = toy_batch(rng, b=2, n=9, num_classes=4)
        with no_grad():
            joint = forward(batch, params, config, training=False).data
            singles = []
            for i in range(2):
                sub = GraphBatch(
                    features=batch.features[i * 9 : (i + 1) * 9],
                    topo=gops.GraphTopology(sizes=[9], edges=batch.topo.edges[: 8] - 0 if i == 0 else batch.topo.edges[8:] - 9),
                    labels=batch.labels[i : i + 1],
                )
                singles.append(forward(sub, params, config, training=False).data)
        assert np.abs(joint - np.vstack(singles)).max() < 1e-5

    def test_global_branch_ablation_changes_logits(self):
        rng = np.random.default_rng(8)
        base = ModelConfig(hidden_dim=32, num_blocks=2, num_heads=4, num_classes=4, block_q=4, block_k=4)
        params = init_model_params(base, np.random.default_rng(9))
        batch = toy_batch(rng, b=2, num_classes=4)
        from dataclasses import replace

        with no_grad():
            full = forward(batch, params, base, training=False).data
            ablated = forward(batch, params, replace(base, use_global=False), training=False).data
        assert np.abs(full - ablated).max() > 1e-3

    def test_temporal_ablation_equals_zeroed_column(self):
        rng = np.random.default_rng(10)
        from dataclasses import replace

        config = ModelConfig(hidden_dim=32, num_blocks=1, num_heads=4, num_classes=4, block_q=4, block_k=4)
        params = init_model_params(config, np.random.default_rng(11))
        batch = toy_batch(rng, b=2, num_classes=4)
        zeroed = batch.features.copy()
        zeroed[:, 2] = 0.0
        batch_zero = GraphBatch(features=zeroed, topo=batch.topo, labels=batch.labels)
        with no_grad():
            ablated = forward(batch, params, replace(config, use_temporal=False), training=False).data
            manual = forward(batch_zero, params, config, training=False).data
        assert np.abs(ablated - manual).max() == 0.0

    def test_attention_paths_agree_in_model(self):
        rng = np.random.default_rng(12)
        from dataclasses import replace

        config = ModelConfig(hidden_dim=32, num_blocks=2, num_heads=4, num_classes=4, block_q=4, block_k=4)
        params = init_model_params(config, np.random.default_rng(13))
        batch = toy_batch(rng, b=3, num_classes=4)
        with no_grad():
            tiled = forward(batch, params, config, training=False).data
            naive = forward(batch, params, replace(config, attention="naive"), training=False).data
        assert np.abs(tiled - naive).max() < 1e-4

    def test_local_op_variants_run_and_differ(self):
        rng = np.random.default_rng(14)
        from dataclasses import replace

        config = ModelConfig(hidden_dim=32, num_blocks=1, num_heads=4, num_classes=4, block_q=4, block_k=4)
        params = init_model_params(config, np.random.default_rng(15))
        batch = toy_batch(rng, b=2, num_classes=4)
        with no_grad():
            gin = forward(batch, params, config, training=False).data
            mean = forward(batch, params, replace(config, local_op="mean"), training=False).data
        assert gin.shape == mean.shape
        assert np.abs(gin - mean).max() > 1e-4


class TestEndToEndGradients:
    def test_full_model_finite_difference(self):
        # tiny config: d=8, L=2, heads=2, two 6-node path graphs, float64
        rng = np.random.default_rng(16)
        config = ModelConfig(hidden_dim=8, num_blocks=2, num_heads=2, cheb_order=2, num_classes=3, block_q=2, block_k=3)
        params = init_model_params(config, np.random.default_rng(17), dtype=np.float64)
        edges = [(i, i + 1) for i in range(5)] + [(6 + i, 7 + i) for i in range(5)]
        topo = gops.GraphTopology(sizes=[6, 6], edges=np.asarray(edges))
        feats = rng.uniform(0, 1, size=(12, 3))
        labels = np.array([0, 2])

        names = [n for n, _ in params.named_parameters()]
        tensors = [p for _, p in params.named_parameters()]

        def fn(*inputs):
            for p, new in zip(tensors, inputs):
                p.data = new.data
            batch = GraphBatch(features=feats, topo=topo, labels=labels)
            logits = forward(batch, params, config, training=True)
            return cross_entropy_label_smoothing(logits, labels, eps=0.1)

        report = grad_check(fn, tensors, tol=1e-3)
        assert report.max_rel_err < 1e-3, f"worst {names[report.worst_input]}"

    def test_input_gradient_flows(self):
        rng = np.random.default_rng(18)
        config = ModelConfig(hidden_dim=16, num_blocks=1, num_heads=2, num_classes=3, block_q=4, block_k=4)
        params = init_model_params(config, np.random.default_rng(19))
        batch = toy_batch(rng, b=2, n=8, num_classes=3)
        logits = forward(batch, params, config, training=True)
        loss = cross_entropy_label_smoothing(logits, batch.labels, eps=0.0)
        loss.backward()
        for name, p in params.named_parameters():
            assert p.grad is not None, name
            assert np.isfinite(p.grad).all(), name


class TestPredictTopK:
    def test_argmax(self):
        assert predict_topk(np.array([[0.1, 0.9, 0.5]]), 1).tolist() == [[1]]

    def test_tie_breaks_toward_lower_index(self):
        assert predict_topk(np.array([[0.5, 0.5, 0.5]]), 3).tolist() == [[0, 1, 2]]

    def test_prefix_consistency(self):
        rng = np.random.default_rng(20)
        logits = rng.standard_normal((50, 10))
        k1 = predict_topk(logits, 1)
        k3 = predict_topk(logits, 3)
        k5 = predict_topk(logits, 5)
        assert np.array_equal(k3[:, :1], k1)
        assert np.array_equal(k5[:, :3], k3)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            predict_topk(np.zeros((2, 3)), 4)

    def test_softmax_probs_sum_to_one(self):
        rng = np.random.default_rng(21)
        p = softmax_probs(rng.standard_normal((6, 9)))
        assert np.allclose(p.sum(1), 1.0, atol=1e-6)


class TestCheckpointAndConfig:
    def test_checkpoint_round_trip(self, tmp_path):
        config = ModelConfig(hidden_dim=16, num_blocks=2, num_heads=2, num_classes=4)
        params = init_model_params(config, np.random.default_rng(22))
        # push batch-norm stats off their defaults
        rng = np.random.default_rng(23)
        batch = toy_batch(rng, b=2, num_classes=4)
        forward(batch, params, config, training=True)
        path = tmp_path / "checkpoint.npz"
        save_checkpoint(params, path)
        assert (tmp_path / "checkpoint.names.txt").exists()
        restored = load_checkpoint(path, config)
        for (na, pa), (nb, pb) in zip(params.named_parameters(), restored.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data), na
        for (na, ba), (nb, bb) in zip(params.named_buffers(), restored.named_buffers()):
            assert np.array_equal(ba, bb), na
        with no_grad():
            a = forward(batch, params, config, training=False).data
            b = forward(batch, restored, config, training=False).data
        assert np.array_equal(a, b)

    def test_names_manifest_lists_every_entry(self, tmp_path):
        config = ModelConfig(hidden_dim=16, num_blocks=1, num_heads=2, num_classes=3)
        params = init_model_params(config, np.random.default_rng(24))
        save_checkpoint(params, tmp_path / "c.npz")
        names = (tmp_path / "c.names.txt").read_text().split()
        expected = {n for n, _ in params.named_parameters()} | {n for n, _ in params.named_buffers()}
        assert set(names) == expected

    def test_unique_parameter_names(self):
        config = ModelConfig(hidden_dim=16, num_blocks=3, num_heads=2, num_classes=3)
        params = init_model_params(config, np.random.default_rng(25))
        names = [n for n, _ in params.named_parameters()]
        assert len(names) == len(set(names))

    def test_model_config_file_round_trip(self, tmp_path):
        config = ModelConfig(hidden_dim=48, num_blocks=3, num_heads=4, pooling="max", attention="naive",
                             use_phi=False, label_smoothing=0.05, block_q=17, num_classes=7)
        path = tmp_path / "model_config.txt"
        save_model_config(config, path)
        assert load_model_config(path) == config

    def test_model_config_rejects_unknown_key(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("hidden_dm=32\n")
        with pytest.raises(ValueError):
            load_model_config(p)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=30, num_heads=4)
        with pytest.raises(ValueError):
            ModelConfig(num_classes=1)
        with pytest.raises(ValueError):
            ModelConfig(pooling="median")


class TestSeparableSanity:
    def test_two_class_graphs_are_model_separable_features(self):
        graphs = build_separable_graphs(10, seed=1)
        batch = collate(graphs)
        assert batch.features.shape == (20 * 100, 3)
        ys = batch.features[:, 1].reshape(20, 100)
        spread_h = ys[:10].std()
        spread_v = ys[10:].std()
        assert spread_v > 10 * max(spread_h, 1e-9)
