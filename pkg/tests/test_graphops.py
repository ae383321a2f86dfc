import numpy as np
import pytest

import sketchgraphnet as sg
from sketchgraphnet.gradcheck import grad_check
from sketchgraphnet.graphops import ChebParams, GinParams, GraphTopology, cheb_conv, gin_conv, global_pool, neighbor_mean_conv
from sketchgraphnet.tensor import Parameter, Tensor


def path_topology(n, batch_sizes=None):
    if batch_sizes is None:
        batch_sizes = [n]
    edges = []
    start = 0
    for size in batch_sizes:
        edges.extend((start + i, start + i + 1) for i in range(size - 1))
        start += size
    return GraphTopology(sizes=np.asarray(batch_sizes), edges=np.asarray(edges, dtype=np.int64).reshape(-1, 2))


def make_cheb(rng, k, d_in, d, dtype=np.float64, identity=False):
    weights = []
    for i in range(k):
        if identity:
            w = np.eye(d_in, d)
        else:
            w = rng.standard_normal((d_in, d))
        weights.append(Parameter(w.astype(dtype), f"cheb.w{i}"))
    return ChebParams(weights, Parameter(np.zeros(d, dtype=dtype), "cheb.b"))


def make_gin(rng, d, dtype=np.float64, identity=False):
    def mat(name):
        w = np.eye(d) if identity else rng.standard_normal((d, d)) * 0.5
        return Parameter(w.astype(dtype), name)

    return GinParams(
        lin1_w=mat("g.mlp0.w"),
        lin1_b=Parameter(np.zeros(d, dtype=dtype), "g.mlp0.b"),
        lin2_w=mat("g.mlp1.w"),
        lin2_b=Parameter(np.zeros(d, dtype=dtype), "g.mlp1.b"),
    )


def dense_scaled_laplacian(topo):
    n = topo.num_nodes
    a = np.zeros((n, n))
    for u, v in topo.edges:
        a[u, v] = a[v, u] = 1.0
    deg = a.sum(1)
    lhat = np.zeros((n, n))
    for i in range(n):
        if deg[i] == 0:
            lhat[i, i] = -1.0
    for u in range(n):
        for v in range(n):
            if a[u, v]:
                lhat[u, v] = -1.0 / np.sqrt(deg[u] * deg[v])
    return lhat


class TestTopology:
    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            GraphTopology(sizes=[3], edges=[[1, 1]])

    def test_rejects_duplicate_edges(self):
        with pytest.raises(ValueError):
            GraphTopology(sizes=[3], edges=[[0, 1], [1, 0]])

    def test_rejects_cross_graph_edge(self):
        with pytest.raises(ValueError):
            GraphTopology(sizes=[2, 2], edges=[[1, 2]])

    def test_rejects_empty_graph(self):
        with pytest.raises(sg.EmptyGraph):
            GraphTopology(sizes=[2, 0], edges=np.empty((0, 2)))

    def test_degrees(self):
        topo = path_topology(4)
        assert np.array_equal(topo.degrees, [1, 2, 2, 1])


class TestChebConv:
    def test_order_one_is_nodewise_linear(self):
        rng = np.random.default_rng(0)
        topo = path_topology(6)
        x = Tensor(rng.standard_normal((6, 3)))
        params = make_cheb(rng, 1, 3, 4, dtype=np.float32)
        out = cheb_conv(x, topo, params)
        expected = x.data @ params.weights[0].data + params.bias.data
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_isolated_node_hand_oracle(self):
        # one node, no edges: scaled Laplacian row is -1, so T1 x = -x
        rng = np.random.default_rng(1)
        topo = GraphTopology(sizes=[1], edges=np.empty((0, 2)))
        x = Tensor(rng.standard_normal((1, 3)))
        params = make_cheb(rng, 2, 3, 3, dtype=np.float32)
        out = cheb_conv(x, topo, params)
        expected = x.data @ params.weights[0].data - x.data @ params.weights[1].data + params.bias.data
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_path3_matches_dense_polynomial_oracle(self):
        rng = np.random.default_rng(2)
        topo = path_topology(3)
        x = rng.standard_normal((3, 3))
        params = make_cheb(rng, 3, 3, 3, dtype=np.float64, identity=True)
        out = cheb_conv(Tensor(x, dtype=np.float64), topo, params)
        lhat = dense_scaled_laplacian(topo)
        t0, t1 = x, lhat @ x
        t2 = 2 * lhat @ t1 - t0
        assert np.allclose(out.data, t0 + t1 + t2, atol=1e-12)

    def test_random_graph_matches_dense_oracle(self):
        rng = np.random.default_rng(3)
        topo = path_topology(10, [4, 6])
        x = rng.standard_normal((10, 5))
        params = make_cheb(rng, 4, 5, 7)
        out = cheb_conv(Tensor(x, dtype=np.float64), topo, params)
        lhat = dense_scaled_laplacian(topo)
        terms = [x, lhat @ x]
        for _ in range(2):
            terms.append(2 * lhat @ terms[-1] - terms[-2])
        expected = sum(t @ w.data for t, w in zip(terms, params.weights)) + params.bias.data
        assert np.abs(out.data - expected).max() < 1e-10

    def test_no_cross_component_leakage(self):
        rng = np.random.default_rng(4)
        xa = rng.standard_normal((4, 3))
        xb = rng.standard_normal((5, 3))
        params = make_cheb(rng, 3, 3, 6)
        joint = cheb_conv(Tensor(np.vstack([xa, xb]), dtype=np.float64), path_topology(9, [4, 5]), params)
        alone_a = cheb_conv(Tensor(xa, dtype=np.float64), path_topology(4), params)
        alone_b = cheb_conv(Tensor(xb, dtype=np.float64), path_topology(5), params)
        assert np.abs(joint.data[:4] - alone_a.data).max() < 1e-6
        assert np.abs(joint.data[4:] - alone_b.data).max() < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(5)
        topo = path_topology(5)
        params = make_cheb(rng, 3, 3, 4)
        x = Tensor(rng.standard_normal((5, 3)), requires_grad=True, dtype=np.float64)
        inputs = [x] + params.weights + [params.bias]

        def fn(x_, *ps):
            return cheb_conv(x_, topo, ChebParams(list(ps[:-1]), ps[-1]))

        assert grad_check(fn, inputs, tol=1e-4).max_rel_err < 1e-4


class TestGinConv:
    def test_no_edges_is_mlp_only(self):
        rng = np.random.default_rng(6)
        topo = GraphTopology(sizes=[4], edges=np.empty((0, 2)))
        params = make_gin(rng, 3)
        h = rng.standard_normal((4, 3))
        out = gin_conv(Tensor(h, dtype=np.float64), topo, params)
        z = np.maximum(h @ params.lin1_w.data, 0.0)
        assert np.allclose(out.data, z @ params.lin2_w.data, atol=1e-12)

    def test_two_node_path_identity_mlp(self):
        topo = path_topology(2)
        params = make_gin(np.random.default_rng(0), 3, identity=True)
        h = np.array([[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]])  # positive: relu transparent
        out = gin_conv(Tensor(h, dtype=np.float64), topo, params)
        assert np.allclose(out.data, [[11, 22, 33], [11, 22, 33]])

    def test_matches_dense_adjacency_oracle(self):
        rng = np.random.default_rng(7)
        topo = path_topology(10)
        params = make_gin(rng, 6)
        eps = 0.35
        params.eps = eps
        h = rng.standard_normal((10, 6))
        out = gin_conv(Tensor(h, dtype=np.float64), topo, params)
        a = np.zeros((10, 10))
        for u, v in topo.edges:
            a[u, v] = a[v, u] = 1.0
        agg = ((1 + eps) * np.eye(10) + a) @ h
        expected = np.maximum(agg @ params.lin1_w.data, 0) @ params.lin2_w.data
        assert np.abs(out.data - expected).max() < 1e-6

    def test_gradients(self):
        rng = np.random.default_rng(8)
        topo = path_topology(6)
        params = make_gin(rng, 4)
        h = Tensor(rng.standard_normal((6, 4)), requires_grad=True, dtype=np.float64)
        inputs = [h, params.lin1_w, params.lin1_b, params.lin2_w, params.lin2_b]

        def fn(h_, w1, b1, w2, b2):
            return gin_conv(h_, topo, GinParams(w1, b1, w2, b2))

        assert grad_check(fn, inputs, tol=1e-3).max_rel_err < 1e-3

    def test_neighbor_mean_variant(self):
        rng = np.random.default_rng(9)
        topo = path_topology(5)
        params = make_gin(rng, 3)
        h = rng.standard_normal((5, 3))
        out = neighbor_mean_conv(Tensor(h, dtype=np.float64), topo, params)
        a = np.zeros((5, 5))
        for u, v in topo.edges:
            a[u, v] = a[v, u] = 1.0
        mean_agg = a @ h / np.maximum(a.sum(1, keepdims=True), 1)
        expected = np.maximum((h + mean_agg) @ params.lin1_w.data, 0) @ params.lin2_w.data
        assert np.abs(out.data - expected).max() < 1e-10

    def test_neighbor_mean_gradients(self):
        rng = np.random.default_rng(10)
        topo = path_topology(5)
        params = make_gin(rng, 3)
        h = Tensor(rng.standard_normal((5, 3)), requires_grad=True, dtype=np.float64)

        def fn(h_):
            return neighbor_mean_conv(h_, topo, params)

        assert grad_check(fn, [h], tol=1e-4).max_rel_err < 1e-4


class TestEquivariance:
    def permute_topology(self, topo, perm):
        inv_edges = perm[topo.edges]
        order = np.argsort(np.lexsort((inv_edges.max(1), inv_edges.min(1))))
        return GraphTopology(sizes=topo.sizes.copy(), edges=np.sort(inv_edges, axis=1))

    @pytest.mark.parametrize("op", ["cheb", "gin"])
    def test_within_graph_relabeling(self, op):
        rng = np.random.default_rng(11)
        sizes = [5, 7]
        topo = path_topology(12, sizes)
        h = rng.standard_normal((12, 4))
        # permute nodes within each graph
        perm = np.concatenate([rng.permutation(5), 5 + rng.permutation(7)])
        inv = np.empty_like(perm)
        inv[perm] = np.arange(12)
        topo_p = GraphTopology(sizes=np.asarray(sizes), edges=inv[topo.edges])
        if op == "cheb":
            params = make_cheb(rng, 3, 4, 4)
            out = cheb_conv(Tensor(h, dtype=np.float64), topo, params).data
            out_p = cheb_conv(Tensor(h[perm], dtype=np.float64), topo_p, params).data
        else:
            params = make_gin(rng, 4)
            out = gin_conv(Tensor(h, dtype=np.float64), topo, params).data
            out_p = gin_conv(Tensor(h[perm], dtype=np.float64), topo_p, params).data
        assert np.abs(out[perm] - out_p).max() < 1e-6


class TestGlobalPool:
    def test_constant_rows_mean(self):
        v = np.array([2.0, -1.0, 3.0])
        h = Tensor(np.tile(v, (6, 1)), dtype=np.float64)
        out = global_pool(h, path_topology(6), "mean")
        assert np.allclose(out.data, v[None])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        h = rng.standard_normal((8, 3))
        topo = path_topology(8)
        perm = rng.permutation(8)
        for mode in ("mean", "sum", "max"):
            a = global_pool(Tensor(h, dtype=np.float64), topo, mode).data
            b = global_pool(Tensor(h[perm], dtype=np.float64), topo, mode).data
            assert np.allclose(a, b)

    def test_batch_matches_per_graph(self):
        rng = np.random.default_rng(13)
        ha, hb = rng.standard_normal((4, 5)), rng.standard_normal((7, 5))
        for mode in ("mean", "sum", "max"):
            joint = global_pool(Tensor(np.vstack([ha, hb]), dtype=np.float64), path_topology(11, [4, 7]), mode).data
            a = global_pool(Tensor(ha, dtype=np.float64), path_topology(4), mode).data
            b = global_pool(Tensor(hb, dtype=np.float64), path_topology(7), mode).data
            assert np.allclose(joint, np.vstack([a, b]))

    @pytest.mark.parametrize("mode", ["mean", "sum", "max"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(14)
        topo = path_topology(9, [4, 5])
        h = Tensor(rng.standard_normal((9, 3)), requires_grad=True, dtype=np.float64)
        assert grad_check(lambda x: global_pool(x, topo, mode), [h], tol=1e-6).max_rel_err < 1e-6

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            global_pool(Tensor(np.ones((3, 2))), path_topology(3), "median")
