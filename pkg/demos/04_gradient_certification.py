"""Certify the autodiff engine against central finite differences.

Every primitive, both attention paths and the assembled model are
compared coordinate by coordinate against a numeric derivative of a
random projection of their output, in float64.
"""

import numpy as np

import sketchgraphnet as sg
from sketchgraphnet.attention import TileConfig, memeff_attention, naive_attention, to_dense_batch
from sketchgraphnet.gradcheck import grad_check
from sketchgraphnet.graphops import ChebParams, GinParams, GraphTopology, cheb_conv, gin_conv, global_pool
from sketchgraphnet.model import GraphBatch, ModelConfig, forward, init_model_params
from sketchgraphnet.tensor import Parameter, Tensor, cross_entropy_label_smoothing

rng = np.random.default_rng(0)


def t64(shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


rows = []

rows.append(("matmul", grad_check(sg.matmul, [t64((5, 4)), t64((4, 3))], tol=1e-4).max_rel_err))
rows.append(("linear", grad_check(sg.linear, [t64((4, 3)), t64((3, 2)), t64(2)], tol=1e-6).max_rel_err))
rows.append(("relu", grad_check(sg.relu, [t64(17)], tol=1e-6).max_rel_err))
rows.append(("row_softmax", grad_check(sg.row_softmax, [t64((4, 6))], tol=1e-6).max_rel_err))
state = sg.BatchNormState(3, "bn", dtype=np.float64)
rows.append(("batch_norm", grad_check(lambda x: sg.batch_norm(x, state, True), [t64((9, 3))], tol=1e-4).max_rel_err))
rows.append(
    ("cross_entropy",
     grad_check(lambda x: cross_entropy_label_smoothing(x, np.array([0, 2, 1]), 0.1), [t64((3, 4))], tol=1e-6).max_rel_err)
)

topo = GraphTopology(sizes=[6], edges=np.asarray([(i, i + 1) for i in range(5)]))
cheb = ChebParams([Parameter(rng.standard_normal((3, 8)), f"w{k}", dtype=np.float64) for k in range(3)],
                  Parameter(np.zeros(8), "b", dtype=np.float64))
rows.append(
    ("cheb_conv",
     grad_check(lambda x, *ps: cheb_conv(x, topo, ChebParams(list(ps[:-1]), ps[-1])),
                [t64((6, 3))] + cheb.weights + [cheb.bias], tol=1e-4).max_rel_err)
)
gin = GinParams(Parameter(rng.standard_normal((8, 8)) * 0.5, "w1", dtype=np.float64),
                Parameter(np.zeros(8), "b1", dtype=np.float64),
                Parameter(rng.standard_normal((8, 8)) * 0.5, "w2", dtype=np.float64),
                Parameter(np.zeros(8), "b2", dtype=np.float64))
rows.append(
    ("gin_conv",
     grad_check(lambda h, w1, b1, w2, b2: gin_conv(h, topo, GinParams(w1, b1, w2, b2)),
                [t64((6, 8)), gin.lin1_w, gin.lin1_b, gin.lin2_w, gin.lin2_b], tol=1e-3).max_rel_err)
)
rows.append(("global_pool", grad_check(lambda x: global_pool(x, topo, "mean"), [t64((6, 3))], tol=1e-6).max_rel_err))


def attn_params64(d, heads):
    def w(name):
        return Parameter(rng.standard_normal((d, d)) * 0.3, name, dtype=np.float64)

    return sg.AttnParams(w("wq"), w("wk"), w("wv"), w("wproj"),
                         Parameter(np.zeros(d), "bp", dtype=np.float64), num_heads=heads)


topo2 = GraphTopology(sizes=[3, 5], edges=np.empty((0, 2)))
ap = attn_params64(8, 2)
rows.append(
    ("attention (materialized)",
     grad_check(lambda x, *ps: naive_attention(to_dense_batch(x, topo2), sg.AttnParams(*ps, num_heads=2), True),
                [t64((8, 8)), ap.wq, ap.wk, ap.wv, ap.wproj, ap.bproj], tol=1e-4).max_rel_err)
)
rows.append(
    ("attention (tiled)",
     grad_check(lambda x, *ps: memeff_attention(to_dense_batch(x, topo2), sg.AttnParams(*ps, num_heads=2), TileConfig(2, 3)),
                [t64((8, 8)), ap.wq, ap.wk, ap.wv, ap.wproj, ap.bproj], tol=1e-4).max_rel_err)
)

config = ModelConfig(hidden_dim=8, num_blocks=2, num_heads=2, cheb_order=2, num_classes=3, block_q=2, block_k=3)
params = init_model_params(config, np.random.default_rng(1), dtype=np.float64)
edges = [(i, i + 1) for i in range(5)] + [(6 + i, 7 + i) for i in range(5)]
batch = GraphBatch(rng.uniform(0, 1, size=(12, 3)), GraphTopology(sizes=[6, 6], edges=np.asarray(edges)),
                   np.array([0, 2]))
tensors = [p for _, p in params.named_parameters()]


def model_loss(*inputs):
    for p, new in zip(tensors, inputs):
        p.data = new.data
    return cross_entropy_label_smoothing(forward(batch, params, config, training=True), batch.labels, 0.1)


rows.append(("full model (d=8, L=2)", grad_check(model_loss, tensors, tol=1e-3).max_rel_err))

print(f"{'operation':<26} {'max relative error':>20}")
print("-" * 47)
for name, err in rows:
    print(f"{name:<26} {err:>20.3e}")
print("\nall gradients certified against central finite differences (float64)")
