"""SketchGraphNet: Chebyshev input embedding, stacked hybrid blocks that
fuse GIN message passing with global attention through a gated residual,
masked pooling, and a linear classifier.

Per block, with H the previous representation:

    H_loc  = LocalOp(H)
    H_glob = GlobalAttention(dense(H))        (optional branch)
    Z      = relu(H_glob + H) + (H_loc + H)
    H'     = BatchNorm(Z W_f + b_f) + Z

Ablation switches (global branch, temporal input column, local operator,
attention path, non-negative map) are wired through ModelConfig so paired
experiments run the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention as attn
from . import graphops as gops
from .ingest import SketchGraph
from .tensor import (
    BatchNormState,
    Parameter,
    ShapeMismatch,
    Tensor,
    batch_norm,
    dropout,
    linear,
    relu,
)

__all__ = [
    "ModelConfig",
    "BlockParams",
    "ModelParams",
    "GraphBatch",
    "collate",
    "init_model_params",
    "forward",
    "predict_topk",
    "softmax_probs",
    "save_checkpoint",
    "load_checkpoint",
    "save_model_config",
    "load_model_config",
]


@dataclass
class ModelConfig:
    hidden_dim: int = 128
    num_blocks: int = 4
    num_heads: int = 8
    cheb_order: int = 3
    pooling: str = "mean"
    num_classes: int = 10
    label_smoothing: float = 0.1
    dropout: float = 0.0
    in_dim: int = 3
    attention: str = "memeff"  # memeff | naive
    use_phi: bool = True  # non-negative query/key map (naive path only; tiled path always applies it)
    use_global: bool = True  # global attention branch
    use_temporal: bool = True  # temporal input column
    local_op: str = "gin"  # gin | mean
    learnable_eps: bool = False
    block_q: int = 32
    block_k: int = 32

    def __post_init__(self):
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.num_heads}")
        if self.num_blocks < 0:
            raise ValueError("num_blocks must be >= 0")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.cheb_order < 1:
            raise ValueError("cheb_order must be >= 1")
        if self.pooling not in ("mean", "sum", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.attention not in ("memeff", "naive"):
            raise ValueError(f"unknown attention path {self.attention!r}")
        if self.local_op not in ("gin", "mean"):
            raise ValueError(f"unknown local op {self.local_op!r}")

    def tiles(self) -> attn.TileConfig:
        return attn.TileConfig(self.block_q, self.block_k)


def save_model_config(config: ModelConfig, path: str | Path) -> None:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(ModelConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model_config(path: str | Path) -> ModelConfig:
    kwargs: dict = {}
    types = {f.name: f.type for f in fields(ModelConfig)}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        raw = raw.strip()
        if not raw or raw.startswith("#"):
            continue
        key, _, value = raw.partition("=")
        key, value = key.strip(), value.strip()
        if key not in types:
            raise ValueError(f"unknown model config key {key!r}")
        t = types[key]
        if t == "int":
            kwargs[key] = int(value)
        elif t == "float":
            kwargs[key] = float(value)
        elif t == "bool":
            kwargs[key] = value.lower() in ("true", "1", "yes")
        else:
            kwargs[key] = value
    return ModelConfig(**kwargs)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class BlockParams:
    gin: gops.GinParams
    att: attn.AttnParams
    fuse_w: Parameter
    fuse_b: Parameter
    bn: BatchNormState

    def named_parameters(self):
        yield from self.gin.named_parameters()
        yield from self.att.named_parameters()
        yield self.fuse_w.name, self.fuse_w
        yield self.fuse_b.name, self.fuse_b
        yield self.bn.gamma.name, self.bn.gamma
        yield self.bn.beta.name, self.bn.beta


@dataclass
class ModelParams:
    cheb: gops.ChebParams
    blocks: list[BlockParams]
    cls_w: Parameter
    cls_b: Parameter

    def named_parameters(self):
        yield from self.cheb.named_parameters()
        for block in self.blocks:
            yield from block.named_parameters()
        yield self.cls_w.name, self.cls_w
        yield self.cls_b.name, self.cls_b

    def named_buffers(self):
        for i, block in enumerate(self.blocks):
            yield f"block{i}.bn.running_mean", block.bn.running_mean
            yield f"block{i}.bn.running_var", block.bn.running_var

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone_state(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: buf.copy() for name, buf in self.named_buffers()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeMismatch(f"{name}: checkpoint shape {state[name].shape} != {p.data.shape}")
            p.data = state[name].astype(p.data.dtype).copy()
        for i, block in enumerate(self.blocks):
            rm = state.get(f"block{i}.bn.running_mean")
            rv = state.get(f"block{i}.bn.running_var")
            if rm is not None:
                block.bn.running_mean = rm.astype(block.bn.running_mean.dtype).copy()
            if rv is not None:
                block.bn.running_var = rv.astype(block.bn.running_var.dtype).copy()


def _uniform(rng: np.random.Generator, shape, fan_in: int, scale: float, dtype) -> np.ndarray:
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_model_params(
    config: ModelConfig,
    rng: np.random.Generator,
    dtype=np.float32,
    init_scale: float = 1.0,
    qk_init_scale: float = 1.0,
) -> ModelParams:
    """Fresh parameters: weights ~ uniform(+-scale/sqrt(fan_in)), biases 0,
    BatchNorm gamma 1 / beta 0.

    ``init_scale`` scales every weight; ``qk_init_scale`` additionally
    scales only the attention query/key projections, the stress knob used
    by the stability instrumentation (adversarially large query-key
    interactions while the rest of the network stays tame)."""
    d = config.hidden_dim
    cheb_weights = [
        Parameter(_uniform(rng, (config.in_dim, d), config.in_dim, init_scale, dtype), f"cheb.w{k}")
        for k in range(config.cheb_order)
    ]
    cheb = gops.ChebParams(cheb_weights, Parameter(np.zeros(d, dtype=dtype), "cheb.b"))

    blocks = []
    for i in range(config.num_blocks):
        prefix = f"block{i}"
        gin = gops.GinParams(
            lin1_w=Parameter(_uniform(rng, (d, d), d, init_scale, dtype), f"{prefix}.gin.mlp0.weight"),
            lin1_b=Parameter(np.zeros(d, dtype=dtype), f"{prefix}.gin.mlp0.bias"),
            lin2_w=Parameter(_uniform(rng, (d, d), d, init_scale, dtype), f"{prefix}.gin.mlp1.weight"),
            lin2_b=Parameter(np.zeros(d, dtype=dtype), f"{prefix}.gin.mlp1.bias"),
            eps=Parameter(np.zeros((), dtype=dtype), f"{prefix}.gin.eps") if config.learnable_eps else 0.0,
        )
        att = attn.AttnParams(
            wq=Parameter(_uniform(rng, (d, d), d, init_scale * qk_init_scale, dtype), f"{prefix}.attn.wq"),
            wk=Parameter(_uniform(rng, (d, d), d, init_scale * qk_init_scale, dtype), f"{prefix}.attn.wk"),
            wv=Parameter(_uniform(rng, (d, d), d, init_scale, dtype), f"{prefix}.attn.wv"),
            wproj=Parameter(_uniform(rng, (d, d), d, init_scale, dtype), f"{prefix}.attn.wproj"),
            bproj=Parameter(np.zeros(d, dtype=dtype), f"{prefix}.attn.bproj"),
            num_heads=config.num_heads,
        )
        blocks.append(
            BlockParams(
                gin=gin,
                att=att,
                fuse_w=Parameter(_uniform(rng, (d, d), d, init_scale, dtype), f"{prefix}.fuse.weight"),
                fuse_b=Parameter(np.zeros(d, dtype=dtype), f"{prefix}.fuse.bias"),
                bn=BatchNormState(d, f"{prefix}.bn", dtype=dtype),
            )
        )

    cls_w = Parameter(_uniform(rng, (d, config.num_classes), d, init_scale, dtype), "cls.weight")
    cls_b = Parameter(np.zeros(config.num_classes, dtype=dtype), "cls.bias")
    return ModelParams(cheb=cheb, blocks=blocks, cls_w=cls_w, cls_b=cls_b)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass
class GraphBatch:
    features: np.ndarray  # [n_total, 3] float32
    topo: gops.GraphTopology
    labels: np.ndarray  # [B] int64


def collate(graphs: Sequence[SketchGraph], dtype=np.float32) -> GraphBatch:
    """Stack graphs into one flat feature matrix plus shared topology."""
    if not graphs:
        raise ValueError("empty batch")
    sizes = np.array([g.num_nodes() for g in graphs], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    features = np.concatenate([g.node_features for g in graphs]).astype(dtype)
    edge_parts = [g.edges + s for g, s in zip(graphs, starts) if g.edges.size]
    edges = np.concatenate(edge_parts) if edge_parts else np.empty((0, 2), np.int64)
    labels = np.array([g.label_id for g in graphs], dtype=np.int64)
    return GraphBatch(features=features, topo=gops.GraphTopology(sizes=sizes, edges=edges), labels=labels)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _run_probes(dense, att_params, config, probe, input_probe):
    if probe is not None:
        phi_active = True if config.attention == "memeff" else config.use_phi
        probe.append(attn.logit_stats(dense, att_params, use_phi=phi_active))
    if input_probe is not None:
        detached = attn.DenseBatch(dense.features.detach(), dense.mask.copy(), dense.graph_sizes.copy())
        input_probe.append((detached, att_params))


def forward(
    batch: GraphBatch,
    params: ModelParams,
    config: ModelConfig,
    training: bool = False,
    probe: list[attn.LogitStats] | None = None,
    input_probe: list | None = None,
) -> Tensor:
    """Full forward pass to classifier logits [B, num_classes].

    ``probe``, when a list, receives one LogitStats per block computed on
    that block's attention input (works for both attention paths since
    stats never materialize the full matrix). ``input_probe``, when a
    list, receives each block's (DenseBatch, AttnParams) pair for offline
    instrumentation.
    """
    feats = batch.features
    if not config.use_temporal:
        feats = feats.copy()
        feats[:, 2] = 0.0
    x = Tensor(feats)
    topo = batch.topo

    h = gops.cheb_conv(x, topo, params.cheb)
    for block in params.blocks:
        if config.local_op == "gin":
            h_loc = gops.gin_conv(h, topo, block.gin)
        else:
            h_loc = gops.neighbor_mean_conv(h, topo, block.gin)
        if config.use_global:
            dense = attn.to_dense_batch(h, topo)
            _run_probes(dense, block.att, config, probe, input_probe)
            if config.attention == "memeff":
                glob_dense = attn.memeff_attention(dense, block.att, config.tiles())
            else:
                glob_dense = attn.naive_attention(dense, block.att, use_phi=config.use_phi)
            h_glob = attn.from_dense_batch(
                attn.DenseBatch(glob_dense, dense.mask, dense.graph_sizes)
            )
            z = relu(h_glob + h) + (h_loc + h)
        else:
            if probe is not None or input_probe is not None:
                dense = attn.to_dense_batch(h, topo)
                _run_probes(dense, block.att, config, probe, input_probe)
            z = relu(h) + (h_loc + h)
        h_new = batch_norm(linear(z, block.fuse_w, block.fuse_b), block.bn, training) + z
        h = dropout(h_new, config.dropout, training) if config.dropout > 0 else h_new

    g = gops.global_pool(h, topo, config.pooling)
    return linear(g, params.cls_w, params.cls_b)


def predict_topk(logits: np.ndarray | Tensor, k: int) -> np.ndarray:
    """Indices of the k largest logits per row; ties break toward the
    lower class index."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if k > arr.shape[-1]:
        raise ValueError(f"k={k} exceeds {arr.shape[-1]} classes")
    order = np.argsort(-arr, axis=-1, kind="stable")
    return order[..., :k]


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Named-tensor container (zip of little-endian float32 arrays) plus a
    text manifest of entry names for diffing."""
    path = Path(path)
    entries = {name: p.data.astype("<f4") for name, p in params.named_parameters()}
    entries.update({name: buf.astype("<f4") for name, buf in params.named_buffers()})
    np.savez(path, **entries)
    manifest = path.with_suffix(".names.txt")
    manifest.write_text("".join(f"{n}\n" for n in sorted(entries)), encoding="utf-8")


def load_checkpoint(path: str | Path, config: ModelConfig, dtype=np.float32) -> ModelParams:
    """Rebuild ModelParams from a checkpoint written by save_checkpoint."""
    params = init_model_params(config, np.random.default_rng(0), dtype=dtype)
    with np.load(Path(path)) as data:
        state = {name: data[name] for name in data.files}
    params.load_state(state)
    return params
