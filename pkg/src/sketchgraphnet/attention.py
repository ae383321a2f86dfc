"""Dense batching plus exact-softmax global attention, two execution paths.

Both paths compute the same function: per head, queries and keys pass
through an element-wise non-negative map (ReLU), logits are scaled by
1/sqrt(d_h), masked key columns are excluded, and the softmax is exact.

``naive_attention``  materializes the full [B, heads, N, N] logit matrix
                     (the reference oracle; the non-negative map is
                     optional here for instrumentation experiments).
``memeff_attention`` streams key tiles with an online softmax (running
                     max / denominator / rescaled accumulator) so the
                     N x N matrix never exists; its backward pass
                     recomputes tile logits from saved per-row log-sum-exp
                     statistics instead of storing them.

Transient buffers of both paths are tracked by a byte meter. The tiled
path's metered workspace depends only on (B, heads, block_q, block_k,
d_h), never on N; the data-plane buffers (Q/K/V projections, outputs,
per-row statistics, all O(B * N * d)) are deliberately outside the meter,
since they exist in any attention implementation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphops import EmptyGraph, GraphTopology
from .tensor import Parameter, ShapeMismatch, Tensor, from_op

__all__ = [
    "AttnParams",
    "TileConfig",
    "InvalidTile",
    "DenseBatch",
    "LogitStats",
    "WorkspaceMeter",
    "workspace_meter",
    "to_dense_batch",
    "from_dense_batch",
    "naive_attention",
    "memeff_attention",
    "logit_stats",
]


class InvalidTile(ValueError):
    """Tile block sizes must be at least 1."""


@dataclass
class TileConfig:
    block_q: int = 32
    block_k: int = 32

    def __post_init__(self):
        if self.block_q < 1 or self.block_k < 1:
            raise InvalidTile(f"tile sizes must be >= 1, got ({self.block_q}, {self.block_k})")


@dataclass
class AttnParams:
    """Multi-head projection weights; queries/keys/values share dim d."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wproj: Parameter
    bproj: Parameter
    num_heads: int = 8

    def __post_init__(self):
        d = self.wq.shape[0]
        if d % self.num_heads != 0:
            raise ShapeMismatch(f"hidden dim {d} not divisible by {self.num_heads} heads")

    @property
    def dim(self) -> int:
        return int(self.wq.shape[0])

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def named_parameters(self):
        for p in (self.wq, self.wk, self.wv, self.wproj, self.bproj):
            yield p.name, p


class WorkspaceMeter:
    """Byte counter for transient attention workspace."""

    def __init__(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0
        self.total_allocated_bytes = 0

    def reset(self) -> None:
        self.current_bytes = 0
        self.peak_bytes = 0
        self.total_allocated_bytes = 0

    def alloc(self, shape, dtype) -> np.ndarray:
        arr = np.empty(shape, dtype=dtype)
        self.current_bytes += arr.nbytes
        self.total_allocated_bytes += arr.nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        return arr

    def release(self, *arrays: np.ndarray) -> None:
        for arr in arrays:
            self.current_bytes -= arr.nbytes

    def counters(self) -> dict[str, int]:
        return {
            "current_bytes": self.current_bytes,
            "peak_bytes": self.peak_bytes,
            "total_allocated_bytes": self.total_allocated_bytes,
        }


workspace_meter = WorkspaceMeter()


# ---------------------------------------------------------------------------
# dense batching
# ---------------------------------------------------------------------------


@dataclass
class DenseBatch:
    """Padded node features [B, N, d] with a validity mask [B, N].

    Real nodes are front-packed per row; padded rows are zero. N is the
    maximum graph size in the batch.
    """

    features: Tensor
    mask: np.ndarray
    graph_sizes: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.graph_sizes = np.asarray(self.graph_sizes, dtype=np.int64)
        b, n = self.mask.shape
        if self.features.shape[:2] != (b, n):
            raise ShapeMismatch(f"features {self.features.shape} vs mask {self.mask.shape}")
        if np.any(self.graph_sizes < 1):
            raise EmptyGraph("every graph needs at least one node")
        expected = np.arange(n)[None, :] < self.graph_sizes[:, None]
        if not np.array_equal(self.mask, expected):
            raise ShapeMismatch("mask must be front-packed and match graph_sizes")


def to_dense_batch(h: Tensor, topo: GraphTopology) -> DenseBatch:
    """Pad flat per-node features to [B, N_max, d]; exact inverse of
    :func:`from_dense_batch` on real rows."""
    b = topo.num_graphs
    n = topo.max_size
    d = h.shape[-1]
    rows = topo.batch
    slots = topo.within
    data = np.zeros((b, n, d), dtype=h.data.dtype)
    data[rows, slots] = h.data

    def vjp(g):
        return (g[rows, slots],)

    features = from_op(data, [h], vjp, "to_dense_batch")
    mask = np.arange(n)[None, :] < topo.sizes[:, None]
    return DenseBatch(features=features, mask=mask, graph_sizes=topo.sizes.copy())


def from_dense_batch(dense: DenseBatch) -> Tensor:
    """Gather the real rows of a DenseBatch back into flat [n_total, d]."""
    rows, slots = np.nonzero(dense.mask)
    x = dense.features
    data = x.data[rows, slots]
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, slots] = g
        return (out,)

    return from_op(data, [x], vjp, "from_dense_batch")


# ---------------------------------------------------------------------------
# shared projection plumbing
# ---------------------------------------------------------------------------


def _check_batch(batch: DenseBatch, params: AttnParams) -> tuple[int, int, int, int]:
    b, n, d = batch.features.shape
    if d != params.dim:
        raise ShapeMismatch(f"feature dim {d} != projection dim {params.dim}")
    if not batch.mask[:, 0].all():
        raise EmptyGraph("a batch row has no valid nodes")
    return b, n, params.num_heads, params.head_dim


def _split_heads(x: np.ndarray, heads: int, dh: int) -> np.ndarray:
    b, n, _ = x.shape
    return np.ascontiguousarray(x.reshape(b, n, heads, dh).transpose(0, 2, 1, 3))


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, n, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, h * dh)


def _qkv(hdata: np.ndarray, params: AttnParams, use_phi: bool):
    """Project and head-split; returns scaled query map, key map, values,
    and the ReLU activation masks needed for the backward pass."""
    heads, dh = params.num_heads, params.head_dim
    d = params.dim
    b, n = hdata.shape[:2]
    w_all = np.concatenate([params.wq.data, params.wk.data, params.wv.data], axis=1)
    # flatten to 2D so BLAS sees one large GEMM instead of B small ones
    fused = (hdata.reshape(-1, d) @ w_all).reshape(b, n, 3 * d)
    q_pre = _split_heads(fused[..., :d], heads, dh)
    k_pre = _split_heads(fused[..., d : 2 * d], heads, dh)
    v = _split_heads(fused[..., 2 * d :], heads, dh)
    inv = 1.0 / math.sqrt(dh)
    if use_phi:
        q_mask = q_pre > 0
        k_mask = k_pre > 0
        qs = np.where(q_mask, q_pre, 0) * inv
        kf = np.where(k_mask, k_pre, 0)
    else:
        q_mask = k_mask = None
        qs = q_pre * inv
        kf = k_pre
    return qs, kf, v, q_mask, k_mask, inv


def _proj_grads(g: np.ndarray, merged: np.ndarray, params: AttnParams, qmask: np.ndarray):
    """Gradient of masked-output projection; returns (d_heads, dWproj, dbproj)."""
    g = g * qmask[:, :, None]
    b, n, d = g.shape
    g2 = g.reshape(-1, d)
    dwproj = merged.reshape(-1, d).T @ g2
    dbproj = g2.sum(axis=0)
    dmerged = (g2 @ params.wproj.data.T).reshape(b, n, d)
    d_heads = np.ascontiguousarray(
        dmerged.reshape(b, n, params.num_heads, params.head_dim).transpose(0, 2, 1, 3)
    )
    return d_heads, dwproj, dbproj


def _input_grads(
    dq_pre: np.ndarray,
    dk_pre: np.ndarray,
    dv: np.ndarray,
    hdata: np.ndarray,
    params: AttnParams,
):
    """Chain head-space gradients through the Q/K/V projections."""
    d = params.dim
    b, n = hdata.shape[:2]
    dcat = np.concatenate([_merge_heads(dq_pre), _merge_heads(dk_pre), _merge_heads(dv)], axis=-1)
    dcat2 = dcat.reshape(-1, 3 * d)
    w_all = np.concatenate([params.wq.data, params.wk.data, params.wv.data], axis=1)
    dh = (dcat2 @ w_all.T).reshape(b, n, d)
    h2 = hdata.reshape(-1, d)
    dw_all = h2.T @ dcat2
    return dh, dw_all[:, :d], dw_all[:, d : 2 * d], dw_all[:, 2 * d :]


def _project_out(merged: np.ndarray, params: AttnParams, qmask: np.ndarray) -> np.ndarray:
    b, n, d = merged.shape
    out = (merged.reshape(-1, d) @ params.wproj.data + params.bproj.data).reshape(b, n, d)
    out *= qmask[:, :, None]
    return out


def _key_bias(mask: np.ndarray, n_pad: int, dtype) -> np.ndarray:
    """Additive bias [B, n_pad]: 0 on valid keys, -inf on masked/padded."""
    b, n = mask.shape
    bias = np.full((b, n_pad), -np.inf, dtype=dtype)
    bias[:, :n][mask] = 0.0
    return bias


# ---------------------------------------------------------------------------
# reference path: full matrix
# ---------------------------------------------------------------------------


def naive_attention(batch: DenseBatch, params: AttnParams, use_phi: bool = True) -> Tensor:
    """Exact softmax attention with the full logit matrix materialized."""
    b, n, heads, dh = _check_batch(batch, params)
    x = batch.features
    hdata = x.data
    dtype = hdata.dtype
    qs, kf, v, q_relu, k_relu, inv = _qkv(hdata, params, use_phi)
    kbias = _key_bias(batch.mask, n, dtype)
    qmask = batch.mask.astype(dtype)

    logits = workspace_meter.alloc((b, heads, n, n), dtype)
    np.matmul(qs, kf.swapaxes(-1, -2), out=logits)
    logits += kbias[:, None, None, :]
    logits -= np.amax(logits, axis=-1, keepdims=True)
    np.exp(logits, out=logits)
    denom = logits.reshape(-1, n) @ np.ones(n, dtype=dtype)  # row sums over valid keys
    denom = denom.reshape(b, heads, n, 1)
    out_heads = (logits @ v) / denom
    logits /= denom
    weights = logits  # [B, heads, N, N], rows sum to 1 over valid keys
    merged = _merge_heads(out_heads)
    out = _project_out(merged, params, qmask)

    track = x.requires_grad or any(p.requires_grad for p in (params.wq, params.wk, params.wv, params.wproj, params.bproj))

    def vjp(g):
        d_heads, dwproj, dbproj = _proj_grads(g, merged, params, batch.mask)
        dv = np.swapaxes(weights, -1, -2) @ d_heads
        dw = workspace_meter.alloc((b, heads, n, n), dtype)
        np.matmul(d_heads, np.swapaxes(v, -1, -2), out=dw)
        dw -= (dw * weights).sum(axis=-1, keepdims=True)
        dw *= weights  # now dS
        dqs = dw @ kf
        dkf = np.swapaxes(dw, -1, -2) @ qs
        workspace_meter.release(dw, weights)
        dq_pre = dqs * inv
        dk_pre = dkf
        if use_phi:
            dq_pre = dq_pre * q_relu
            dk_pre = dk_pre * k_relu
        dh_, dwq, dwk, dwv = _input_grads(dq_pre, dk_pre, dv, hdata, params)
        return dh_, dwq, dwk, dwv, dwproj, dbproj

    result = from_op(out, [x, params.wq, params.wk, params.wv, params.wproj, params.bproj], vjp, "naive_attention")
    if not result.requires_grad or not track:
        workspace_meter.release(weights)
    return result


# ---------------------------------------------------------------------------
# tiled path: online softmax over key tiles
# ---------------------------------------------------------------------------


def _pad_axis2(x: np.ndarray, n_pad: int) -> np.ndarray:
    b, h, n, dh = x.shape
    if n == n_pad:
        return x
    out = np.zeros((b, h, n_pad, dh), dtype=x.dtype)
    out[:, :, :n] = x
    return out


def memeff_attention(batch: DenseBatch, params: AttnParams, tiles: TileConfig | None = None) -> Tensor:
    """Tiled exact-softmax attention; the non-negative query/key map is
    always applied on this path.

    Per query tile the kernel keeps a running row max ``m``, denominator
    ``s`` and value accumulator, rescaling them whenever a new key tile
    raises the max; the combined result equals the dense softmax to
    rounding. Backward recomputes each tile's probabilities from the
    saved log-sum-exp rows.
    """
    tiles = tiles or TileConfig()
    b, n, heads, dh = _check_batch(batch, params)
    x = batch.features
    hdata = x.data
    dtype = hdata.dtype
    bq, bk = tiles.block_q, tiles.block_k
    nq = ((n + bq - 1) // bq) * bq
    nk = ((n + bk - 1) // bk) * bk

    qs, kf, v, q_relu, k_relu, inv = _qkv(hdata, params, use_phi=True)
    qs_p = _pad_axis2(qs, nq)
    kf_p = _pad_axis2(kf, nk)
    v_p = _pad_axis2(v, nk)
    kbias = _key_bias(batch.mask, nk, dtype)
    qmask = batch.mask.astype(dtype)

    track = x.requires_grad or any(
        p.requires_grad for p in (params.wq, params.wk, params.wv, params.wproj, params.bproj)
    )

    out_pad = np.empty((b, heads, nq, dh), dtype=dtype)
    lse = np.empty((b, heads, nq), dtype=dtype)

    # metered tile workspace: B*heads*(bq*bk + 2*bq*dh + 4*bq) values
    meter = workspace_meter
    logits = meter.alloc((b, heads, bq, bk), dtype)
    pv = meter.alloc((b, heads, bq, dh), dtype)
    acc = meter.alloc((b, heads, bq, dh), dtype)
    m = meter.alloc((b, heads, bq), dtype)
    m_new = meter.alloc((b, heads, bq), dtype)
    alpha = meter.alloc((b, heads, bq), dtype)
    s = meter.alloc((b, heads, bq), dtype)

    # 2D aliases keep the reductions on one long axis; row sums go through
    # a GEMV, which is far cheaper than ufunc reduction over short rows
    logits2 = logits.reshape(-1, bk)
    ones_k = np.ones(bk, dtype=dtype)
    m2, m_new2, s2 = m.reshape(-1), m_new.reshape(-1), s.reshape(-1)

    for q0 in range(0, nq, bq):
        q_tile = qs_p[:, :, q0 : q0 + bq]
        for k0 in range(0, nk, bk):
            np.matmul(q_tile, kf_p[:, :, k0 : k0 + bk].swapaxes(-1, -2), out=logits)
            logits += kbias[:, None, None, k0 : k0 + bk]
            if k0 == 0:
                np.amax(logits2, axis=-1, out=m2)
                logits -= m[..., None]
                np.exp(logits, out=logits)
                np.matmul(logits2, ones_k, out=s2)
                np.matmul(logits, v_p[:, :, k0 : k0 + bk], out=acc)
                continue
            np.amax(logits2, axis=-1, out=m_new2)
            np.maximum(m, m_new, out=m_new)
            np.subtract(m, m_new, out=m)
            np.exp(m, out=alpha)  # rescale factor for the running sums
            logits -= m_new[..., None]
            np.exp(logits, out=logits)  # tile probabilities, un-normalized
            s *= alpha
            np.matmul(logits2, ones_k, out=m2)  # reuse m as row-sum scratch
            s += m
            acc *= alpha[..., None]
            np.matmul(logits, v_p[:, :, k0 : k0 + bk], out=pv)
            acc += pv
            np.copyto(m, m_new)
        np.divide(acc, s[..., None], out=out_pad[:, :, q0 : q0 + bq])
        np.log(s, out=alpha)
        np.add(alpha, m, out=lse[:, :, q0 : q0 + bq])
    meter.release(logits, pv, acc, m, m_new, alpha, s)

    out_heads = out_pad[:, :, :n]
    merged = _merge_heads(out_heads)
    out = _project_out(merged, params, qmask)

    def vjp(g):
        d_heads, dwproj, dbproj = _proj_grads(g, merged, params, batch.mask)
        do_pad = _pad_axis2(d_heads, nq)
        delta = np.einsum("bhnd,bhnd->bhn", do_pad, out_pad)  # [B, heads, nq]
        dqs_p = np.zeros_like(qs_p)
        dkf_p = np.zeros_like(kf_p)
        dv_p = np.zeros_like(v_p)

        t_logits = meter.alloc((b, heads, bq, bk), dtype)
        t_dp = meter.alloc((b, heads, bq, bk), dtype)
        t_dq = meter.alloc((b, heads, bq, dh), dtype)
        t_dkv = meter.alloc((b, heads, bk, dh), dtype)
        for q0 in range(0, nq, bq):
            q_tile = qs_p[:, :, q0 : q0 + bq]
            do_tile = do_pad[:, :, q0 : q0 + bq]
            lse_tile = lse[:, :, q0 : q0 + bq, None]
            delta_tile = delta[:, :, q0 : q0 + bq, None]
            for k0 in range(0, nk, bk):
                k_tile = kf_p[:, :, k0 : k0 + bk]
                np.matmul(q_tile, k_tile.swapaxes(-1, -2), out=t_logits)
                t_logits += kbias[:, None, None, k0 : k0 + bk]
                t_logits -= lse_tile
                np.exp(t_logits, out=t_logits)  # recomputed probabilities
                np.matmul(t_logits.swapaxes(-1, -2), do_tile, out=t_dkv)
                dv_p[:, :, k0 : k0 + bk] += t_dkv
                np.matmul(do_tile, v_p[:, :, k0 : k0 + bk].swapaxes(-1, -2), out=t_dp)
                t_dp -= delta_tile
                t_dp *= t_logits  # dS for this tile
                np.matmul(t_dp, k_tile, out=t_dq)
                dqs_p[:, :, q0 : q0 + bq] += t_dq
                np.matmul(t_dp.swapaxes(-1, -2), q_tile, out=t_dkv)
                dkf_p[:, :, k0 : k0 + bk] += t_dkv
        meter.release(t_logits, t_dp, t_dq, t_dkv)

        dq_pre = dqs_p[:, :, :n] * inv * q_relu
        dk_pre = dkf_p[:, :, :n] * k_relu
        dv = dv_p[:, :, :n]
        dh_, dwq, dwk, dwv = _input_grads(dq_pre, dk_pre, dv, hdata, params)
        return dh_, dwq, dwk, dwv, dwproj, dbproj

    return from_op(out, [x, params.wq, params.wk, params.wv, params.wproj, params.bproj], vjp, "memeff_attention")


# ---------------------------------------------------------------------------
# instrumentation
# ---------------------------------------------------------------------------


@dataclass
class LogitStats:
    max_logit: float
    min_logit: float
    frac_nonneg: float


def logit_stats(batch: DenseBatch, params: AttnParams, use_phi: bool) -> LogitStats:
    """Extrema and sign statistics of pre-softmax logits over valid
    query/key pairs; computed in key blocks, never materializing N x N."""
    b, n, heads, dh = _check_batch(batch, params)
    qs, kf, _, _, _, _ = _qkv(batch.features.data, params, use_phi)
    qmask = batch.mask
    lo, hi = np.inf, -np.inf
    nonneg = 0
    total = 0
    block = 128
    valid_rows = qmask[:, None, :, None]
    for k0 in range(0, n, block):
        k1 = min(n, k0 + block)
        logits = qs @ kf[:, :, k0:k1].swapaxes(-1, -2)
        pair_mask = np.broadcast_to(valid_rows & qmask[:, None, None, k0:k1], logits.shape)
        vals = logits[pair_mask]
        if vals.size:
            lo = min(lo, float(vals.min()))
            hi = max(hi, float(vals.max()))
            nonneg += int((vals >= 0).sum())
            total += vals.size
    return LogitStats(max_logit=hi, min_logit=lo, frac_nonneg=nonneg / max(total, 1))
