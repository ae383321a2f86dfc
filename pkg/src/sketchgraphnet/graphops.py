"""Graph-structured operators over flat node features.

GraphTopology carries the edge list, batch assignment and cached sparse
operators for a batch of graphs; the ops here (Chebyshev input
embedding, GIN message passing, masked global pooling) all act on
[n_total, d] tensors and are batch-parallel by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .tensor import (
    Parameter,
    ShapeMismatch,
    Tensor,
    apply_linear_map,
    from_op,
    linear,
    matmul,
    mul,
    relu,
)

__all__ = [
    "EmptyGraph",
    "GraphTopology",
    "ChebParams",
    "GinParams",
    "cheb_conv",
    "gin_conv",
    "neighbor_mean_conv",
    "global_pool",
]


class EmptyGraph(ValueError):
    """A graph in the batch has zero nodes."""


@dataclass
class GraphTopology:
    """Static structure of a batch of graphs.

    ``edges`` holds undirected pairs (each pair listed once); ``batch``
    maps node row -> graph id and must be non-decreasing. Sparse
    operators are built lazily and cached.
    """

    sizes: np.ndarray
    edges: np.ndarray
    batch: np.ndarray = field(default=None)  # type: ignore[assignment]
    degrees: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if self.sizes.ndim != 1 or self.sizes.size == 0:
            raise EmptyGraph("topology needs at least one graph")
        if np.any(self.sizes < 1):
            raise EmptyGraph("every graph must have at least one node")
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = int(self.sizes.sum())
        if self.batch is None:
            self.batch = np.repeat(np.arange(self.sizes.size), self.sizes)
        else:
            self.batch = np.asarray(self.batch, dtype=np.int64)
            if np.any(np.diff(self.batch) < 0):
                raise ValueError("batch vector must be non-decreasing")
        if self.batch.shape != (n,):
            raise ShapeMismatch("batch vector length differs from total node count")
        if self.edges.size:
            u, v = self.edges[:, 0], self.edges[:, 1]
            if np.any(u == v):
                raise ValueError("self-loops are not allowed")
            if np.any(self.edges < 0) or np.any(self.edges >= n):
                raise ValueError("edge endpoint out of range")
            if np.any(self.batch[u] != self.batch[v]):
                raise ValueError("edges may not cross graphs")
            canon = np.unique(np.sort(self.edges, axis=1), axis=0)
            if canon.shape[0] != self.edges.shape[0]:
                raise ValueError("duplicate undirected edges")
        if self.degrees is None:
            deg = np.zeros(n, dtype=np.int64)
            if self.edges.size:
                np.add.at(deg, self.edges[:, 0], 1)
                np.add.at(deg, self.edges[:, 1], 1)
            self.degrees = deg
        self.starts = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])
        self.within = np.arange(n) - self.starts[self.batch]
        self._adj = None
        self._lap_hat = None
        self._adj_rownorm = None

    # -- derived quantities ----------------------------------------------

    @property
    def num_graphs(self) -> int:
        return int(self.sizes.size)

    @property
    def num_nodes(self) -> int:
        return int(self.batch.size)

    @property
    def max_size(self) -> int:
        return int(self.sizes.max())

    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            n = self.num_nodes
            if self.edges.size:
                u, v = self.edges[:, 0], self.edges[:, 1]
                rows = np.concatenate([u, v])
                cols = np.concatenate([v, u])
                data = np.ones(rows.size, dtype=np.float64)
            else:
                rows = cols = np.empty(0, dtype=np.int64)
                data = np.empty(0, dtype=np.float64)
            self._adj = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        return self._adj

    def scaled_laplacian(self) -> sp.csr_matrix:
        """Symmetric-normalized Laplacian rescaled by a fixed spectral bound
        of 2 and shifted: off-diagonal -1/sqrt(du dv); isolated nodes act as
        a -identity row."""
        if self._lap_hat is None:
            n = self.num_nodes
            deg = self.degrees.astype(np.float64)
            inv_sqrt = np.zeros(n)
            nz = deg > 0
            inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
            if self.edges.size:
                u, v = self.edges[:, 0], self.edges[:, 1]
                w = -inv_sqrt[u] * inv_sqrt[v]
                rows = np.concatenate([u, v, np.flatnonzero(~nz)])
                cols = np.concatenate([v, u, np.flatnonzero(~nz)])
                data = np.concatenate([w, w, -np.ones((~nz).sum())])
            else:
                iso = np.flatnonzero(~nz)
                rows = cols = iso
                data = -np.ones(iso.size)
            self._lap_hat = sp.csr_matrix((data, (rows, cols)), shape=(n, n))
        return self._lap_hat

    def row_normalized_adjacency(self) -> sp.csr_matrix:
        if self._adj_rownorm is None:
            inv = 1.0 / np.maximum(self.degrees, 1)
            self._adj_rownorm = sp.diags(inv) @ self.adjacency()
        return self._adj_rownorm


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class ChebParams:
    """Per-order weight matrices for the Chebyshev input embedding."""

    weights: list[Parameter]
    bias: Parameter

    def __post_init__(self):
        if len(self.weights) < 1:
            raise ValueError("Chebyshev order must be >= 1")

    @property
    def order(self) -> int:
        return len(self.weights)

    def named_parameters(self):
        for k, w in enumerate(self.weights):
            yield w.name, w
        yield self.bias.name, self.bias


@dataclass
class GinParams:
    """GIN update: two-layer MLP applied to (1 + eps) * h + neighbor sum."""

    lin1_w: Parameter
    lin1_b: Parameter
    lin2_w: Parameter
    lin2_b: Parameter
    eps: float | Parameter = 0.0

    def named_parameters(self):
        for p in (self.lin1_w, self.lin1_b, self.lin2_w, self.lin2_b):
            yield p.name, p
        if isinstance(self.eps, Parameter):
            yield self.eps.name, self.eps


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------


def _spmm(x: Tensor, mat: sp.csr_matrix, adjoint_mat: sp.csr_matrix, name: str) -> Tensor:
    return apply_linear_map(
        x,
        lambda d: (mat @ d).astype(d.dtype, copy=False),
        lambda g: (adjoint_mat @ g).astype(g.dtype, copy=False),
        name=name,
    )


def cheb_conv(x: Tensor, topo: GraphTopology, params: ChebParams) -> Tensor:
    """Chebyshev spectral convolution of order K over the scaled Laplacian.

    T0 = X, T1 = L_hat X, T_k = 2 L_hat T_{k-1} - T_{k-2}; the output is
    sum_k T_k W_k + bias.
    """
    if x.shape[0] != topo.num_nodes:
        raise ShapeMismatch(f"features rows {x.shape[0]} != nodes {topo.num_nodes}")
    lap = topo.scaled_laplacian()
    t_prev: Tensor | None = None
    t_cur = x
    acc = matmul(t_cur, params.weights[0])
    for k in range(1, params.order):
        if k == 1:
            t_next = _spmm(x, lap, lap, "lap_matvec")
        else:
            t_next = mul(_spmm(t_cur, lap, lap, "lap_matvec"), 2.0) - t_prev
        acc = acc + matmul(t_next, params.weights[k])
        t_prev, t_cur = t_cur, t_next
    return acc + params.bias


def gin_conv(h: Tensor, topo: GraphTopology, params: GinParams) -> Tensor:
    """GIN update over undirected neighbors; isolated nodes keep (1+eps) h."""
    if h.shape[0] != topo.num_nodes:
        raise ShapeMismatch(f"features rows {h.shape[0]} != nodes {topo.num_nodes}")
    adj = topo.adjacency()
    agg = _spmm(h, adj, adj, "neighbor_sum")
    if isinstance(params.eps, Parameter):
        self_term = mul(h, params.eps + 1.0)
    else:
        self_term = mul(h, 1.0 + float(params.eps))
    z = self_term + agg
    z = relu(linear(z, params.lin1_w, params.lin1_b))
    return linear(z, params.lin2_w, params.lin2_b)


def neighbor_mean_conv(h: Tensor, topo: GraphTopology, params: GinParams) -> Tensor:
    """Plain neighbor-mean local operator sharing the GIN MLP shape.

    Update is MLP(h + mean of neighbors); a drop-in replacement used by
    the local-operator ablation axis.
    """
    if h.shape[0] != topo.num_nodes:
        raise ShapeMismatch(f"features rows {h.shape[0]} != nodes {topo.num_nodes}")
    mat = topo.row_normalized_adjacency()
    agg = _spmm(h, mat, mat.T.tocsr(), "neighbor_mean")
    z = h + agg
    z = relu(linear(z, params.lin1_w, params.lin1_b))
    return linear(z, params.lin2_w, params.lin2_b)


def global_pool(h: Tensor, topo: GraphTopology, mode: str = "mean") -> Tensor:
    """Per-graph reduction over that graph's nodes only -> [B, d]."""
    if h.shape[0] != topo.num_nodes:
        raise ShapeMismatch(f"features rows {h.shape[0]} != nodes {topo.num_nodes}")
    starts = topo.starts
    sizes = topo.sizes
    if mode == "sum" or mode == "mean":
        data = np.add.reduceat(h.data, starts, axis=0)
        if mode == "mean":
            data = data / sizes[:, None]
        batch = topo.batch

        def vjp(g):
            rows = g[batch]
            if mode == "mean":
                rows = rows / sizes[batch][:, None]
            return (rows,)

        return from_op(data, [h], vjp, f"global_pool_{mode}")
    if mode == "max":
        data = np.maximum.reduceat(h.data, starts, axis=0)
        d = h.shape[1]
        arg_rows = np.empty((topo.num_graphs, d), dtype=np.int64)
        for b in range(topo.num_graphs):
            s, e = starts[b], starts[b] + sizes[b]
            arg_rows[b] = s + h.data[s:e].argmax(axis=0)
        cols = np.broadcast_to(np.arange(d), arg_rows.shape)

        def vjp_max(g):
            out = np.zeros_like(h.data)
            np.add.at(out, (arg_rows, cols), g)
            return (out,)

        return from_op(data, [h], vjp_max, "global_pool_max")
    raise ValueError(f"unknown pooling mode {mode!r}")
