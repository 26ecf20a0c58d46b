"""Nonlocal sample graphs and the two-layer GraphSAGE branch (TPC)."""

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .nn import Linear, Module, he_uniform
from .tensor import ContractError, Tensor, linear, neighbor_mean, relu, softmax

logger = logging.getLogger(__name__)

SAGE_WIDTHS = (64, 32)


@dataclass(frozen=True)
class BandGraph:
    """Adjacency in CSR form; neighbor lists exclude the node itself."""

    indptr: np.ndarray
    indices: np.ndarray

    @property
    def n_nodes(self):
        return len(self.indptr) - 1

    def neighbors(self, v):
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    def degrees(self):
        return np.diff(self.indptr)

    def edges(self):
        rows = np.repeat(np.arange(self.n_nodes), self.degrees())
        return rows, self.indices

    def is_symmetric(self):
        r, c = self.edges()
        fwd = set(zip(r.tolist(), c.tolist()))
        return all((b, a) in fwd for a, b in fwd)

    def induced(self, nodes):
        """Subgraph on ``nodes`` (renumbered 0..len-1 in the given order)."""
        nodes = np.asarray(nodes, dtype=np.int64)
        remap = np.full(self.n_nodes, -1, dtype=np.int64)
        remap[nodes] = np.arange(len(nodes))
        lists = []
        for v in nodes:
            nb = remap[self.neighbors(v)]
            lists.append(np.sort(nb[nb >= 0]))
        return from_neighbor_lists(lists)


def from_neighbor_lists(lists):
    lists = [np.asarray(x, dtype=np.int64) for x in lists]
    indptr = np.zeros(len(lists) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(x) for x in lists])
    indices = np.concatenate(lists) if lists else np.zeros(0, dtype=np.int64)
    return BandGraph(indptr, indices.astype(np.int64))


def from_edges(n, rows, cols):
    """Symmetric-by-union CSR graph without self loops or duplicates."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    r = np.concatenate([rows, cols])
    c = np.concatenate([cols, rows])
    keep = r != c
    key = np.unique(r[keep] * n + c[keep])
    r, c = np.divmod(key, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, r + 1, 1)
    return BandGraph(np.cumsum(indptr), c)


def build_graph(node_features, k_neighbors=10):
    """Cosine k-NN graph symmetrized by union; ties go to the lower node index.

    Nodes whose feature vector is all zeros have no defined cosine; they link
    to their k lowest-index peers and are never picked by other nodes' k-NN
    search (they still gain those nodes through symmetrization).
    """
    x = np.asarray(node_features, dtype=np.float64)
    n = x.shape[0]
    if n < k_neighbors + 1:
        raise ContractError(f"build_graph: {n} nodes cannot have {k_neighbors} neighbors each")
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any():
        logger.warning("build_graph: %d zero-norm feature vectors; linking them by index", int(zero.sum()))
    xn = x / np.where(zero, 1.0, norms)[:, None]
    sim = xn @ xn.T
    sim[:, zero] = -np.inf
    sim[zero, :] = 0.0
    nbr = _kernels.topk_rows(sim, k_neighbors)
    rows = np.repeat(np.arange(n), k_neighbors)
    return from_edges(n, rows, nbr.ravel())


def sample_neighbors(graph, size, seed):
    """Fixed-size uniform neighbor sampling per node (GraphSAGE style).

    Nodes with at most ``size`` neighbors keep all of them. The result is in
    general not symmetric.
    """
    rng = np.random.default_rng(seed)
    lists = []
    for v in range(graph.n_nodes):
        nb = graph.neighbors(v)
        if len(nb) > size:
            nb = np.sort(rng.choice(nb, size=size, replace=False))
        lists.append(nb)
    return from_neighbor_lists(lists)


def sage_layer(graph, features, weight):
    """relu(W @ mean({h_v} U {h_u : u in N(v)})) for every node v."""
    if features.shape[-1] != weight.shape[1]:
        raise ContractError(f"sage_layer: feature width {features.shape[-1]} != weight input {weight.shape[1]}")
    if features.shape[0] != graph.n_nodes:
        raise ContractError(f"sage_layer: {features.shape[0]} feature rows for {graph.n_nodes} nodes")
    agg = neighbor_mean(features, graph.indptr, graph.indices)
    return relu(linear(agg, weight))


class GraphSageParams(Module):
    """Two bias-free aggregation layers followed by the FC classifier."""

    def __init__(self, d_in, n_classes, rng, widths=SAGE_WIDTHS, dtype=np.float32):
        h1, h2 = widths
        self.w1 = Tensor(he_uniform(rng, (h1, d_in), d_in, dtype), requires_grad=True)
        self.w2 = Tensor(he_uniform(rng, (h2, h1), h1, dtype), requires_grad=True)
        self.fc = Linear(h2, n_classes, rng, dtype)


def tpc_logits(graph, features, params):
    g1 = sage_layer(graph, features, params.w1)
    g2 = sage_layer(graph, g1, params.w2)
    return params.fc(g2)


def tpc_forward(graph, features, params):
    """Per-node class probabilities from two GraphSAGE layers and the FC head."""
    return softmax(tpc_logits(graph, features, params))
