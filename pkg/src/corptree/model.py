"""Graph classifier: node embedding -> 3x (GraphSAGE + TopK pool + mean
readout) -> average of the three readouts -> two-layer MLP head.

Forward passes record the intermediates needed by ``model_backward``, which
accumulates exact gradients into the ``ParameterStore`` by composing the
diffcore backward ops in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParameterStore
from .errors import DataError, ShapeMismatch, ZeroProjection

PROJECTION_EPS = 1e-12
# Guards against float noise pushing ratio*n just past an integer boundary.
CEIL_GUARD = 1e-9


@dataclass(frozen=True)
class ModelConfig:
    """Network hyperparameters; ``node_in_dim`` equals the lookback window."""

    node_in_dim: int
    hidden_dim: int = 32
    sage_layers: int = 3
    pool_ratio: float = 0.8
    mlp_hidden: int = 64
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.node_in_dim < 1:
            raise DataError("node_in_dim must be >= 1")
        if self.hidden_dim < 1 or self.mlp_hidden < 1 or self.sage_layers < 1:
            raise DataError("layer sizes must be >= 1")
        if not 0.0 < self.pool_ratio <= 1.0:
            raise DataError("pool_ratio must be in (0, 1]")
        if self.num_classes not in (3, 5, 8):
            raise DataError(f"num_classes must be one of (3, 5, 8), got {self.num_classes}")

    def to_json_dict(self) -> dict:
        return {
            "node_in_dim": self.node_in_dim,
            "hidden_dim": self.hidden_dim,
            "sage_layers": self.sage_layers,
            "pool_ratio": self.pool_ratio,
            "mlp_hidden": self.mlp_hidden,
            "num_classes": self.num_classes,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            node_in_dim=int(d["node_in_dim"]),
            hidden_dim=int(d["hidden_dim"]),
            sage_layers=int(d["sage_layers"]),
            pool_ratio=float(d["pool_ratio"]),
            mlp_hidden=int(d["mlp_hidden"]),
            num_classes=int(d["num_classes"]),
            seed=int(d["seed"]),
        )


@dataclass
class GraphBatch:
    """Block-diagonal multi-graph container.

    Nodes of all graphs are concatenated; ``graph_of_node`` maps each node to
    its graph id and must be non-decreasing (graphs stored contiguously).
    """

    x: np.ndarray  # (N, node_in_dim)
    edges: np.ndarray  # (m, 2) int64, undirected, unique pairs
    graph_of_node: np.ndarray  # (N,) int64
    num_graphs: int
    labels: np.ndarray | None = None  # (num_graphs,) int64

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.graph_of_node = np.asarray(self.graph_of_node, dtype=np.int64)
        n = self.x.shape[0]
        if self.graph_of_node.shape != (n,):
            raise ShapeMismatch("graph_of_node must have one entry per node")
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            raise DataError("edge references a node outside the batch")
        if self.edges.size and np.any(
            self.graph_of_node[self.edges[:, 0]] != self.graph_of_node[self.edges[:, 1]]
        ):
            raise DataError("edge crosses graph boundaries")
        if np.bincount(self.graph_of_node, minlength=self.num_graphs).min(initial=1) < 1:
            raise DataError("every graph needs at least one node")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.num_graphs,):
                raise ShapeMismatch("labels must have one entry per graph")


def init_params(cfg: ModelConfig) -> ParameterStore:
    """Glorot-uniform weights, zero biases, deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    store = ParameterStore()

    def uniform(rows: int, cols: int, fan_in: int, fan_out: int) -> np.ndarray:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(rows, cols))

    h = cfg.hidden_dim
    store.add("embed.W", uniform(cfg.node_in_dim, h, cfg.node_in_dim, h))
    store.add("embed.b", np.zeros((1, h)))
    for layer in range(1, cfg.sage_layers + 1):
        store.add(f"sage{layer}.Wself", uniform(h, h, h, h))
        store.add(f"sage{layer}.Wneigh", uniform(h, h, h, h))
        store.add(f"sage{layer}.b", np.zeros((1, h)))
    for layer in range(1, cfg.sage_layers + 1):
        store.add(f"pool{layer}.p", uniform(h, 1, h, 1))
    store.add("mlp.W1", uniform(h, cfg.mlp_hidden, h, cfg.mlp_hidden))
    store.add("mlp.b1", np.zeros((1, cfg.mlp_hidden)))
    store.add("mlp.W2", uniform(cfg.mlp_hidden, cfg.num_classes, cfg.mlp_hidden, cfg.num_classes))
    store.add("mlp.b2", np.zeros((1, cfg.num_classes)))
    return store


def embed_nodes(x: np.ndarray, params: ParameterStore) -> np.ndarray:
    """ReLU(x @ W + b) widening node features to the hidden dimension."""
    return dc.relu(dc.add_bias(dc.matmul(x, params.value("embed.W")), params.value("embed.b")))


def neighbor_mean(h: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Mean of neighbor rows over undirected edges; isolated nodes get zeros."""
    n = h.shape[0]
    acc = np.zeros_like(h)
    deg = np.zeros(n)
    if edges.size:
        np.add.at(acc, edges[:, 0], h[edges[:, 1]])
        np.add.at(acc, edges[:, 1], h[edges[:, 0]])
        deg = np.bincount(edges.ravel(), minlength=n).astype(np.float64)
    return acc / np.maximum(deg, 1.0)[:, None]


def neighbor_mean_backward(d_agg: np.ndarray, edges: np.ndarray) -> np.ndarray:
    n = d_agg.shape[0]
    d_h = np.zeros_like(d_agg)
    if edges.size:
        deg = np.bincount(edges.ravel(), minlength=n).astype(np.float64)
        scaled = d_agg / np.maximum(deg, 1.0)[:, None]
        np.add.at(d_h, edges[:, 1], scaled[edges[:, 0]])
        np.add.at(d_h, edges[:, 0], scaled[edges[:, 1]])
    return d_h


def sage_forward(h: np.ndarray, edges: np.ndarray, params: ParameterStore, layer: int) -> np.ndarray:
    """h'_v = ReLU(Wself h_v + Wneigh mean_{u in N(v)} h_u + b)."""
    agg = neighbor_mean(h, edges)
    pre = dc.add_bias(
        dc.matmul(h, params.value(f"sage{layer}.Wself"))
        + dc.matmul(agg, params.value(f"sage{layer}.Wneigh")),
        params.value(f"sage{layer}.b"),
    )
    return dc.relu(pre)


@dataclass
class PoolOut:
    h: np.ndarray
    edges: np.ndarray
    graph_of_node: np.ndarray
    kept: np.ndarray  # indices into the pre-pool node set, ascending
    scores: np.ndarray  # pre-pool per-node scores


def _keep_count(ratio: float, n_nodes: int) -> int:
    return max(1, math.ceil(ratio * n_nodes - CEIL_GUARD))


def topk_pool(
    h: np.ndarray,
    edges: np.ndarray,
    graph_of_node: np.ndarray,
    p: np.ndarray,
    ratio: float,
) -> PoolOut:
    """Keep each graph's ceil(ratio * n) highest-scoring nodes, gated by tanh.

    Scores are projections onto the learned vector p normalized to unit
    length; ties keep the lower node id. Kept features are scaled row-wise by
    tanh(score) and edges are restricted to survivors and reindexed.
    """
    p_norm = float(np.linalg.norm(p))
    if p_norm < PROJECTION_EPS:
        raise ZeroProjection()
    scores = (h @ (p / p_norm)).ravel()

    kept_chunks = []
    for g in np.unique(graph_of_node):
        node_ids = np.flatnonzero(graph_of_node == g)
        k = _keep_count(ratio, node_ids.size)
        order = np.argsort(-scores[node_ids], kind="stable")  # stable: ties keep lower id
        kept_chunks.append(np.sort(node_ids[order[:k]]))
    kept = np.concatenate(kept_chunks) if kept_chunks else np.empty(0, dtype=np.int64)

    gate = np.tanh(scores[kept])[:, None]
    h_kept = dc.scale_rows(dc.gather_rows(h, kept), gate)

    new_id = np.full(h.shape[0], -1, dtype=np.int64)
    new_id[kept] = np.arange(kept.size)
    if edges.size:
        mask = (new_id[edges[:, 0]] >= 0) & (new_id[edges[:, 1]] >= 0)
        new_edges = new_id[edges[mask]]
    else:
        new_edges = np.empty((0, 2), dtype=np.int64)

    return PoolOut(
        h=h_kept,
        edges=new_edges,
        graph_of_node=graph_of_node[kept],
        kept=kept,
        scores=scores,
    )


def readout_mean(h: np.ndarray, graph_of_node: np.ndarray, num_graphs: int) -> np.ndarray:
    """Per-graph mean of surviving node features; empty graphs read as zeros."""
    return dc.segment_mean(h, graph_of_node, num_graphs)


@dataclass
class _LayerCache:
    h_in: np.ndarray
    edges_in: np.ndarray
    graph_in: np.ndarray
    agg: np.ndarray
    pre: np.ndarray
    h_act: np.ndarray
    pool: PoolOut


@dataclass
class ForwardCache:
    batch: GraphBatch
    embed_pre: np.ndarray
    layers: list[_LayerCache] = field(default_factory=list)
    readouts: list[np.ndarray] = field(default_factory=list)
    graph_embedding: np.ndarray | None = None
    mlp_pre: np.ndarray | None = None
    mlp_act: np.ndarray | None = None
    logits: np.ndarray | None = None

    def surviving_node_counts(self) -> list[int]:
        return [layer.pool.h.shape[0] for layer in self.layers]


def model_forward(
    batch: GraphBatch, params: ParameterStore, cfg: ModelConfig
) -> tuple[np.ndarray, ForwardCache]:
    """Logits (num_graphs x num_classes) plus the intermediates for backward."""
    if batch.x.shape[1] != cfg.node_in_dim:
        raise ShapeMismatch(
            f"batch feature width {batch.x.shape[1]} != node_in_dim {cfg.node_in_dim}"
        )
    cache = ForwardCache(
        batch=batch,
        embed_pre=dc.add_bias(dc.matmul(batch.x, params.value("embed.W")), params.value("embed.b")),
    )
    h = dc.relu(cache.embed_pre)
    edges = batch.edges
    graph_of_node = batch.graph_of_node

    for layer in range(1, cfg.sage_layers + 1):
        agg = neighbor_mean(h, edges)
        pre = dc.add_bias(
            dc.matmul(h, params.value(f"sage{layer}.Wself"))
            + dc.matmul(agg, params.value(f"sage{layer}.Wneigh")),
            params.value(f"sage{layer}.b"),
        )
        h_act = dc.relu(pre)
        pool = topk_pool(h_act, edges, graph_of_node, params.value(f"pool{layer}.p"), cfg.pool_ratio)
        cache.layers.append(
            _LayerCache(
                h_in=h, edges_in=edges, graph_in=graph_of_node,
                agg=agg, pre=pre, h_act=h_act, pool=pool,
            )
        )
        cache.readouts.append(readout_mean(pool.h, pool.graph_of_node, batch.num_graphs))
        h, edges, graph_of_node = pool.h, pool.edges, pool.graph_of_node

    g = sum(cache.readouts) / float(cfg.sage_layers)
    cache.graph_embedding = g
    cache.mlp_pre = dc.add_bias(dc.matmul(g, params.value("mlp.W1")), params.value("mlp.b1"))
    cache.mlp_act = dc.relu(cache.mlp_pre)
    cache.logits = dc.add_bias(
        dc.matmul(cache.mlp_act, params.value("mlp.W2")), params.value("mlp.b2")
    )
    return cache.logits, cache


def _pool_backward(
    d_h_out: np.ndarray, layer: _LayerCache, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the pooled features w.r.t. the pre-pool features and p."""
    pool = layer.pool
    h = layer.h_act
    p_norm = float(np.linalg.norm(p))
    p_hat = (p / p_norm).ravel()

    gate = np.tanh(pool.scores[pool.kept])[:, None]
    h_kept = h[pool.kept]

    d_h_kept, d_gate = dc.scale_rows_backward(d_h_out, h_kept, gate)
    d_score_kept = (d_gate * (1.0 - gate * gate)).ravel()

    d_h = dc.gather_rows_backward(d_h_kept, pool.kept, h.shape[0])
    d_scores = np.zeros(h.shape[0])
    d_scores[pool.kept] = d_score_kept

    # scores = h @ p_hat with p_hat = p / ||p||.
    d_h += np.outer(d_scores, p_hat)
    d_p = (h.T @ d_scores - float(pool.scores @ d_scores) * p_hat) / p_norm
    return d_h, d_p[:, None]


def model_backward(
    cache: ForwardCache, d_logits: np.ndarray, params: ParameterStore, cfg: ModelConfig
) -> None:
    """Accumulate parameter gradients for the given output gradient."""
    d_act, d_b2 = dc.add_bias_backward(d_logits)
    d_mlp_act, d_w2 = dc.matmul_backward(d_act, cache.mlp_act, params.value("mlp.W2"))
    params.grad("mlp.W2")[...] += d_w2
    params.grad("mlp.b2")[...] += d_b2

    d_mlp_pre = dc.relu_backward(d_mlp_act, cache.mlp_pre)
    d_pre, d_b1 = dc.add_bias_backward(d_mlp_pre)
    d_g, d_w1 = dc.matmul_backward(d_pre, cache.graph_embedding, params.value("mlp.W1"))
    params.grad("mlp.W1")[...] += d_w1
    params.grad("mlp.b1")[...] += d_b1

    d_readout = d_g / float(cfg.sage_layers)

    d_h_next = None  # gradient flowing into the pooled output of the layer below
    for layer_idx in range(cfg.sage_layers, 0, -1):
        layer = cache.layers[layer_idx - 1]
        pool = layer.pool

        d_pooled = dc.segment_mean_backward(
            d_readout, pool.graph_of_node, cache.batch.num_graphs
        )
        if d_h_next is not None:
            d_pooled = d_pooled + d_h_next

        d_h_act, d_p = _pool_backward(d_pooled, layer, params.value(f"pool{layer_idx}.p"))
        params.grad(f"pool{layer_idx}.p")[...] += d_p

        d_sage_pre = dc.relu_backward(d_h_act, layer.pre)
        d_lin, d_b = dc.add_bias_backward(d_sage_pre)
        d_h_self, d_wself = dc.matmul_backward(
            d_lin, layer.h_in, params.value(f"sage{layer_idx}.Wself")
        )
        d_agg, d_wneigh = dc.matmul_backward(
            d_lin, layer.agg, params.value(f"sage{layer_idx}.Wneigh")
        )
        params.grad(f"sage{layer_idx}.Wself")[...] += d_wself
        params.grad(f"sage{layer_idx}.Wneigh")[...] += d_wneigh
        params.grad(f"sage{layer_idx}.b")[...] += d_b

        d_h_next = d_h_self + neighbor_mean_backward(d_agg, layer.edges_in)

    d_embed_pre = dc.relu_backward(d_h_next, cache.embed_pre)
    d_lin, d_b = dc.add_bias_backward(d_embed_pre)
    _, d_w = dc.matmul_backward(d_lin, cache.batch.x, params.value("embed.W"))
    params.grad("embed.W")[...] += d_w
    params.grad("embed.b")[...] += d_b


def loss_and_grad(
    batch: GraphBatch,
    params: ParameterStore,
    cfg: ModelConfig,
    class_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Cross-entropy loss over the batch; accumulates gradients into params."""
    if batch.labels is None:
        raise DataError("batch has no labels")
    logits, cache = model_forward(batch, params, cfg)
    loss, probs = dc.softmax_xent(logits, batch.labels, class_weights)
    d_logits = dc.softmax_xent_backward(probs, batch.labels, class_weights)
    model_backward(cache, d_logits, params, cfg)
    return loss, probs


def predict(
    batch: GraphBatch, params: ParameterStore, cfg: ModelConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Class ids (softmax argmax, ties to the lowest id) and probability rows."""
    logits, _ = model_forward(batch, params, cfg)
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    return probs.argmax(axis=1), probs
