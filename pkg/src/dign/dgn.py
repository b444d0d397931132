"""Motif-disentangled graph network shared by both modalities.

Node embeddings are split into K chunks. Layer 0 projects input features
into each chunk subspace (relu + unit normalization). Each later layer
mixes every node's chunk with a routed sum over its neighbors, where the
route weight of neighbor j is a softmax over the K channels of the
chunkwise dot products with the receiving node, so each neighbor spends
its influence on the channels it already agrees with. The final embedding
concatenates, per chunk, the sum of that chunk across all layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import ConfigError, ShapeError
from .graphdata import SceneGraph, undirected_relations
from .numerics import SegmentPlan, Tensor, make_segment_plan


@dataclass
class DgnLayerParams:
    ego: Tensor   # (K, dk, dk)
    nbr: Tensor   # (K, dk, dk)


@dataclass
class DgnParams:
    chunks: int
    layers_count: int
    d_in: int
    d_out: int
    w0: Tensor            # (K, dk, d_in)
    b0: Tensor            # (K, 1, dk)
    layers: list[DgnLayerParams]

    @property
    def chunk_dim(self) -> int:
        return self.d_out // self.chunks

    def named_parameters(self, prefix: str = "dgn") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}.w0", self.w0), (f"{prefix}.b0", self.b0)]
        for l, lay in enumerate(self.layers, start=1):
            out.append((f"{prefix}.layer{l}.ego", lay.ego))
            out.append((f"{prefix}.layer{l}.nbr", lay.nbr))
        return out


def init_dgn_params(chunks: int, layers: int, d_in: int, d_out: int,
                    rng: np.random.Generator) -> DgnParams:
    if d_out % chunks != 0:
        raise ConfigError(f"chunk count {chunks} must divide d_out {d_out}")
    dk = d_out // chunks

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return nm.param(rng.uniform(-bound, bound, size=shape))

    w0 = uniform((chunks, dk, d_in), d_in)
    b0 = nm.param(np.zeros((chunks, 1, dk)))
    layer_params = [
        DgnLayerParams(ego=uniform((chunks, dk, dk), dk), nbr=uniform((chunks, dk, dk), dk))
        for _ in range(layers)
    ]
    return DgnParams(chunks, layers, d_in, d_out, w0, b0, layer_params)


@dataclass(frozen=True)
class GraphStructure:
    """Undirected neighbor relations of a graph, in canonical order."""

    node_count: int
    src: np.ndarray    # (E,) message sources
    recv: np.ndarray   # (E,) message receivers, sorted with src
    plan: SegmentPlan

    @property
    def relation_count(self) -> int:
        return self.src.size


def graph_structure(node_count: int, edges) -> GraphStructure:
    src, recv = undirected_relations(node_count, edges)
    return GraphStructure(node_count, src, recv, make_segment_plan(recv, node_count))


def structure_of(graph: SceneGraph) -> GraphStructure:
    return graph_structure(graph.node_count, graph.edges)


def chunk_project(features, params: DgnParams, eps: float = 1e-12) -> Tensor:
    """Layer-0 chunks (K, N, dk): unit-normalized relu projections."""
    x = features if isinstance(features, Tensor) else nm.constant(features)
    if x.data.ndim != 2 or x.data.shape[1] != params.d_in:
        raise ShapeError(f"expected features (N, {params.d_in}), got {x.data.shape}")
    pre = nm.einsum2("koi,ni->kno", params.w0, x) + params.b0
    return nm.l2_normalize(nm.relu(pre), eps)


def routing_weights(chunks_i, chunks_j) -> Tensor:
    """Channel weights for one neighbor relation j -> i.

    Both arguments are (K, dk) chunk stacks; the softmax runs across the K
    channels, not across neighbors.
    """
    a = chunks_i if isinstance(chunks_i, Tensor) else nm.constant(chunks_i)
    b = chunks_j if isinstance(chunks_j, Tensor) else nm.constant(chunks_j)
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(f"chunk stacks must share shape (K, dk), got {a.data.shape} vs {b.data.shape}")
    dots = nm.sum_axis(a * b, axis=1)
    return nm.softmax(dots)


def _routing_batch(state: Tensor, structure: GraphStructure) -> Tensor:
    """Routing weights (E, K) for every relation from layer l-1 chunks."""
    s = nm.take(state, structure.src, axis=1)
    r = nm.take(state, structure.recv, axis=1)
    dots = nm.sum_axis(s * r, axis=2)          # (K, E)
    return nm.softmax(nm.transpose(dots, (1, 0)))


def disentangle_layer(structure: GraphStructure, state: Tensor, layer: DgnLayerParams,
                      training: bool = False, rng: np.random.Generator | None = None,
                      dropout_rate: float = 0.5) -> tuple[Tensor, Tensor]:
    """One routed aggregation layer; returns (new chunks, routing weights)."""
    ego = nm.einsum2("koe,kne->kno", layer.ego, state)
    if structure.relation_count > 0:
        weights = _routing_batch(state, structure)
        msg = nm.einsum2("koe,kne->kno", layer.nbr, state)
        gathered = nm.take(msg, structure.src, axis=1)          # (K, E, dk)
        per_chunk = nm.reshape(nm.transpose(weights, (1, 0)), (state.data.shape[0], -1, 1))
        agg = nm.segment_sum(gathered * per_chunk, structure.plan)
        pre = ego + agg
    else:
        weights = nm.constant(np.zeros((0, state.data.shape[0])))
        pre = ego
    out = nm.relu(pre)
    if training and dropout_rate > 0.0:
        out = nm.dropout(out, dropout_rate, rng)
    return out, weights


@dataclass
class DgnForward:
    embedding: Tensor              # (N, d_out), chunk-concatenated
    chunk_sum: Tensor              # (K, N, dk), sum over layers
    layer_chunks: list[Tensor]     # per layer l=0..L, each (K, N, dk)
    routing: list[Tensor]          # per layer l=1..L, each (E, K)
    structure: GraphStructure


def dgn_forward_from_layer0(structure: GraphStructure, layer0: Tensor, params: DgnParams,
                            training: bool = False, rng: np.random.Generator | None = None,
                            dropout_rate: float = 0.5) -> DgnForward:
    chunks = [layer0]
    routing = []
    state = layer0
    for layer in params.layers:
        state, weights = disentangle_layer(structure, state, layer, training, rng, dropout_rate)
        chunks.append(state)
        routing.append(weights)
    total = chunks[0]
    for c in chunks[1:]:
        total = total + c
    n = layer0.data.shape[1]
    embedding = nm.reshape(nm.transpose(total, (1, 0, 2)), (n, params.d_out))
    return DgnForward(embedding, total, chunks, routing, structure)


def dgn_forward(graph: SceneGraph, features, params: DgnParams,
                training: bool = False, rng: np.random.Generator | None = None,
                eps: float = 1e-12, dropout_rate: float = 0.5,
                dropout_layer0: bool = False,
                structure: GraphStructure | None = None) -> DgnForward:
    """Project, run all disentangling layers, and sum the residual tower."""
    if structure is None:
        structure = structure_of(graph)
    layer0 = chunk_project(features, params, eps)
    if training and dropout_layer0 and dropout_rate > 0.0:
        layer0 = nm.dropout(layer0, dropout_rate, rng)
    return dgn_forward_from_layer0(structure, layer0, params, training, rng, dropout_rate)
