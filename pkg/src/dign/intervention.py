"""Interventional negative synthesis on the visual graph.

During training one corrupted copy of the visual forward pass supplies
hard negatives: either the relational structure is rewired (edge targets
permuted) or one chunk channel of the layer-0 embeddings is overwritten
(with a neighbor's chunk, or with normalized noise) before the remaining
layers run. Gradients flow through the corrupted pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .dgn import (DgnForward, DgnParams, GraphStructure, chunk_project,
                  dgn_forward, dgn_forward_from_layer0, graph_structure)
from .errors import ContractError
from .graphdata import Edge, SceneGraph
from .numerics import Tensor

KIND_STRUCTURE = "structure"
KIND_FEATURE_NEIGHBOR = "feature_neighbor"
KIND_FEATURE_NOISE = "feature_noise"
FEATURE_KINDS = (KIND_FEATURE_NEIGHBOR, KIND_FEATURE_NOISE)
ALL_KINDS = (KIND_STRUCTURE,) + FEATURE_KINDS


@dataclass
class InterventionOutcome:
    kind: str
    chunk_index: Optional[int]          # feature kinds only
    rewired_edges: Optional[list[Edge]]  # structure kind only
    forward: DgnForward                  # corrupted visual embeddings


def structure_intervene(edges: list[Edge], rng: np.random.Generator) -> list[Edge]:
    """Permute the target multiset of a directed edge list.

    Sources stay in place. If the draw reproduces the original list while a
    different one exists, redraw (at most 16 times). Rewiring that creates
    a self-loop swaps targets with the next edge.
    """
    if not edges:
        return []
    e = len(edges)
    srcs = [ed[0] for ed in edges]
    tgts = [ed[1] for ed in edges]
    labels = [ed[2] for ed in edges]
    distinct = len(set(tgts)) >= 2
    new_tgts = tgts
    for _ in range(16):
        perm = rng.permutation(e)
        new_tgts = [tgts[int(p)] for p in perm]
        if new_tgts != tgts or not distinct:
            break
    new_tgts = list(new_tgts)
    for i in range(e):
        if new_tgts[i] == srcs[i]:
            j = (i + 1) % e
            new_tgts[i], new_tgts[j] = new_tgts[j], new_tgts[i]
    return [(srcs[i], new_tgts[i], labels[i]) for i in range(e)]


def _neighbor_lists(structure: GraphStructure) -> list[np.ndarray]:
    """Per-node source arrays; recv is sorted so slices are contiguous."""
    out = []
    for i in range(structure.node_count):
        lo = np.searchsorted(structure.recv, i, side="left")
        hi = np.searchsorted(structure.recv, i, side="right")
        out.append(structure.src[lo:hi])
    return out


def _replace_chunk(state: Tensor, k: int, new_rows: Tensor) -> Tensor:
    chunks = state.data.shape[0]
    parts = []
    if k > 0:
        parts.append(nm.take(state, np.arange(k), axis=0))
    parts.append(new_rows)
    if k + 1 < chunks:
        parts.append(nm.take(state, np.arange(k + 1, chunks), axis=0))
    return nm.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def feature_intervene_neighbor(state: Tensor, structure: GraphStructure, k: int,
                               rng: np.random.Generator) -> Tensor:
    """Swap chunk k of every node for the same chunk of a random neighbor.

    Donors are drawn from the pre-intervention state and applied at once;
    isolated nodes keep their own chunk.
    """
    if not (0 <= k < state.data.shape[0]):
        raise ContractError(f"chunk index {k} out of range")
    neighbors = _neighbor_lists(structure)
    donors = np.arange(structure.node_count, dtype=np.int64)
    for i, nbrs in enumerate(neighbors):
        if nbrs.size:
            donors[i] = nbrs[int(rng.integers(nbrs.size))]
    new_rows = nm.take(nm.take(state, donors, axis=1), np.array([k]), axis=0)
    return _replace_chunk(state, k, new_rows)


def feature_intervene_noise(state: Tensor, k: int, rng: np.random.Generator) -> Tensor:
    """Overwrite chunk k of every node with unit-normalized relu'd noise."""
    if not (0 <= k < state.data.shape[0]):
        raise ContractError(f"chunk index {k} out of range")
    n, dk = state.data.shape[1], state.data.shape[2]
    noise = nm.constant(rng.standard_normal((1, n, dk)))
    new_rows = nm.l2_normalize(nm.relu(noise))
    return _replace_chunk(state, k, new_rows)


def intervene(graph: SceneGraph, features, params: DgnParams, delta: float,
              rng: np.random.Generator, *, training: bool = False,
              eps: float = 1e-12, dropout_rate: float = 0.5,
              structure: GraphStructure | None = None,
              kind: str | None = None, chunk_index: int | None = None) -> InterventionOutcome:
    """Draw and apply one intervention, then run the corrupted forward pass.

    With kind=None the branch is drawn as: structure when U[0,1) >= delta,
    otherwise one of the two feature kinds with equal probability. Explicit
    kind/chunk_index skip the corresponding draws (the trainer shares one
    draw across a batch).
    """
    if not (0.0 <= delta <= 1.0):
        raise ContractError(f"delta must lie in [0, 1], got {delta}")
    if kind is None:
        cond = rng.random()
        if cond >= delta:
            kind = KIND_STRUCTURE
        else:
            kind = KIND_FEATURE_NEIGHBOR if rng.random() < 0.5 else KIND_FEATURE_NOISE
    elif kind not in ALL_KINDS:
        raise ContractError(f"unknown intervention kind {kind!r}")

    if structure is None:
        structure = graph_structure(graph.node_count, graph.edges)

    if kind == KIND_STRUCTURE:
        rewired = structure_intervene(graph.edges, rng)
        fwd = dgn_forward(graph, features, params, training=training, rng=rng,
                          eps=eps, dropout_rate=dropout_rate,
                          structure=graph_structure(graph.node_count, rewired))
        return InterventionOutcome(kind, None, rewired, fwd)

    if chunk_index is None:
        chunk_index = int(rng.integers(params.chunks))
    elif not (0 <= chunk_index < params.chunks):
        raise ContractError(f"chunk index {chunk_index} out of range")
    layer0 = chunk_project(features, params, eps)
    if kind == KIND_FEATURE_NEIGHBOR:
        corrupted = feature_intervene_neighbor(layer0, structure, chunk_index, rng)
    else:
        corrupted = feature_intervene_noise(layer0, chunk_index, rng)
    fwd = dgn_forward_from_layer0(structure, corrupted, params, training=training,
                                  rng=rng, dropout_rate=dropout_rate)
    return InterventionOutcome(kind, chunk_index, None, fwd)
