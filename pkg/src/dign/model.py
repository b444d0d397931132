"""End-to-end grounding model: two graph towers, fusion, and the loss.

One forward over a grounding instance produces, per phrase, similarity
scores against every clean proposal and (during training) against every
proposal of one intervention-corrupted visual pass; the corrupted columns
only ever serve as negatives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .dgn import DgnForward, DgnParams, GraphStructure, dgn_forward, init_dgn_params, structure_of
from .errors import ConfigError
from .fusion import FusionBlockParams, fuse, init_fusion_block, similarity_matrix
from .graphdata import GroundingInstance, iou, match_positive
from .intervention import (FEATURE_KINDS, KIND_FEATURE_NEIGHBOR, KIND_FEATURE_NOISE,
                           KIND_STRUCTURE, InterventionOutcome, intervene)
from .losses import LossBreakdown, independence_loss, infonce_loss, total_loss
from .numerics import Tensor


@dataclass
class GroundingModel:
    chunks: int
    layers: int
    d_out: int
    heads: int
    use_fusion: bool
    phrase_dgn: DgnParams
    visual_dgn: DgnParams
    text_block: Optional[FusionBlockParams]
    visual_block: Optional[FusionBlockParams]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.phrase_dgn.named_parameters("phrase")
        out += self.visual_dgn.named_parameters("visual")
        if self.use_fusion:
            out += self.text_block.named_parameters("fusion_text")
            out += self.visual_block.named_parameters("fusion_visual")
        return out


def init_model(d_t: int, d_v: int, d_out: int, chunks: int, layers: int, heads: int,
               d_ff: int, use_fusion: bool, rng: np.random.Generator) -> GroundingModel:
    phrase = init_dgn_params(chunks, layers, d_t, d_out, rng)
    visual = init_dgn_params(chunks, layers, d_v, d_out, rng)
    text_block = visual_block = None
    if use_fusion:
        text_block = init_fusion_block(d_out, heads, d_ff, rng)
        visual_block = init_fusion_block(d_out, heads, d_ff, rng)
    return GroundingModel(chunks, layers, d_out, heads, use_fusion,
                          phrase, visual, text_block, visual_block)


@dataclass
class PreparedInstance:
    """Instance plus everything trainers reuse across epochs."""

    instance: GroundingInstance
    phrase_features: Tensor
    visual_features: Tensor
    phrase_structure: GraphStructure
    visual_structure: GraphStructure
    positives: np.ndarray       # (n,) best-IoU proposal per phrase
    usable: bool                # False when some phrase has zero best IoU
    reachable: np.ndarray       # (n,) best achievable IoU per phrase


def prepare(instance: GroundingInstance) -> PreparedInstance:
    pos = np.zeros(instance.n, dtype=np.int64)
    reach = np.zeros(instance.n)
    usable = True
    for i, gt in enumerate(instance.ground_truth):
        m = match_positive(instance.proposals, gt)
        pos[i] = m.index
        reach[i] = m.iou
        usable = usable and m.matched
    return PreparedInstance(
        instance,
        nm.constant(instance.phrase_graph.features),
        nm.constant(instance.visual_graph.features),
        structure_of(instance.phrase_graph),
        structure_of(instance.visual_graph),
        pos, usable, reach,
    )


def draw_intervention(mode: str, delta: float, chunks: int,
                      rng: np.random.Generator) -> tuple[Optional[str], Optional[int]]:
    """One intervention decision: (kind, chunk index) or (None, None)."""
    if mode == "none":
        return None, None
    if mode == "structure":
        kind = KIND_STRUCTURE
    elif mode == "feature":
        kind = KIND_FEATURE_NEIGHBOR if rng.random() < 0.5 else KIND_FEATURE_NOISE
    elif mode == "both":
        if rng.random() >= delta:
            kind = KIND_STRUCTURE
        else:
            kind = KIND_FEATURE_NEIGHBOR if rng.random() < 0.5 else KIND_FEATURE_NOISE
    else:
        raise ConfigError(f"unknown intervention mode {mode!r}")
    chunk = int(rng.integers(chunks)) if kind in FEATURE_KINDS else None
    return kind, chunk


@dataclass
class InstanceForward:
    breakdown: LossBreakdown
    clean_scores: np.ndarray            # (n, m)
    phrase_fwd: DgnForward
    visual_fwd: DgnForward
    outcome: Optional[InterventionOutcome]


def instance_forward(model: GroundingModel, prep: PreparedInstance, *,
                     training: bool = False, rng: np.random.Generator | None = None,
                     tau: float = 0.2, delta: float = 0.5, eps: float = 1e-12,
                     dropout: float = 0.5, dropout_layer0: bool = False,
                     fusion_dropout: float = 0.1, independence_kind: str = "pearson",
                     intervention_kind: Optional[str] = None,
                     intervention_chunk: Optional[int] = None) -> InstanceForward:
    """Forward one instance and assemble the three-part objective."""
    inst = prep.instance
    phrase_fwd = dgn_forward(inst.phrase_graph, prep.phrase_features, model.phrase_dgn,
                             training=training, rng=rng, eps=eps, dropout_rate=dropout,
                             dropout_layer0=dropout_layer0, structure=prep.phrase_structure)
    visual_fwd = dgn_forward(inst.visual_graph, prep.visual_features, model.visual_dgn,
                             training=training, rng=rng, eps=eps, dropout_rate=dropout,
                             dropout_layer0=dropout_layer0, structure=prep.visual_structure)

    if model.use_fusion:
        fused = fuse(phrase_fwd.embedding, visual_fwd.embedding, model.text_block,
                     model.visual_block, training=training, rng=rng,
                     dropout_rate=fusion_dropout, eps=eps)
        scores_clean = similarity_matrix(fused.text, fused.visual)
    else:
        scores_clean = similarity_matrix(phrase_fwd.embedding, visual_fwd.embedding)

    outcome = None
    scores = scores_clean
    if intervention_kind is not None:
        outcome = intervene(inst.visual_graph, prep.visual_features, model.visual_dgn,
                            delta, rng, training=training, eps=eps, dropout_rate=dropout,
                            structure=prep.visual_structure, kind=intervention_kind,
                            chunk_index=intervention_chunk)
        if model.use_fusion:
            fused_neg = fuse(phrase_fwd.embedding, outcome.forward.embedding,
                             model.text_block, model.visual_block, training=training,
                             rng=rng, dropout_rate=fusion_dropout, eps=eps)
            scores_neg = similarity_matrix(fused_neg.text, fused_neg.visual)
        else:
            scores_neg = similarity_matrix(phrase_fwd.embedding, outcome.forward.embedding)
        scores = nm.concat([scores_clean, scores_neg], axis=1)

    ind_t = independence_loss(phrase_fwd.embedding, model.chunks, independence_kind)
    ind_v = independence_loss(visual_fwd.embedding, model.chunks, independence_kind)
    ground = infonce_loss(scores, prep.positives, tau)
    breakdown = total_loss(ind_t, ind_v, ground)
    return InstanceForward(breakdown, scores_clean.data, phrase_fwd, visual_fwd, outcome)


def predicted_proposals(clean_scores: np.ndarray) -> np.ndarray:
    """argmax proposal per phrase; numpy breaks ties toward lower index."""
    return np.argmax(clean_scores, axis=1)


def grounding_correct(prep: PreparedInstance, predictions: np.ndarray) -> list[bool]:
    """IoU@0.5 correctness of each phrase's predicted box."""
    inst = prep.instance
    return [
        iou(inst.proposals[int(predictions[i])], inst.ground_truth[i]) >= 0.5
        for i in range(inst.n)
    ]
