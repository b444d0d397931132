"""Motif-disentangled graph grounding with interventional training."""

from .dgn import (DgnParams, chunk_project, dgn_forward, disentangle_layer,
                  init_dgn_params, routing_weights)
from .errors import (ConfigError, ContractError, DatasetError, DignError, ShapeError,
                     TrainingError)
from .fusion import (FusionBlockParams, fuse, init_fusion_block,
                     multihead_cross_attention, similarity_matrix)
from .graphdata import (BoundingBox, GroundingInstance, SceneGraph, SyntheticConfig,
                        generate_scene, iou, load_dataset, load_scene, match_positive,
                        merge_gt_boxes, save_dataset, save_scene)
from .intervention import (InterventionOutcome, feature_intervene_neighbor,
                           feature_intervene_noise, intervene, structure_intervene)
from .losses import (LossBreakdown, correlation_coeff, independence_loss, infonce_loss,
                     total_loss)
from .model import GroundingModel, init_model, instance_forward, prepare
from .numerics import (Tensor, backward, finite_diff_check, finite_diff_report,
                       l2_normalize, matmul, relu, softmax)
from .trainer import (Checkpoint, EvalReport, TrainConfig, ablate, evaluate, explain,
                      gradcheck, k_sweep, load_checkpoint, save_checkpoint, sgd_step,
                      train)

__version__ = "0.1.0"
