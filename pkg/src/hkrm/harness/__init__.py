"""Desk-scale synthetic detection harness."""

from hkrm.harness.evaluation import Metrics, branch_embeddings, cluster_cohesion, evaluate
from hkrm.harness.model import ABLATIONS, HkrmModel, ModelConfig, backward_model, forward_model
from hkrm.harness.training import TrainConfig, TrainingDiverged, build_priors, train
from hkrm.harness.world import (
    SyntheticScene,
    WorldConfig,
    WorldSpec,
    generate_annotations,
    generate_scene,
    generate_scenes,
    generate_world,
    scene_annotations,
)

__all__ = [
    "ABLATIONS",
    "HkrmModel",
    "Metrics",
    "ModelConfig",
    "SyntheticScene",
    "TrainConfig",
    "TrainingDiverged",
    "WorldConfig",
    "WorldSpec",
    "backward_model",
    "branch_embeddings",
    "build_priors",
    "cluster_cohesion",
    "evaluate",
    "forward_model",
    "generate_annotations",
    "generate_scene",
    "generate_scenes",
    "generate_world",
    "scene_annotations",
    "train",
]
