"""Planground package."""

from .dataset import Dataset, generate_splits, load_dataset, write_dataset
from .encoding import encode_expression, encode_scene, encode_spatial, synth_visual_features
from .exceptions import PlanError
from .model import AttentionTrace, forward, forward_ablation, score_instance
from .params import ModelDims, PlanParams, RunContext
from .shapeworld import (
    GenerationConfig,
    GroundingInstance,
    Scene,
    SceneConfig,
    generate_expression,
    generate_instance,
    generate_scene,
    oracle_resolve,
)
from .trainer import AdamState, TrainConfig, adam_step, evaluate, train

__all__ = [
    "Dataset",
    "generate_splits",
    "load_dataset",
    "write_dataset",
    "encode_expression",
    "encode_scene",
    "encode_spatial",
    "synth_visual_features",
    "PlanError",
    "AttentionTrace",
    "forward",
    "forward_ablation",
    "score_instance",
    "ModelDims",
    "PlanParams",
    "RunContext",
    "GenerationConfig",
    "GroundingInstance",
    "Scene",
    "SceneConfig",
    "generate_expression",
    "generate_instance",
    "generate_scene",
    "oracle_resolve",
    "AdamState",
    "TrainConfig",
    "adam_step",
    "evaluate",
    "train",
]
