"""Sounding-object detection from audio, vision and narration embeddings.

A numpy implementation of object-aware contrastive alignment between
egocentric video patches, audio and narration, trained on a procedural
synthetic world, with the detection and action-discovery evaluations.
"""

from .encoders import EncoderParams, load_checkpoint, save_checkpoint
from .evaluation import auc_pr, auc_roc, discovery_eval, evaluate_detection, top1_accuracy
from .losses import BatchEmbeddings, ConsensusConfig, align_loss, consensus_loss, finetune_loss, refine_loss
from .synthworld import WorldSpec, generate_dataset, generate_world, read_dataset, write_dataset
from .trainer import TrainConfig, TrainingArrays, run_pipeline, run_stage

__version__ = "0.1.0"

__all__ = [
    "BatchEmbeddings",
    "ConsensusConfig",
    "EncoderParams",
    "TrainConfig",
    "TrainingArrays",
    "WorldSpec",
    "align_loss",
    "auc_pr",
    "auc_roc",
    "consensus_loss",
    "discovery_eval",
    "evaluate_detection",
    "finetune_loss",
    "generate_dataset",
    "generate_world",
    "load_checkpoint",
    "read_dataset",
    "refine_loss",
    "run_pipeline",
    "run_stage",
    "save_checkpoint",
    "top1_accuracy",
    "write_dataset",
]
