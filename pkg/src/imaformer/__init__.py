"""Intra-task mutual attention ViT for few-shot classification, in numpy."""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check
from .vit import ModelConfig, ModelParams, TokenSequence, encode_stage1, init_params
from .mutual_attention import classify, episode_forward, episode_scores, swap_tokens
from .episode import Dataset, Episode, SyntheticSpec, generate_synthetic, sample_episode
from .train import FineTunePolicy, TrainConfig, meta_train
from .evaluation import EvalReport, evaluate, pca_project

__all__ = [
    "Tensor", "backward", "grad_check",
    "ModelConfig", "ModelParams", "TokenSequence", "encode_stage1", "init_params",
    "classify", "episode_forward", "episode_scores", "swap_tokens",
    "Dataset", "Episode", "SyntheticSpec", "generate_synthetic", "sample_episode",
    "FineTunePolicy", "TrainConfig", "meta_train",
    "EvalReport", "evaluate", "pca_project",
]
