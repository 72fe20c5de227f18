"""Dual-path convolutional image-text embedding with instance and ranking losses.

A numpy reverse-mode autograd core drives an image CNN and a text CNN whose
descriptors share one classifier. Training runs in two stages and retrieval
quality is measured with Recall@K, median rank and a distribution-overlap
indicator on a synthetic compositional corpus.
"""

from .autograd import Parameter, Tensor, backward, no_grad
from .data import Dataset, ImageTextGroup, generate_corpus, load_dataset, save_dataset
from .evaluation import FeatureBank, RetrievalReport, extract_features, indicator_s, retrieval_metrics
from .losses import LossWeights, combined_loss, instance_loss, ranking_loss, sample_negatives
from .model import DualPathModel, ModelConfig, load_checkpoint, save_checkpoint
from .text import Vocabulary, build_vocabulary, encode_sentence
from .train import TrainConfig, TrainLog, train_stage1, train_stage2

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DualPathModel", "FeatureBank", "ImageTextGroup", "LossWeights", "ModelConfig", "Parameter",
    "RetrievalReport", "Tensor", "TrainConfig", "TrainLog", "Vocabulary", "backward", "build_vocabulary",
    "combined_loss", "encode_sentence", "extract_features", "generate_corpus", "indicator_s", "instance_loss",
    "load_checkpoint", "load_dataset", "no_grad", "ranking_loss", "retrieval_metrics", "sample_negatives",
    "save_checkpoint", "save_dataset", "train_stage1", "train_stage2",
]
