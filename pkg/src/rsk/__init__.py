"""Recall@k surrogate loss, similarity mixup and large-batch training for metric learning."""

from .evaluation import evaluate_split
from .loss import LossConfig, rs_at_k_batch
from .model import Adam, Embedder
from .sampler import SamplerConfig
from .simix import enumerate_virtuals, expand_batch
from .train import TrainConfig, train, train_step_multistage

__version__ = "0.1.0"
