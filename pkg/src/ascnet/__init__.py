"""Appearance and speed consistency pretraining for video encoders, in numpy.

Modules: ``autodiff`` (tape autodiff), ``synthcorpus`` (procedural videos and
augmentation), ``model`` (TinyC3D and heads), ``objectives`` (losses and
memory bank), ``pretrain`` (LARS and the training loop), ``evaluate``
(retrieval, probes, fine-tuning) and ``cli``.
"""
from .errors import AscnetError
from .model import EncoderConfig, ModelParams, init_params
from .objectives import MemoryBank, acp_loss, bank_insert, combined_loss, retrieve_similar, scp_loss, sp_loss
from .pretrain import TrainConfig, Trainer, cosine_lr, lars_step, scaled_lr, train
from .synthcorpus import AugmentConfig, CorpusConfig, generate_corpus

__version__ = "0.1.0"

__all__ = [
    "AscnetError", "AugmentConfig", "CorpusConfig", "EncoderConfig", "MemoryBank", "ModelParams", "TrainConfig",
    "Trainer", "acp_loss", "bank_insert", "combined_loss", "cosine_lr", "generate_corpus", "init_params",
    "lars_step", "retrieve_similar", "scaled_lr", "scp_loss", "sp_loss", "train",
]
