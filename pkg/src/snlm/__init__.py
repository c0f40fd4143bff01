"""Self-normalizing neural language models.

Training objectives that avoid or regularize the softmax partition
function, an LSTM scorer trained by SGD over a minimal gradient tape,
self-normalization diagnostics, and brute-force verification of the
partition-function bounds on small synthetic distributions.
"""

__version__ = "0.1.0"

from .corpus import Vocabulary, BatchStream, CompletionItem, build_vocab, batchify, sample_noise, load_completions
from .model import LanguageModel, EncoderState, encode, score, log_partition
from .numerics import Tensor, Tape, grad_check, logsumexp, log_sigmoid
from .objectives import Method, ObjectiveConfig, LossValue, compute_loss
from .trainer import TrainConfig, TrainLog, train, sgd_step
from .diagnostics import DiagnosticsReport, ShiftedModel, eval_diagnostics, shift, entropy
from .theory import JointDistribution, ScoreMatrix, pce_matrix, nce_score, kl_gap

__all__ = [
    "Vocabulary", "BatchStream", "CompletionItem", "build_vocab", "batchify",
    "sample_noise", "load_completions",
    "LanguageModel", "EncoderState", "encode", "score", "log_partition",
    "Tensor", "Tape", "grad_check", "logsumexp", "log_sigmoid",
    "Method", "ObjectiveConfig", "LossValue", "compute_loss",
    "TrainConfig", "TrainLog", "train", "sgd_step",
    "DiagnosticsReport", "ShiftedModel", "eval_diagnostics", "shift", "entropy",
    "JointDistribution", "ScoreMatrix", "pce_matrix", "nce_score", "kl_gap",
]
