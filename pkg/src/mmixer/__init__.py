"""Multi-modal sequence classification with gated cross-modality fusion.

A self-contained numpy stack: a small reverse-mode autodiff engine, a
recurrent cell that mixes each modality's frames with content extracted
from the other modalities, a slot-based feature bank for fusion, synthetic
complementary-modality tasks, and a CLI for training, evaluation, gradient
checking, and ablation sweeps.
"""

from .network import (
    EpisodeBatch,
    ForwardTrace,
    MMixer,
    ModelConfig,
    evaluate,
    fit_stream_probes,
    make_optimizer,
    stream_probe_accuracy,
    train_epoch,
)
from .optim import Adam
from .synthdata import TaskSpec, generate
from .tensor import Tensor, no_grad
from .util import ConfigError, NumericError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "Adam", "ConfigError", "EpisodeBatch", "ForwardTrace", "MMixer",
    "ModelConfig", "NumericError", "ShapeError", "TaskSpec", "Tensor",
    "evaluate", "fit_stream_probes", "generate", "make_optimizer",
    "no_grad", "stream_probe_accuracy", "train_epoch", "__version__",
]
