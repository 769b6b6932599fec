"""Token-gated Hadamard low-rank adaptation on a numpy autodiff core."""

from .adapters import AdaptedLinear, AdapterKind, count_params, init_adapter
from .autodiff import Tape, Tensor, backward
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .model import ModelConfig, TinyTransformer, build_model, collect_gates, forward_logits
from .trainer import RunConfig, evaluate, finetune, pretrain

__version__ = "0.1.0"
