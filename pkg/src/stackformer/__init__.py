"""Transformer with a differentiable stack-attention sublayer, on plain numpy."""

import os as _os

# STACKFORMER_THREADS caps BLAS workers; it only takes effect if numpy has
# not been imported yet, so set it in the environment before starting Python
if _os.environ.get("STACKFORMER_THREADS", "").isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["STACKFORMER_THREADS"])

from .model import ModelConfig, StackTransformer, Vocabulary
from .stack import HardStack, StackOp, check_theorem1, check_theorem2
from .tasks import TaskInstance, get_task, oracle, score

__version__ = "0.1.0"

__all__ = [
    "HardStack",
    "ModelConfig",
    "StackOp",
    "StackTransformer",
    "TaskInstance",
    "Vocabulary",
    "check_theorem1",
    "check_theorem2",
    "get_task",
    "oracle",
    "score",
]
