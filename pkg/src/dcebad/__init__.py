"""Dual-channel news headline classifier built on a small numpy autodiff engine."""

from .autograd import Tape, Tensor, grad_check
from .model import VARIANTS, Model, ModelConfig, build, forward, predict

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "grad_check", "VARIANTS", "Model", "ModelConfig", "build", "forward", "predict"]
