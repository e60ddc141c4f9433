"""Two-branch spatio-temporal video classifier with a from-scratch numpy autodiff core."""
from .model import ABLATIONS, PRESETS, MGSTModel, ModelConfig, build, forward, load_config
from .tensor import Parameter, Tensor, backward, no_grad

__all__ = ["ABLATIONS", "PRESETS", "MGSTModel", "ModelConfig", "Parameter", "Tensor", "backward", "build",
           "forward", "load_config", "no_grad"]
__version__ = "0.1.0"
