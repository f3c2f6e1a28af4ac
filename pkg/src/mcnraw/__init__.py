"""Low-light raw enhancement with multi-granulation cooperative networks.

Submodules: ``tensor`` (autograd), ``raw`` (CFA handling and nonlinear
amplification), ``mcn`` (the networks), ``losses`` (loss and metrics),
``train``, ``synth`` (synthetic data) and ``cli``.
"""
from .kernels import BACKEND
from .losses import LossWeights, MetricsReport, multi_granulation_loss, psnr, ssim
from .mcn import FusionSpec, McnConfig, McnModel, count_params, mcn_forward
from .raw import CFA, IlluminationParams, RawFrame, illumination_map, prepare_input, rimef_gain
from .tensor import ContractError, DimensionError, NumericError, Tensor, backward, no_grad
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CFA", "ContractError", "DimensionError", "FusionSpec", "IlluminationParams", "LossWeights",
    "McnConfig", "McnModel", "MetricsReport", "NumericError", "RawFrame", "Tensor", "TrainConfig",
    "backward", "count_params", "illumination_map", "mcn_forward", "multi_granulation_loss", "no_grad",
    "prepare_input", "psnr", "rimef_gain", "ssim", "train_loop",
]
