"""Multi-stage cross-scale attention for 3D lesion segmentation, on numpy.

A small reverse-mode autodiff engine (`tensor`), 3D convolution and
resampling primitives (`ops3d`), the attention module (`mscsa`), a compact
3D U-Net (`unet`), synthetic data and NIfTI I/O (`data`, `nifti`), training
schemes (`training`), and evaluation metrics (`metrics`).
"""

from .tensor import DimensionError, NumericError, Tensor, concat, gradcheck, no_grad, split
from .mscsa import MSCSAConfig
from .unet import ModelConfig
from .training import LossConfig, TrainConfig

__all__ = [
    "Tensor",
    "concat",
    "split",
    "no_grad",
    "gradcheck",
    "NumericError",
    "DimensionError",
    "MSCSAConfig",
    "ModelConfig",
    "LossConfig",
    "TrainConfig",
]

__version__ = "0.1.0"
