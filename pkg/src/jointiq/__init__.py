"""Learned image codec: transform coding with a hyperprior, an
autoregressive Gaussian-mixture entropy model with global context, a
bit-exact range-coded container, and a residual-dense enhancement stage.
"""

from .codec import Header, RdPoint, decode_image, encode_image
from .enhancement import GRDN_FINAL, GRDN_LIGHT, GrdnConfig
from .errors import ConfigError, DataError, NumericError, ShapeError
from .imageio import read_image, write_image
from .metrics import bd_rate, ms_ssim, psnr, rd_eval
from .model import LAMBDA_TABLE, CodecModel, ModelConfig
from .trainer import (Adam, PatchDataset, TrainConfig,
                      joint_training_procedure, lr_schedule, parse_config,
                      rd_objective, total_loss, train_step)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CodecModel", "ConfigError", "DataError", "GRDN_FINAL",
    "GRDN_LIGHT", "GrdnConfig", "Header", "LAMBDA_TABLE", "ModelConfig",
    "NumericError", "PatchDataset", "RdPoint", "ShapeError", "TrainConfig",
    "bd_rate", "decode_image", "encode_image", "joint_training_procedure",
    "lr_schedule", "ms_ssim", "parse_config", "psnr", "rd_eval", "rd_objective",
    "read_image", "total_loss", "train_step", "write_image",
]
