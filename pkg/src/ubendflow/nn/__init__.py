"""From-scratch convolutional encoder-decoder network on numpy."""
from .model import LayerSpec, Model, ModelConfig, NNError, default_config, masked_rmse, tiny_config
from .ops import conv2d, deconv2d, dense, relu
from .optim import AdamState, adam_step
from .train import (TrainConfig, evaluate, load_checkpoint, predict_sample,
                    save_checkpoint)
from .train import train as train_model

__all__ = [
    "AdamState", "LayerSpec", "Model", "ModelConfig", "NNError", "TrainConfig",
    "adam_step", "conv2d", "deconv2d", "default_config", "dense", "evaluate",
    "load_checkpoint", "masked_rmse", "predict_sample", "relu", "save_checkpoint",
    "tiny_config", "train_model",
]
