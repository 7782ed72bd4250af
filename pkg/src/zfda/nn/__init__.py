from zfda.nn.layers import (
    CONV2D,
    CONV_T2D,
    DENSE,
    RELU,
    RESHAPE,
    SIGMOID,
    LayerSpec,
    ShapeError,
)
from zfda.nn.model import (
    Autoencoder,
    NonFiniteError,
    Trace,
    backward,
    build_autoencoder,
    decode,
    encode,
    forward,
    loss_and_grads,
    loss_mse,
    mse_grad,
    sgd_step,
)
from zfda.nn.train import DivergenceError, evaluate_mse, fit, pretrain

__all__ = [
    "CONV2D", "CONV_T2D", "DENSE", "RELU", "RESHAPE", "SIGMOID",
    "LayerSpec", "ShapeError", "Autoencoder", "NonFiniteError", "Trace",
    "backward", "build_autoencoder", "decode", "encode", "forward",
    "loss_and_grads", "loss_mse", "mse_grad", "sgd_step",
    "DivergenceError", "evaluate_mse", "fit", "pretrain",
]
