from evret.nn.tensor import Tensor, as_tensor, concat, cosine, no_grad, norm, pad_rows, vdot
from evret.nn.params import ParameterSet, add_layer_norm, add_linear
from evret.nn.layers import (
    ALL,
    AnchorMaskSpec,
    anchor_mask,
    add_attention_params,
    add_encoder_layer_params,
    conv1d_forward,
    cross_attention_forward,
    encoder_layer,
    index_distance,
    layer_norm,
    mhsa_forward,
)
from evret.nn.gradcheck import gradient_check
from evret.nn.optim import Adam, Sgd, make_optimizer
from evret.nn.checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "ALL",
    "Adam",
    "AnchorMaskSpec",
    "ParameterSet",
    "Sgd",
    "Tensor",
    "add_attention_params",
    "add_encoder_layer_params",
    "add_layer_norm",
    "add_linear",
    "anchor_mask",
    "as_tensor",
    "concat",
    "conv1d_forward",
    "cosine",
    "cross_attention_forward",
    "encoder_layer",
    "gradient_check",
    "index_distance",
    "layer_norm",
    "load_checkpoint",
    "make_optimizer",
    "mhsa_forward",
    "no_grad",
    "norm",
    "pad_rows",
    "save_checkpoint",
    "vdot",
]
