"""Dense float64 tensors, reverse-mode gradients, layers, Adam, checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    causal_self_attention,
    conv1d_temporal,
    group_norm,
    init_attention,
    init_conv1d,
    init_linear,
    init_norm,
    layer_norm,
    linear,
)
from .params import AdamConfig, ParamStore, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "AdamConfig", "ParamStore", "Tensor", "adam_step", "causal_self_attention",
    "conv1d_temporal", "group_norm", "init_attention", "init_conv1d", "init_linear",
    "init_norm", "layer_norm", "linear", "load_checkpoint", "no_grad", "save_checkpoint",
]
