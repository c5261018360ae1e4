"""Small numpy neural-network engine with hand-written backward passes."""

from .checkpoint import (
    checkpoint_bytes,
    load_checkpoint,
    params_from_bytes,
    read_tensor_dump,
    save_checkpoint,
    tensor_dump_bytes,
)
from .layers import (
    LayerSpec,
    adaptive_avgpool,
    avgpool,
    batchnorm,
    conv,
    flatten,
    fully_connected,
    hardtanh,
    layer_backward,
    layer_forward,
    relu,
)
from .loss import bce_loss, bce_with_logits, sigmoid
from .model import ForwardCache, ModelParams, adam_step, backward, forward, init_params

__all__ = [
    "LayerSpec", "ModelParams", "ForwardCache",
    "conv", "batchnorm", "relu", "hardtanh", "avgpool", "adaptive_avgpool", "flatten", "fully_connected",
    "layer_forward", "layer_backward",
    "forward", "backward", "adam_step", "init_params",
    "bce_loss", "bce_with_logits", "sigmoid",
    "checkpoint_bytes", "params_from_bytes", "save_checkpoint", "load_checkpoint",
    "tensor_dump_bytes", "read_tensor_dump",
]
