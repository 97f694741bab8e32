from .archs import miniresnet
from .checkpoint import (
    load_checkpoint,
    net_from_tensors,
    net_to_tensors,
    read_file,
    save_checkpoint,
    write_file,
)
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    GaussianHead,
    GlobalAvgPool,
    Layer,
    Normalize,
    Param,
    ReLU,
    Residual,
    layer_from_descriptor,
)
from .network import HeadScore, Network, backward_params

__all__ = [
    "BatchNorm",
    "Conv2d",
    "Dense",
    "GaussianHead",
    "GlobalAvgPool",
    "HeadScore",
    "Layer",
    "Network",
    "Normalize",
    "Param",
    "ReLU",
    "Residual",
    "backward_params",
    "layer_from_descriptor",
    "load_checkpoint",
    "miniresnet",
    "net_from_tensors",
    "net_to_tensors",
    "read_file",
    "save_checkpoint",
    "write_file",
]
