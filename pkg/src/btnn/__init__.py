"""Binary/ternary weight quantization with residual refinement.

Quantizers and their error diagnostics live in :mod:`btnn.quant`, the
transition-regularization loss in :mod:`btnn.regularize`, bit-packed storage
and multiplication-free kernels in :mod:`btnn.packing`, the numpy layer /
training stack in :mod:`btnn.layers`, :mod:`btnn.net` and :mod:`btnn.train`,
dataset utilities in :mod:`btnn.data`, and the experiment CLI in
:mod:`btnn.cli`.
"""

from .quant import (
    Granularity,
    QuantDiagnostics,
    QuantKind,
    QuantScheme,
    QuantTensor,
    alpha_opt,
    binarize,
    binary_residual_pair,
    bt_quantize,
    dequantize,
    diagnostics,
    effective_codes,
    quantize,
    residual,
    ternarize,
)
from .regularize import (
    TransitionRegConfig,
    corrupt,
    mean_distance_to_transition,
    transition_penalty,
)
from .packing import (
    PackedPlane,
    PackedQuantTensor,
    pack,
    packed_conv2d,
    packed_dot,
    packed_matmul,
    unpack,
)
from .net import NetSpec, LayerSpec, Network, Task, build_espcn, build_vgg6
from .train import Adam, TrainSettings, TrainingDiverged, train

__all__ = [
    "Adam",
    "Granularity",
    "LayerSpec",
    "NetSpec",
    "Network",
    "PackedPlane",
    "PackedQuantTensor",
    "QuantDiagnostics",
    "QuantKind",
    "QuantScheme",
    "QuantTensor",
    "Task",
    "TrainSettings",
    "TrainingDiverged",
    "TransitionRegConfig",
    "alpha_opt",
    "binarize",
    "binary_residual_pair",
    "bt_quantize",
    "build_espcn",
    "build_vgg6",
    "corrupt",
    "dequantize",
    "diagnostics",
    "effective_codes",
    "mean_distance_to_transition",
    "pack",
    "packed_conv2d",
    "packed_dot",
    "packed_matmul",
    "quantize",
    "residual",
    "ternarize",
    "train",
    "transition_penalty",
    "unpack",
]
