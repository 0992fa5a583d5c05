"""Minimal differentiable tensor engine (torch-backed)."""

from .layers import (
    GROUP_NORM_EPS,
    NonFiniteError,
    ShapeError,
    avgpool_down_2x,
    check_finite,
    conv2d,
    group_norm,
    linear,
    nearest_upsample_2x,
    sigmoid,
    silu,
    timestep_embedding,
)
from .params import (
    Adam,
    ParamStore,
    Rng,
    adam_step,
    backward,
    digest,
    load_into,
    named_arrays,
    pack_tensors,
    read_model_file,
    unpack_tensors,
    write_model_file,
)
from .gradcheck import check_gradients, numeric_grad, relative_error

__all__ = [
    "GROUP_NORM_EPS", "NonFiniteError", "ShapeError", "avgpool_down_2x", "check_finite",
    "conv2d", "group_norm", "linear", "nearest_upsample_2x", "sigmoid", "silu",
    "timestep_embedding", "Adam", "ParamStore", "Rng", "adam_step", "backward", "digest",
    "load_into", "named_arrays", "pack_tensors", "read_model_file", "unpack_tensors",
    "write_model_file", "check_gradients", "numeric_grad", "relative_error",
]
