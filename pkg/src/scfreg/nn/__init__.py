"""Reverse-mode automatic differentiation and the trainable networks."""

from .engine import (  # noqa: F401
    Node,
    Parameter,
    add,
    as_node,
    backward,
    concat,
    div,
    gather_rows,
    leaky_relu,
    linear,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    sub,
    sum_all,
    sum_axes,
)
from .ops import (  # noqa: F401
    compose_fields,
    conv_nd,
    fwd_diff_penalty,
    integrate_velocity,
    scf_combine,
    upsample_nearest,
    warp_channels,
)
from .networks import (  # noqa: F401
    BackboneConfig,
    ImplicitMlpConfig,
    backbone_forward,
    backbone_layer_specs,
    implicit_mlp_forward,
    init_backbone,
    init_mlp,
    load_parameters,
    mlp_layer_specs,
    parameter_count,
    save_parameters,
)
