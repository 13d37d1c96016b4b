"""The two trainable networks: encoder-decoder backbone and implicit MLP.

Backbone layer list for ``levels`` L and start channels N_s (channel count
doubles per level, c_i = N_s * 2**i):

    enc0        conv k, 2 -> c_0, stride 1, LeakyReLU
    down_i      conv k, c_{i-1} -> c_i, stride 2, LeakyReLU   (i = 1..L-1)
    enc_i       conv k, c_i -> c_i, stride 1, LeakyReLU       (i = 1..L-1)
    dec_i       upsample x2, concat skip enc_i, conv k,
                c_{i+1}+c_i -> c_i, stride 1, LeakyReLU       (i = L-2..0)
    head        conv 1, c_0 -> C2, linear output

The implicit MLP maps an embedding row through widths
C1 -> C_phi -> 2*C_phi -> C2*d with ReLU between the three linear layers.
Weights are Kaiming-uniform; displacement-producing layers (the MLP's last
layer, and the uniform filter elsewhere) start at zero so a fresh model is
the identity map.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import tensorio
from ..errors import ScfregError
from .engine import Node, Parameter, as_node, concat, leaky_relu, linear, relu
from .ops import conv_nd, upsample_nearest


@dataclass
class BackboneConfig:
    rank: int = 2
    start_channels: int = 16
    levels: int = 3
    kernel_size: int = 3
    out_channels: int = 16
    slope: float = 0.2

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ScfregError(f"rank must be 2 or 3, got {self.rank}")
        if self.start_channels < 1 or self.levels < 1 or self.out_channels < 1:
            raise ScfregError("start_channels, levels and out_channels must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ScfregError(f"kernel_size must be odd, got {self.kernel_size}")

    def channels(self, level: int) -> int:
        return self.start_channels * 2**level

    def to_dict(self) -> dict:
        return {
            "rank": self.rank, "start_channels": self.start_channels,
            "levels": self.levels, "kernel_size": self.kernel_size,
            "out_channels": self.out_channels, "slope": self.slope,
        }


@dataclass
class ImplicitMlpConfig:
    in_dim: int
    hidden: int = 256
    out_dim: int = 32

    def __post_init__(self):
        if min(self.in_dim, self.hidden, self.out_dim) < 1:
            raise ScfregError("MLP widths must be >= 1")

    def to_dict(self) -> dict:
        return {"in_dim": self.in_dim, "hidden": self.hidden, "out_dim": self.out_dim}


def backbone_layer_specs(cfg: BackboneConfig):
    """(name, c_in, c_out, kernel, stride) for every conv, in forward order.

    This list is the single source of truth shared by initialization, the
    forward pass and the complexity report.
    """
    specs = [("enc0", 2, cfg.channels(0), cfg.kernel_size, 1)]
    for i in range(1, cfg.levels):
        specs.append((f"down{i}", cfg.channels(i - 1), cfg.channels(i), cfg.kernel_size, 2))
        specs.append((f"enc{i}", cfg.channels(i), cfg.channels(i), cfg.kernel_size, 1))
    for i in range(cfg.levels - 2, -1, -1):
        specs.append(
            (f"dec{i}", cfg.channels(i + 1) + cfg.channels(i), cfg.channels(i), cfg.kernel_size, 1)
        )
    specs.append(("head", cfg.channels(0), cfg.out_channels, 1, 1))
    return specs


def mlp_layer_specs(cfg: ImplicitMlpConfig):
    return [
        ("fc0", cfg.in_dim, cfg.hidden),
        ("fc1", cfg.hidden, 2 * cfg.hidden),
        ("fc2", 2 * cfg.hidden, cfg.out_dim),
    ]


def _kaiming_uniform(rng, shape, fan_in, slope):
    gain = np.sqrt(2.0 / (1.0 + slope * slope))
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_backbone(cfg: BackboneConfig, rng) -> dict:
    """Seeded parameters for every backbone conv; biases zero."""
    params = {}
    for name, c_in, c_out, k, _stride in backbone_layer_specs(cfg):
        shape = (c_out, c_in) + (k,) * cfg.rank
        fan_in = c_in * k**cfg.rank
        params[f"backbone.{name}.w"] = Parameter(
            _kaiming_uniform(rng, shape, fan_in, cfg.slope), f"backbone.{name}.w"
        )
        params[f"backbone.{name}.b"] = Parameter(np.zeros(c_out), f"backbone.{name}.b")
    return params


def init_mlp(cfg: ImplicitMlpConfig, rng) -> dict:
    """Seeded MLP parameters; the final (displacement-producing) layer is
    zero so the initial filters, and hence the initial field, vanish."""
    params = {}
    specs = mlp_layer_specs(cfg)
    for idx, (name, c_in, c_out) in enumerate(specs):
        last = idx == len(specs) - 1
        if last:
            w = np.zeros((c_out, c_in))
        else:
            w = _kaiming_uniform(rng, (c_out, c_in), c_in, 0.0)
        params[f"mlp.{name}.w"] = Parameter(w, f"mlp.{name}.w")
        params[f"mlp.{name}.b"] = Parameter(np.zeros(c_out), f"mlp.{name}.b")
    return params


def backbone_forward(params: dict, cfg: BackboneConfig, im_m, im_f) -> Node:
    """Feature map [C2, S...] from the concatenated image pair.

    Spatial extents must be divisible by 2**(levels-1) so the decoder
    mirrors the encoder exactly.
    """
    im_m = np.asarray(im_m, dtype=np.float64)
    im_f = np.asarray(im_f, dtype=np.float64)
    if im_m.shape != im_f.shape:
        raise ScfregError(f"image shapes differ: {im_m.shape} vs {im_f.shape}")
    if im_m.ndim != cfg.rank:
        raise ScfregError(f"expected rank-{cfg.rank} images, got {im_m.ndim}-D")
    divisor = 2 ** (cfg.levels - 1)
    if any(s % divisor for s in im_m.shape):
        raise ScfregError(
            f"extents {im_m.shape} not divisible by 2**(levels-1) = {divisor}"
        )

    def conv(name, x, stride=1):
        return conv_nd(x, params[f"backbone.{name}.w"], params[f"backbone.{name}.b"], stride)

    x = as_node(np.stack([im_m, im_f]))
    skips = []
    x = leaky_relu(conv("enc0", x), cfg.slope)
    skips.append(x)
    for i in range(1, cfg.levels):
        x = leaky_relu(conv(f"down{i}", x, stride=2), cfg.slope)
        x = leaky_relu(conv(f"enc{i}", x), cfg.slope)
        skips.append(x)
    for i in range(cfg.levels - 2, -1, -1):
        x = upsample_nearest(x, 2)
        x = concat([x, skips[i]], axis=0)
        x = leaky_relu(conv(f"dec{i}", x), cfg.slope)
    return conv("head", x)


def implicit_mlp_forward(params: dict, cfg: ImplicitMlpConfig, rows) -> Node:
    """Filter weights [M, out_dim] for M embedding rows [M, in_dim].

    Evaluated once per distinct region row; voxel-level filters are gathered
    from the result afterwards rather than re-running the MLP per voxel.
    """
    rows = as_node(rows)
    if rows.data.ndim != 2 or rows.data.shape[1] != cfg.in_dim:
        raise ScfregError(f"expected rows [M, {cfg.in_dim}], got {rows.data.shape}")
    x = relu(linear(rows, params["mlp.fc0.w"], params["mlp.fc0.b"]))
    x = relu(linear(x, params["mlp.fc1.w"], params["mlp.fc1.b"]))
    return linear(x, params["mlp.fc2.w"], params["mlp.fc2.b"])


def parameter_count(params: dict) -> int:
    return int(sum(p.data.size for p in params.values()))


def save_parameters(ckpt_dir, params: dict) -> None:
    """One .scft file per parameter; bit-exact (f64) on reload."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for name, p in params.items():
        tensorio.write_tensor(ckpt_dir / f"{name}.scft", p.data)


def load_parameters(ckpt_dir, names) -> dict:
    ckpt_dir = Path(ckpt_dir)
    params = {}
    for name in names:
        value = np.array(tensorio.read_tensor(ckpt_dir / f"{name}.scft"))
        params[name] = Parameter(value, name)
    return params


def save_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
