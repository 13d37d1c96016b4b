"""Spatially covariant filter head and full-model assembly.

The model predicts one filter per anatomical region with the implicit MLP
applied to that region's embedding row, gathers filters per voxel through
the fixed-image segmentation, blends them with a trainable uniform filter
by the mask confidence p(x), and contracts against the backbone features:

    u(x) = (p(x) * W[region(x)] + (1 - p(x)) * w_r)^T F(x)

With hard masks (p = 1) the head is purely region-driven; with p = 0, or
with ``head="uniform"``, it degenerates to the translation-invariant w_r
filter. Filters are computed once per forward pass for the N rows of the
embedding matrix, never per voxel.
"""

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import nn, tensorio
from .embeddings import EmbeddingMatrix, VoxelConditioning, conditioning_from_mask
from .errors import ScfregError
from .field import as_mask
from .nn import engine

HEADS = ("textscf", "uniform")


@dataclass
class FilterBank:
    """Per-region filters W [N, C2, d] plus the uniform filter w_r."""

    W: np.ndarray
    w_r: engine.Parameter


@dataclass
class ScfModel:
    backbone_cfg: nn.BackboneConfig
    mlp_cfg: nn.ImplicitMlpConfig
    params: dict                      # name -> Parameter (backbone.*, mlp.*, w_r)
    embedding: EmbeddingMatrix
    head: str = "textscf"
    use_integration: bool = False
    integration_steps: int = 7
    seed: int = 0
    epoch: int = 0
    cached_filters: FilterBank | None = dc_field(default=None, repr=False)

    @property
    def rank(self) -> int:
        return self.backbone_cfg.rank

    @property
    def num_regions(self) -> int:
        return self.embedding.num_regions

    def parameters(self):
        return list(self.params.values())

    def invalidate_cache(self):
        self.cached_filters = None


def build_model(embedding: EmbeddingMatrix, backbone_cfg: nn.BackboneConfig,
                hidden: int = 256, head: str = "textscf",
                use_integration: bool = False, integration_steps: int = 7,
                seed: int = 0) -> ScfModel:
    """Initialize a model; the displacement-producing parameters (MLP last
    layer, w_r) start at zero so the fresh model is the identity map."""
    if head not in HEADS:
        raise ScfregError(f"head must be one of {HEADS}, got {head!r}")
    d = backbone_cfg.rank
    mlp_cfg = nn.ImplicitMlpConfig(
        in_dim=embedding.dim, hidden=hidden,
        out_dim=backbone_cfg.out_channels * d,
    )
    rng = np.random.default_rng(seed)
    params = nn.init_backbone(backbone_cfg, rng)
    params.update(nn.init_mlp(mlp_cfg, rng))
    params["w_r"] = engine.Parameter(
        np.zeros((backbone_cfg.out_channels, d)), "w_r"
    )
    return ScfModel(
        backbone_cfg=backbone_cfg, mlp_cfg=mlp_cfg, params=params,
        embedding=embedding, head=head, use_integration=use_integration,
        integration_steps=integration_steps, seed=seed,
    )


def _filters_node(model: ScfModel) -> engine.Node:
    """Graph node of the per-region filters, shape [N, C2, d]."""
    out = nn.implicit_mlp_forward(model.params, model.mlp_cfg, model.embedding.matrix)
    d = model.rank
    c2 = model.backbone_cfg.out_channels
    return engine.reshape(out, (model.num_regions, c2, d))


def region_filters(model: ScfModel) -> FilterBank:
    """Evaluate (and cache) the filter bank; one MLP pass over the N rows."""
    if model.cached_filters is None:
        model.cached_filters = FilterBank(
            W=_filters_node(model).data, w_r=model.params["w_r"]
        )
    return model.cached_filters


def _displace_node(model: ScfModel, feat: engine.Node, cond: VoxelConditioning) -> engine.Node:
    spatial = cond.region_index.shape
    if feat.data.shape[1:] != spatial:
        raise ScfregError(
            f"feature spatial shape {feat.data.shape[1:]} != mask shape {spatial}"
        )
    if cond.region_index.max() >= model.num_regions:
        raise ScfregError("conditioning region index exceeds embedding rows")
    d = model.rank
    c2 = model.backbone_cfg.out_channels
    n_vox = int(np.prod(spatial))
    w_r = model.params["w_r"]
    if model.head == "uniform":
        ones = np.ones((n_vox, 1, 1))
        w_eff = engine.mul(w_r, ones)
    else:
        bank = _filters_node(model)
        gathered = engine.gather_rows(bank, cond.region_index.ravel())
        p = cond.confidence.ravel()[:, None, None]
        w_eff = engine.add(engine.mul(gathered, p), engine.mul(w_r, 1.0 - p))
    feat_flat = engine.reshape(feat, (c2, n_vox))
    u_flat = nn.scf_combine(w_eff, feat_flat)
    return engine.reshape(u_flat, (d, *spatial))


def displace(model: ScfModel, feat: np.ndarray, cond: VoxelConditioning) -> np.ndarray:
    """Displacement field from a feature map and voxel conditioning (no graph)."""
    return _displace_node(model, engine.as_node(np.asarray(feat)), cond).data


def register(model: ScfModel, im_m, im_f, mask_f, training: bool = False):
    """Predict the displacement aligning ``im_m`` to ``im_f``.

    Args:
        model: trained or fresh model.
        im_m, im_f: moving and fixed images, shape [S_1..S_d].
        mask_f: fixed-image segmentation (SegMask or label array); optional
            probabilities become the blending confidence.
        training: when True, returns the graph Node for backprop; otherwise
            a plain float64 array.
    """
    mask_f = as_mask(mask_f)
    cond = conditioning_from_mask(mask_f, model.num_regions)
    feat = nn.backbone_forward(model.params, model.backbone_cfg, im_m, im_f)
    u = _displace_node(model, feat, cond)
    if model.use_integration:
        u = nn.integrate_velocity(u, model.integration_steps)
    return u if training else u.data


def complexity_report(backbone_cfg: nn.BackboneConfig, mlp_cfg: nn.ImplicitMlpConfig,
                      num_regions: int, input_shape=None) -> dict:
    """Exact parameter counts and multiply-add counts from the layer list.

    Multiply-adds count c_in * k^d * c_out per conv output element (biases
    excluded) plus the MLP rows and the per-voxel filter contraction. The
    N-row MLP cost is reported separately as the inference overhead of the
    covariant filters; it amortizes to zero once the filter bank is cached.
    """
    d = backbone_cfg.rank
    specs = nn.backbone_layer_specs(backbone_cfg)
    backbone_params = sum(k**d * ci * co + co for (_n, ci, co, k, _s) in specs)
    mlp_specs = nn.mlp_layer_specs(mlp_cfg)
    mlp_params = sum(ci * co + co for (_n, ci, co) in mlp_specs)
    w_r_params = backbone_cfg.out_channels * d
    mlp_macs_per_row = sum(ci * co for (_n, ci, co) in mlp_specs)
    report = {
        "backbone_params": int(backbone_params),
        "mlp_params": int(mlp_params),
        "w_r_params": int(w_r_params),
        "param_count": int(backbone_params + mlp_params + w_r_params),
        "scf_inference_overhead": {
            "uncached_mult_adds": int(num_regions * mlp_macs_per_row),
            "cached_mult_adds": 0,
        },
    }
    if input_shape is not None:
        input_shape = tuple(input_shape)
        if len(input_shape) != d:
            raise ScfregError(f"input shape {input_shape} does not match rank {d}")
        level = {0: input_shape}
        for i in range(1, backbone_cfg.levels):
            level[i] = tuple(-(-s // 2) for s in level[i - 1])
        out_spatial = {"enc0": level[0], "head": level[0]}
        for i in range(1, backbone_cfg.levels):
            out_spatial[f"down{i}"] = level[i]
            out_spatial[f"enc{i}"] = level[i]
        for i in range(backbone_cfg.levels - 1):
            out_spatial[f"dec{i}"] = level[i]
        conv_macs = 0
        for name, ci, co, k, _stride in specs:
            conv_macs += int(np.prod(out_spatial[name])) * k**d * ci * co
        n_vox = int(np.prod(input_shape))
        combine_macs = n_vox * backbone_cfg.out_channels * d
        report["mult_adds"] = int(
            conv_macs + num_regions * mlp_macs_per_row + combine_macs
        )
        report["backbone_mult_adds"] = int(conv_macs)
    return report


# --- checkpointing ---

def save_model(ckpt_dir, model: ScfModel) -> None:
    """Checkpoint directory: one .scft per parameter, the embedding matrix
    (+ labels sidecar) and model.json with the configs. Bit-exact reload."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    nn.save_parameters(ckpt_dir, model.params)
    tensorio.write_tensor(ckpt_dir / "embedding.scft", model.embedding.matrix)
    tensorio.write_sidecar(ckpt_dir / "embedding.scft", {
        "labels": model.embedding.labels[1:],
        "prompt_template": "",
        "encoder": model.embedding.source,
        "has_background_row": True,
    })
    payload = {
        "format": "scfreg-checkpoint-v1",
        "backbone": model.backbone_cfg.to_dict(),
        "mlp": model.mlp_cfg.to_dict(),
        "head": model.head,
        "use_integration": model.use_integration,
        "integration_steps": model.integration_steps,
        "seed": model.seed,
        "epoch": model.epoch,
        "param_names": sorted(model.params),
    }
    (ckpt_dir / "model.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def load_model(ckpt_dir) -> ScfModel:
    ckpt_dir = Path(ckpt_dir)
    payload = json.loads((ckpt_dir / "model.json").read_text())
    if payload.get("format") != "scfreg-checkpoint-v1":
        raise ScfregError(f"{ckpt_dir}: not a scfreg checkpoint")
    backbone_cfg = nn.BackboneConfig(**payload["backbone"])
    mlp_cfg = nn.ImplicitMlpConfig(**payload["mlp"])
    params = nn.load_parameters(ckpt_dir, payload["param_names"])
    matrix = np.array(tensorio.read_tensor(ckpt_dir / "embedding.scft"))
    meta = tensorio.read_sidecar(ckpt_dir / "embedding.scft")
    embedding = EmbeddingMatrix(
        matrix=matrix, labels=["background"] + list(meta["labels"]),
        source=meta.get("encoder", ""),
    )
    return ScfModel(
        backbone_cfg=backbone_cfg, mlp_cfg=mlp_cfg, params=params,
        embedding=embedding, head=payload["head"],
        use_integration=payload["use_integration"],
        integration_steps=payload["integration_steps"],
        seed=payload["seed"], epoch=payload["epoch"],
    )
