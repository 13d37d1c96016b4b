"""Synthetic image/mask pairs with known ground-truth deformations.

An atlas is a set of non-overlapping random ellipsoids on a background;
pairs deform the *fixed* atlas into the moving image so the fixed mask
(the input to the covariant-filter head) is exact. Ground-truth fields are
built by integrating smoothed white-noise velocities, so they are
fold-free by construction (checked, regenerated on failure).

Dataset directory layout:

    manifest.json                 config echo + pair listing
    pair_0000/{im_m,im_f,seg_m,seg_f,u_true[,probs_f]}.scft
"""

import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import diffeo, field as field_mod, metrics, tensorio
from .errors import CrowdedError, ScfregError, TooRoughError
from .train import RegPair

logger = logging.getLogger(__name__)

CT_CLIP_LO = -500.0
CT_CLIP_HI = 800.0


@dataclass
class SynthConfig:
    shape: tuple
    num_regions: int = 4          # foreground labels 1..num_regions
    num_pairs: int = 10
    amplitude: float = 3.0        # max displacement magnitude, voxels
    sigma: float = 4.0            # velocity smoothing, voxels
    noise_sd: float = 0.02        # intensity noise
    seed: int = 0
    modality: str = "generic"     # or "ct_like"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if len(self.shape) not in (2, 3):
            raise ScfregError(f"shape must be 2-D or 3-D, got {self.shape}")
        if self.amplitude < 0 or self.sigma <= 0 or self.num_regions < 1:
            raise ScfregError("need amplitude >= 0, sigma > 0, num_regions >= 1")
        if self.modality not in ("generic", "ct_like"):
            raise ScfregError(f"unknown modality {self.modality!r}")


def splitmix64(state: int) -> int:
    """One splitmix64 step; derives independent child seeds from a master."""
    state = (state + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def child_seed(master: int, index: int) -> int:
    return splitmix64((master & 0xFFFFFFFFFFFFFFFF) + index + 1)


def preprocess_ct(raw: np.ndarray) -> np.ndarray:
    """Clamp Hounsfield values to [-500, 800] and map linearly to [0, 1]."""
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ScfregError("CT volume contains non-finite values")
    clipped = np.clip(raw, CT_CLIP_LO, CT_CLIP_HI)
    return (clipped - CT_CLIP_LO) / (CT_CLIP_HI - CT_CLIP_LO)


def _ellipsoid_mask(shape, center, semi_axes):
    grid = field_mod.grid_coords(shape)
    acc = np.zeros(shape)
    for ax in range(len(shape)):
        acc += ((grid[ax] - center[ax]) / semi_axes[ax]) ** 2
    return acc <= 1.0


def make_atlas(cfg: SynthConfig, rng=None):
    """Random non-overlapping ellipsoid regions plus an intensity image.

    Returns (image in [0,1], int32 label map with labels 1..num_regions).
    Raises CrowdedError when placement keeps colliding.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    shape = cfg.shape
    labels = np.zeros(shape, np.int32)
    min_extent = min(shape)
    for label in range(1, cfg.num_regions + 1):
        placed = False
        for attempt in range(200):
            # shrink on repeated collisions so small/crowded grids converge
            shrink = 0.97**attempt
            lo = max(1.2, (0.06 * min_extent + 1.0) * shrink)
            hi = max(lo + 0.3, (0.16 * min_extent + 1.5) * shrink)
            semi = rng.uniform(lo, hi, len(shape))
            if any(s - a - 2 <= a + 1 for s, a in zip(shape, semi)):
                continue
            center = np.array(
                [rng.uniform(a + 1, s - a - 2) for s, a in zip(shape, semi)]
            )
            mask = _ellipsoid_mask(shape, center, semi)
            if not mask.any():
                continue
            grown = _ellipsoid_mask(shape, center, semi + 1.5)  # 1-2 voxel gap
            if (labels[grown] == 0).all():
                labels[mask] = label
                placed = True
                break
        if not placed:
            raise CrowdedError(
                f"could not place region {label}/{cfg.num_regions} on {shape}"
            )
    if cfg.modality == "ct_like":
        base_hu = rng.uniform(-200.0, 600.0, cfg.num_regions + 1)
        base_hu[0] = -400.0  # air-ish background
        raw = base_hu[labels] + rng.normal(0.0, 40.0, shape)
        image = preprocess_ct(raw)
    else:
        base = rng.uniform(0.25, 0.95, cfg.num_regions + 1)
        base[0] = 0.05
        image = base[labels] + rng.normal(0.0, cfg.noise_sd, shape)
        image = np.clip(image, 0.0, 1.0)
    return image, labels


def smooth_noise_field(shape, amplitude, sigma, rng) -> np.ndarray:
    """Gaussian-smoothed white noise scaled to a max vector magnitude.

    Used directly as a (possibly folding) displacement in metric sweeps and
    as the raw velocity for ``random_diffeo``. The smoothing kernel is
    separable and truncated at radius 3*sigma.
    """
    d = len(shape)
    u = rng.standard_normal((d, *shape))
    for i in range(d):
        u[i] = gaussian_filter(u[i], sigma, mode="reflect", truncate=3.0)
    if amplitude == 0.0:
        return np.zeros_like(u)
    peak = np.sqrt((u**2).sum(axis=0)).max()
    if peak == 0.0:
        return np.zeros_like(u)
    return u * (amplitude / peak)


def random_diffeo(cfg: SynthConfig, rng=None, max_retries: int = 10) -> np.ndarray:
    """Fold-free random displacement: smooth noise velocity integrated by
    scaling and squaring; regenerated (bounded) if any fold slips through."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    for _attempt in range(max_retries):
        v = smooth_noise_field(cfg.shape, cfg.amplitude, cfg.sigma, rng)
        u = diffeo.integrate(v, steps=diffeo.DEFAULT_STEPS)
        det = metrics.jacobian_determinant(u)
        if metrics.folding_fraction(det) == 0.0:
            return u
    raise TooRoughError(
        f"velocity field kept folding after {max_retries} retries "
        f"(amplitude {cfg.amplitude}, sigma {cfg.sigma})"
    )


def make_pair(atlas, cfg: SynthConfig, rng=None) -> tuple:
    """(RegPair, u_true): the fixed image/mask are the atlas; the moving
    image is the atlas warped by a random diffeomorphism plus fresh noise,
    so warp(im_f, u_true) reproduces im_m minus that noise exactly."""
    im_f, seg_f = atlas
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    u_true = random_diffeo(cfg, rng)
    im_m = field_mod.warp_image(im_f, u_true, mode="linear")
    if cfg.noise_sd > 0:
        im_m = im_m + rng.normal(0.0, cfg.noise_sd, cfg.shape)
    seg_m = field_mod.warp_image(seg_f, u_true, mode="nearest")
    pair = RegPair(im_m=im_m, im_f=im_f, seg_m=seg_m, seg_f=seg_f)
    return pair, u_true


def flip_mask_labels(labels: np.ndarray, fraction: float, num_labels: int,
                     rng) -> np.ndarray:
    """Corrupt a mask by reassigning a random fraction of voxels to random
    *different* labels; models degraded external segmentations."""
    labels = np.asarray(labels, dtype=np.int32).copy()
    n_flip = int(round(fraction * labels.size))
    if n_flip == 0:
        return labels
    flat = labels.reshape(-1)
    idx = rng.choice(labels.size, size=n_flip, replace=False)
    offsets = rng.integers(1, num_labels, size=n_flip)
    flat[idx] = (flat[idx] + offsets) % num_labels
    return labels


def generate_dataset(cfg: SynthConfig, out_dir) -> dict:
    """Write ``num_pairs`` pairs and a manifest; fully determined by the
    seed (pair seeds are split off the master seed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlas = make_atlas(cfg, np.random.default_rng(child_seed(cfg.seed, 0)))
    entries = []
    for i in range(cfg.num_pairs):
        rng = np.random.default_rng(child_seed(cfg.seed, i + 1))
        pair, u_true = make_pair(atlas, cfg, rng)
        name = f"pair_{i:04d}"
        pair_dir = out_dir / name
        pair_dir.mkdir(exist_ok=True)
        tensorio.write_tensor(pair_dir / "im_m.scft", pair.im_m)
        tensorio.write_tensor(pair_dir / "im_f.scft", pair.im_f)
        tensorio.write_tensor(pair_dir / "seg_m.scft", pair.seg_m.astype(np.int32))
        tensorio.write_tensor(pair_dir / "seg_f.scft", pair.seg_f.astype(np.int32))
        tensorio.write_tensor(pair_dir / "u_true.scft", u_true)
        entries.append(name)
        logger.info("wrote %s", pair_dir)
    cfg_dict = asdict(cfg)
    cfg_dict["shape"] = list(cfg.shape)  # json-native form
    manifest = {
        "config": cfg_dict,
        "num_labels": cfg.num_regions + 1,
        "pairs": entries,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir):
    """Read a dataset directory back into (list of RegPair, manifest)."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    pairs = []
    for name in manifest["pairs"]:
        pair_dir = data_dir / name
        probs_path = pair_dir / "probs_f.scft"
        pairs.append(RegPair(
            im_m=np.array(tensorio.read_tensor(pair_dir / "im_m.scft")),
            im_f=np.array(tensorio.read_tensor(pair_dir / "im_f.scft")),
            seg_m=np.array(tensorio.read_tensor(pair_dir / "seg_m.scft")),
            seg_f=np.array(tensorio.read_tensor(pair_dir / "seg_f.scft")),
            probs_f=np.array(tensorio.read_tensor(probs_path)) if probs_path.exists() else None,
        ))
    return pairs, manifest
