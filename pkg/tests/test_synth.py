"""Synthetic data generator tests."""

import numpy as np
import pytest

from scfreg import field, metrics, synth
from scfreg.errors import CrowdedError, ScfregError


def _cfg(**kw):
    base = dict(shape=(32, 32), num_regions=3, num_pairs=2, amplitude=2.0,
                sigma=3.0, noise_sd=0.02, seed=7)
    base.update(kw)
    return synth.SynthConfig(**base)


def test_atlas_deterministic_and_valid():
    cfg = _cfg()
    img1, seg1 = synth.make_atlas(cfg)
    img2, seg2 = synth.make_atlas(cfg)
    assert np.array_equal(img1, img2)
    assert np.array_equal(seg1, seg2)
    for label in range(1, cfg.num_regions + 1):
        assert (seg1 == label).sum() >= 1
    assert img1.min() >= 0.0 and img1.max() <= 1.0
    assert seg1.dtype == np.int32


def test_atlas_ct_like_modality():
    img, seg = synth.make_atlas(_cfg(modality="ct_like"))
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert set(np.unique(seg)) >= {0, 1}


def test_atlas_crowded_error():
    with pytest.raises(CrowdedError):
        synth.make_atlas(_cfg(shape=(8, 8), num_regions=30))


def test_atlas_3d():
    img, seg = synth.make_atlas(_cfg(shape=(16, 16, 16), num_regions=2))
    assert img.shape == (16, 16, 16)
    assert (seg > 0).any()


def test_random_diffeo_zero_amplitude():
    u = synth.random_diffeo(_cfg(amplitude=0.0))
    assert np.array_equal(u, np.zeros((2, 32, 32)))


def test_random_diffeo_is_fold_free():
    for seed in range(5):
        u = synth.random_diffeo(_cfg(seed=seed, amplitude=4.0, sigma=2.0))
        det = metrics.jacobian_determinant(u)
        assert metrics.folding_fraction(det) == 0.0
        assert np.sqrt((u**2).sum(axis=0)).max() <= 4.0 + 1e-6


def test_amplitude_sweep_increases_sdlogj():
    # Larger velocities produce less uniform fields: mean SDlogJ over seeds
    # must increase strictly along the amplitude sweep.
    amplitudes = [0.5, 1.0, 2.0, 4.0]
    means = []
    for amp in amplitudes:
        vals = []
        for seed in range(10):
            u = synth.random_diffeo(_cfg(amplitude=amp, sigma=3.0, seed=100 + seed))
            vals.append(metrics.sdlogj(metrics.jacobian_determinant(u)))
        means.append(np.mean(vals))
    assert all(a < b for a, b in zip(means, means[1:])), means


def test_make_pair_identity_when_trivial():
    cfg = _cfg(amplitude=0.0, noise_sd=0.0)
    atlas = synth.make_atlas(cfg)
    pair, u_true = synth.make_pair(atlas, cfg)
    assert np.array_equal(pair.im_m, pair.im_f)
    assert np.array_equal(pair.seg_m, pair.seg_f)
    assert np.array_equal(u_true, np.zeros((2, 32, 32)))
    _, mean = metrics.dice(pair.seg_m, pair.seg_f)
    assert mean == 1.0


def test_make_pair_construction_identity():
    # With zero noise the moving image is exactly the warped fixed image.
    cfg = _cfg(noise_sd=0.0, amplitude=2.5)
    atlas = synth.make_atlas(cfg)
    pair, u_true = synth.make_pair(atlas, cfg)
    assert np.array_equal(pair.im_m, field.warp_image(pair.im_f, u_true))
    assert np.array_equal(pair.seg_m, field.warp_image(pair.seg_f, u_true, "nearest"))


def test_make_pair_moderate_amplitude_reduces_dice():
    cfg = _cfg(amplitude=3.0)
    atlas = synth.make_atlas(cfg)
    pair, _ = synth.make_pair(atlas, cfg)
    _, mean = metrics.dice(pair.seg_m, pair.seg_f)
    assert mean < 1.0


def test_preprocess_ct_values():
    raw = np.array([-500.0, 800.0, 150.0, -1000.0, 2000.0])
    out = synth.preprocess_ct(raw)
    np.testing.assert_allclose(out, [0.0, 1.0, 0.5, 0.0, 1.0], atol=1e-15)
    with pytest.raises(ScfregError):
        synth.preprocess_ct(np.array([np.nan]))


def test_flip_mask_labels():
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 4, size=(20, 20)).astype(np.int32)
    flipped = synth.flip_mask_labels(labels, 0.3, 4, np.random.default_rng(2))
    changed = (flipped != labels).mean()
    assert changed == pytest.approx(0.3, abs=0.01)
    assert flipped.min() >= 0 and flipped.max() < 4
    same = synth.flip_mask_labels(labels, 0.0, 4, np.random.default_rng(2))
    assert np.array_equal(same, labels)


def test_child_seeds_distinct():
    seeds = {synth.child_seed(42, i) for i in range(100)}
    assert len(seeds) == 100


def test_generate_and_load_dataset(tmp_path):
    cfg = _cfg(num_pairs=3)
    manifest = synth.generate_dataset(cfg, tmp_path / "ds")
    assert manifest["pairs"] == ["pair_0000", "pair_0001", "pair_0002"]
    assert manifest["num_labels"] == 4
    for name in manifest["pairs"]:
        for stem in ("im_m", "im_f", "seg_m", "seg_f", "u_true"):
            assert (tmp_path / "ds" / name / f"{stem}.scft").exists()
    pairs, m2 = synth.load_dataset(tmp_path / "ds")
    assert len(pairs) == 3
    assert m2 == manifest
    assert pairs[0].im_f.shape == (32, 32)
    assert pairs[0].probs_f is None
    # pairs share the fixed atlas but have distinct deformations
    assert np.array_equal(pairs[0].im_f, pairs[1].im_f)
    assert not np.array_equal(pairs[0].im_m, pairs[1].im_m)


def test_generate_dataset_byte_identical(tmp_path):
    cfg = _cfg(num_pairs=2)
    synth.generate_dataset(cfg, tmp_path / "a")
    synth.generate_dataset(cfg, tmp_path / "b")
    for rel in ["manifest.json", "pair_0000/im_m.scft", "pair_0001/u_true.scft"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
