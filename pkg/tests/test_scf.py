"""Covariant-filter head tests: blending semantics, locality, gradients."""

import numpy as np
import pytest

from scfreg import embeddings, nn, scf
from scfreg.embeddings import VoxelConditioning
from scfreg.errors import ScfregError
from scfreg.nn import engine


def tiny_model(seed=0, n=3, c2=3, head="textscf", rank=2, hidden=8,
               use_integration=False):
    emb = embeddings.one_hot_embeddings(n)
    cfg = nn.BackboneConfig(rank=rank, start_channels=2, levels=2, out_channels=c2)
    return scf.build_model(
        emb, cfg, hidden=hidden, head=head, seed=seed,
        use_integration=use_integration,
    )


def randomize_heads(model, seed=99, scale=0.3):
    """Give the zero-initialized displacement heads generic values."""
    rng = np.random.default_rng(seed)
    for name in ("mlp.fc2.w", "mlp.fc2.b", "w_r"):
        p = model.params[name]
        p.data[:] = scale * rng.standard_normal(p.data.shape)
    model.invalidate_cache()
    return model


def test_region_filters_zero_mlp_zero_bank():
    model = tiny_model()
    for name, p in model.params.items():
        if name.startswith("mlp."):
            p.data[:] = 0.0
    bank = scf.region_filters(model)
    assert bank.W.shape == (3, 3, 2)
    assert np.array_equal(bank.W, np.zeros((3, 3, 2)))


def test_region_filters_shape_and_identical_rows():
    model = tiny_model(n=5, c2=16)
    randomize_heads(model)
    model.embedding.matrix[2] = model.embedding.matrix[1]
    model.invalidate_cache()
    bank = scf.region_filters(model)
    assert bank.W.shape == (5, 16, 2)
    assert np.array_equal(bank.W[1], bank.W[2])


def test_displace_p_zero_matches_uniform_head_bitwise():
    model = tiny_model(seed=3)
    randomize_heads(model, seed=4)
    uniform = tiny_model(seed=3, head="uniform")
    for name in uniform.params:
        uniform.params[name].data[:] = model.params[name].data
    rng = np.random.default_rng(5)
    feat = rng.standard_normal((3, 4, 4))
    region = rng.integers(0, 3, size=(4, 4)).astype(np.int32)
    cond0 = VoxelConditioning(region, np.zeros((4, 4)))
    cond1 = VoxelConditioning(region, np.ones((4, 4)))
    u_blend = scf.displace(model, feat, cond0)
    u_uniform = scf.displace(uniform, feat, cond1)
    assert np.array_equal(u_blend, u_uniform)


def test_displace_single_region_onehot_feature():
    # p = 1 everywhere, one region, F = one-hot channel c: every voxel gets
    # row c of that region's filter.
    model = tiny_model(n=3, c2=4)
    randomize_heads(model, seed=6)
    bank = scf.region_filters(model)
    c = 2
    feat = np.zeros((4, 3, 3))
    feat[c] = 1.0
    region = np.full((3, 3), 1, np.int32)
    u = scf.displace(model, feat, VoxelConditioning(region, np.ones((3, 3))))
    for j in range(2):
        np.testing.assert_allclose(u[j], bank.W[1, c, j], atol=1e-15)


def test_displace_matches_bruteforce_blend():
    model = tiny_model(n=2, c2=3)
    randomize_heads(model, seed=7)
    rng = np.random.default_rng(8)
    feat = rng.standard_normal((3, 4, 4))
    region = rng.integers(0, 2, size=(4, 4)).astype(np.int32)
    p = rng.random((4, 4))
    u = scf.displace(model, feat, VoxelConditioning(region, p))
    bank = scf.region_filters(model)
    w_r = model.params["w_r"].data
    for y in range(4):
        for x in range(4):
            w_eff = p[y, x] * bank.W[region[y, x]] + (1 - p[y, x]) * w_r
            expected = w_eff.T @ feat[:, y, x]
            np.testing.assert_allclose(u[:, y, x], expected, atol=1e-12)


def test_region_locality_under_embedding_edits():
    # With p = 1, changing embedding row j only moves voxels labelled j.
    model = tiny_model(n=3, c2=4)
    randomize_heads(model, seed=9)
    rng = np.random.default_rng(10)
    feat = rng.standard_normal((4, 6, 6))
    region = rng.integers(0, 3, size=(6, 6)).astype(np.int32)
    cond = VoxelConditioning(region, np.ones((6, 6)))
    base = scf.displace(model, feat, cond)
    model.embedding.matrix[2] = rng.standard_normal(3)
    model.invalidate_cache()
    moved = scf.displace(model, feat, cond)
    changed = np.any(base != moved, axis=0)
    assert changed[region == 2].all()
    assert not changed[region != 2].any()


def test_permuting_regions_and_rows_is_invariant():
    model = tiny_model(n=4, c2=3)
    randomize_heads(model, seed=11)
    rng = np.random.default_rng(12)
    feat = rng.standard_normal((3, 5, 5))
    region = rng.integers(0, 4, size=(5, 5)).astype(np.int32)
    p = rng.random((5, 5))
    u = scf.displace(model, feat, VoxelConditioning(region, p))
    perm = np.array([0, 2, 3, 1])  # new_id = perm^{-1}[old]? use lookup below
    inv = np.argsort(perm)
    permuted = tiny_model(n=4, c2=3)
    for name in permuted.params:
        permuted.params[name].data[:] = model.params[name].data
    permuted.embedding.matrix[:] = model.embedding.matrix[perm]
    permuted.invalidate_cache()
    region_perm = inv[region]
    u2 = scf.displace(permuted, feat, VoxelConditioning(region_perm.astype(np.int32), p))
    np.testing.assert_allclose(u, u2, atol=1e-15)


def test_register_fresh_model_is_identity():
    rng = np.random.default_rng(13)
    im_m, im_f = rng.random((8, 8)), rng.random((8, 8))
    mask = rng.integers(0, 3, size=(8, 8)).astype(np.int32)
    for use_int in (False, True):
        model = tiny_model(seed=14, use_integration=use_int)
        u = scf.register(model, im_m, im_f, mask)
        assert np.array_equal(u, np.zeros((2, 8, 8)))


def test_register_rejects_out_of_range_labels():
    model = tiny_model(n=3)
    mask = np.full((8, 8), 5, np.int32)
    with pytest.raises(ScfregError):
        scf.register(model, np.zeros((8, 8)), np.zeros((8, 8)), mask)


def test_gradients_reach_all_three_parameter_groups():
    model = tiny_model(seed=15)
    randomize_heads(model, seed=16)
    rng = np.random.default_rng(17)
    im_m, im_f = rng.random((4, 4)), rng.random((4, 4))
    mask = rng.integers(0, 3, size=(4, 4)).astype(np.int32)
    u = scf.register(model, im_m, im_f, mask, training=True)
    proj = rng.standard_normal(u.data.shape)
    engine.backward(engine.sum_all(engine.mul(u, proj)))
    groups = {"backbone": 0.0, "mlp": 0.0, "w_r": 0.0}
    for name, p in model.params.items():
        key = "w_r" if name == "w_r" else name.split(".")[0]
        groups[key] += float(np.abs(p.grad).sum())
    assert groups["backbone"] > 0
    assert groups["mlp"] > 0
    # hard mask means p = 1 everywhere: w_r cannot receive gradient
    assert groups["w_r"] == 0.0
    # with soft confidence the uniform filter participates too
    model2 = tiny_model(seed=15)
    randomize_heads(model2, seed=16)
    from scfreg.field import SegMask

    probs = np.full((4, 4), 0.6)
    u2 = scf.register(model2, im_m, im_f, SegMask(mask, probs), training=True)
    engine.backward(engine.sum_all(engine.mul(u2, proj)))
    assert float(np.abs(model2.params["w_r"].grad).sum()) > 0


def test_appended_region_extends_filter_bank_only():
    # Adding an anatomical region = one more embedding row; the networks
    # are untouched and old-region displacements (p = 1) are unchanged.
    rng = np.random.default_rng(21)
    raw = rng.standard_normal((3, 6))
    emb = embeddings.prepare(raw, ["a", "b", "c"])
    cfg = nn.BackboneConfig(rank=2, start_channels=2, levels=2, out_channels=3)
    model = scf.build_model(emb, cfg, hidden=8, seed=22)
    randomize_heads(model, seed=23)
    feat = rng.standard_normal((3, 4, 4))
    region = rng.integers(0, 4, size=(4, 4)).astype(np.int32)
    cond = VoxelConditioning(region, np.ones((4, 4)))
    base = scf.displace(model, feat, cond)

    model.embedding = embeddings.append_region(model.embedding, rng.standard_normal(6), "d")
    model.invalidate_cache()
    bank = scf.region_filters(model)
    assert bank.W.shape == (5, 3, 2)
    same = scf.displace(model, feat, cond)
    np.testing.assert_array_equal(base, same)
    region5 = np.full((4, 4), 4, np.int32)  # all voxels in the new region
    u_new = scf.displace(model, feat, VoxelConditioning(region5, np.ones((4, 4))))
    assert np.isfinite(u_new).all()


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=18, n=4, c2=5)
    randomize_heads(model, seed=19)
    model.epoch = 7
    scf.save_model(tmp_path / "ckpt", model)
    back = scf.load_model(tmp_path / "ckpt")
    assert back.epoch == 7
    assert back.head == model.head
    assert back.embedding.labels == model.embedding.labels
    for name in model.params:
        assert np.array_equal(back.params[name].data, model.params[name].data)
    rng = np.random.default_rng(20)
    im_m, im_f = rng.random((4, 4)), rng.random((4, 4))
    mask = rng.integers(0, 4, size=(4, 4)).astype(np.int32)
    np.testing.assert_array_equal(
        scf.register(model, im_m, im_f, mask), scf.register(back, im_m, im_f, mask)
    )


def test_complexity_report_counts():
    cfg = nn.BackboneConfig(rank=2, start_channels=4, levels=2, kernel_size=3, out_channels=8)
    mlp_cfg = nn.ImplicitMlpConfig(in_dim=5, hidden=16, out_dim=16)
    rep = scf.complexity_report(cfg, mlp_cfg, num_regions=5, input_shape=(8, 8))
    assert rep["backbone_params"] == 1432  # hand-derived in test_networks
    mlp_expected = 5 * 16 + 16 + 16 * 32 + 32 + 32 * 16 + 16
    assert rep["mlp_params"] == mlp_expected
    assert rep["w_r_params"] == 16
    assert rep["param_count"] == 1432 + mlp_expected + 16
    # report matches the live model's actual parameter store
    emb = embeddings.one_hot_embeddings(5)
    model = scf.build_model(emb, cfg, hidden=16)
    assert rep["param_count"] == sum(p.data.size for p in model.parameters())
    assert rep["scf_inference_overhead"]["cached_mult_adds"] == 0
    assert rep["scf_inference_overhead"]["uncached_mult_adds"] == 5 * (5 * 16 + 16 * 32 + 32 * 16)
    # backbone MACs: enc0 64*9*2*4, down1 16*9*4*8, enc1 16*9*8*8,
    # dec0 64*9*12*4, head 64*1*4*8
    macs = 64 * 9 * 2 * 4 + 16 * 9 * 4 * 8 + 16 * 9 * 8 * 8 + 64 * 9 * 12 * 4 + 64 * 4 * 8
    assert rep["backbone_mult_adds"] == macs


def test_complexity_monotone_in_start_channels():
    mlp_cfg = nn.ImplicitMlpConfig(in_dim=4, hidden=8, out_dim=8)
    counts = []
    for ns in (4, 8, 16):
        cfg = nn.BackboneConfig(rank=2, start_channels=ns, levels=2, out_channels=4)
        counts.append(scf.complexity_report(cfg, mlp_cfg, 4)["backbone_params"])
    assert counts[0] < counts[1] < counts[2]
    # first conv (2 -> N_s) parameter count scales exactly with N_s
    first = lambda ns: 9 * 2 * ns + ns
    assert first(8) / first(4) == 2.0
