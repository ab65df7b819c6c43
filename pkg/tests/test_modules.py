"""fg-separation, height-aware PV-to-BEV and multi-scale fusion against scalar oracles."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heightbev import tensor as T
from heightbev.fg_separation import ForegroundMask, apply_masks, gt_masks, init_mask_params, mask_loss, predict_masks
from heightbev.fusion import attention_weights, deformable_attention, fuse_multiscale, init_fusion_params
from heightbev.geometry import BEVGrid, Camera, CameraRig, ReferencePointGrid, look_extrinsic
from heightbev.height_bev import (
    SampledColumnFeatures,
    height_distribution,
    init_height_params,
    pool_by_height,
    sample_columns,
)
from heightbev.params import ParamSet
from oracles import bilinear_ref, conv_ref, linear_ref, pe_ref


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def mlp_ref(x, ps, prefix):
    h = np.maximum(linear_ref(x, ps.values[f"{prefix}.w1"], ps.values[f"{prefix}.b1"]), 0.0)
    return linear_ref(h, ps.values[f"{prefix}.w2"], ps.values[f"{prefix}.b2"])


# ---------------------------------------------------------------- fg-separation


def _mask_params(c=3, seed=0):
    p = ParamSet()
    init_mask_params(p, c, np.random.default_rng(seed))
    return p


def test_predict_masks_matches_scalar_pipeline():
    rng = np.random.default_rng(1)
    p = _mask_params()
    pyr = [rng.normal(size=(2, 3, 3, 4)), rng.normal(size=(2, 3, 6, 8))]
    got = predict_masks(pyr, p)
    v = p.values
    for lvl, out in zip(pyr, got.levels):
        for cam in range(2):
            hid = np.maximum(conv_ref(lvl[cam], v["fg.conv1.w"], v["fg.conv1.b"]), 0.0)
            pre = conv_ref(hid, v["fg.conv2.w"], v["fg.conv2.b"])
            ref = np.vectorize(sigmoid)(pre)
            assert np.allclose(out.data[cam], ref, atol=1e-13)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_range_and_apply_bounds(seed):
    rng = np.random.default_rng(seed)
    p = _mask_params(seed=seed % 1000)
    f = rng.normal(size=(1, 3, 4, 5)) * 3
    m = predict_masks([f], p).levels[0].data
    assert np.all((m > 0) & (m < 1))
    out = apply_masks([f], ForegroundMask([m], "predicted"))[0].data
    assert np.allclose(out, f * (1.0 + m), atol=1e-14)
    assert np.all(np.abs(out) <= 2 * np.abs(f) + 1e-15)
    zero = apply_masks([f], ForegroundMask([np.zeros_like(m)], "predicted"))[0].data
    assert np.array_equal(zero, f)


def _one_camera_rig(yaw=0.0):
    k = np.array([[60.0, 0, 31.5], [0, 60.0, 15.5], [0, 0, 1]])
    return CameraRig((Camera("c", k, look_extrinsic([0, 0, 2.0], yaw, 0.2), 64, 32),))


def test_gt_mask_single_point_marks_nearest_cell_per_scale():
    rig = _one_camera_rig()
    ref = ReferencePointGrid(BEVGrid(-1.0, 1.0, 9.0, 11.0, 1, 1), z_count=1, z_min=-0.3, z_max=-0.3)
    p = np.array([0.0, 10.0, -0.3])
    assert np.allclose(ref.points, [p])
    c = rig.cameras[0]
    uvw = c.intrinsic @ (c.extrinsic @ np.append(p, 1.0))[:3]
    u, v = uvw[0] / uvw[2], uvw[1] / uvw[2]
    shapes = [(8, 16), (16, 32)]
    masks = gt_masks(rig, ref, shapes)
    for (hf, wf), m in zip(shapes, masks.levels):
        s = 32 // hf
        col, row = round((u + 0.5) / s - 0.5), round((v + 0.5) / s - 0.5)
        assert m.sum() == 1.0 and m[0, 0, row, col] == 1.0


def test_gt_mask_camera_facing_away_is_empty_and_binary():
    rig = _one_camera_rig(yaw=np.pi)
    ref = ReferencePointGrid(BEVGrid(-5, 5, 5, 30, 5, 5), z_count=3)
    m = gt_masks(rig, ref, [(8, 16)]).levels[0]
    assert m.sum() == 0
    m2 = gt_masks(_one_camera_rig(), ref, [(8, 16)]).levels[0]
    assert set(np.unique(m2)) <= {0.0, 1.0} and m2.sum() > 0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_loss_oracle_and_properties(seed):
    rng = np.random.default_rng(seed)
    a = [rng.uniform(size=(2, 1, 3, 4)), rng.uniform(size=(2, 1, 6, 8))]
    b = [(rng.uniform(size=x.shape) > 0.5).astype(float) for x in a]
    ref = 0.0
    for x, y in zip(a, b):
        for cam in range(2):
            ref += np.abs(x[cam] - y[cam]).sum() / x[cam].size
    pa, pb = ForegroundMask(a, "predicted"), ForegroundMask(b, "ground_truth")
    got = mask_loss(pa, pb).item()
    assert got == pytest.approx(ref, abs=1e-13) and got >= 0
    assert mask_loss(pb, pa).item() == got
    assert mask_loss(pa, pa).item() == 0.0


# ---------------------------------------------------------------- height-bev


def _height_params(c, z, seed):
    p = ParamSet()
    init_height_params(p, c, z, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    p.values["height.query"] = rng.normal(size=c)
    p.values["height.mlp.w2"] = rng.normal(size=(z, c))
    p.values["height.mlp.b2"] = rng.normal(size=z)
    return p


def test_fresh_height_params_give_exactly_uniform():
    p = ParamSet()
    init_height_params(p, 6, 12, np.random.default_rng(0))
    d = height_distribution(np.random.default_rng(1).normal(size=(3, 6, 4, 5)), p).data
    assert np.all(d == 1.0 / 12)


def test_height_distribution_matches_scalar_pipeline():
    rng = np.random.default_rng(4)
    c, z = 4, 4
    p = _height_params(c, z, 4)
    top = rng.normal(size=(3, c, 3, 5))
    got = height_distribution(top, p).data
    pe = pe_ref(3, 5, c)
    for cam in range(3):
        pooled = np.array([[np.mean(top[cam, k] + pe[k]) for k in range(c)]])
        logits = mlp_ref(pooled + p.values["height.query"], p, "height.mlp")[0]
        assert np.allclose(got[cam], softmax(logits), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 4, 8, 12, 16]))
def test_height_distribution_is_normalised(seed, z):
    rng = np.random.default_rng(seed)
    p = _height_params(6, z, seed % 997)
    d = height_distribution(rng.normal(size=(2, 6, 4, 4)) * 5, p).data
    assert np.all(np.abs(d.sum(-1) - 1.0) < 1e-9) and np.all((d >= 0) & (d <= 1))


def _two_camera_rig():
    k = np.array([[50.0, 0, 31.5], [0, 50.0, 15.5], [0, 0, 1]])
    cams = (
        Camera("a", k, look_extrinsic([0.0, 0, 2.0], 0.25, 0.2), 64, 32),
        Camera("b", k, look_extrinsic([0.0, 0, 2.0], -0.25, 0.2), 64, 32),
    )
    return CameraRig(cams)


def test_two_camera_point_is_mean_of_single_camera_samples():
    rig = _two_camera_rig()
    ref = ReferencePointGrid(BEVGrid(-0.05, 0.05, 11.95, 12.05, 1, 1), z_count=1, z_min=0.1, z_max=0.1)
    p = ref.points[0]
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(2, 5, 8, 16))
    samples = []
    for c in rig.cameras:
        uvw = c.intrinsic @ (c.extrinsic @ np.append(p, 1.0))[:3]
        u, v = uvw[0] / uvw[2], uvw[1] / uvw[2]
        assert 0 <= u <= 63 and 0 <= v <= 31
        samples.append(bilinear_ref(feats[len(samples)], (u + 0.5) / 4 - 0.5, (v + 0.5) / 4 - 0.5))
    col = sample_columns([feats], rig, ref)[0]
    assert col.visibility[0, 0] == 2
    assert np.allclose(col.features.data[0, 0], (samples[0] + samples[1]) / 2, atol=1e-13)


def test_point_behind_all_cameras_is_zero():
    rig = _two_camera_rig()
    ref = ReferencePointGrid(BEVGrid(-0.05, 0.05, -12.05, -11.95, 1, 1), z_count=2)
    col = sample_columns([np.ones((2, 3, 8, 16))], rig, ref)[0]
    assert np.all(col.features.data == 0) and np.all(col.visibility == 0)


def _columns(rng, n_cell=6, z=3, c=4, n_cam=2):
    cv = rng.integers(0, 3, size=(n_cell, n_cam))
    return SampledColumnFeatures(T.Tensor(rng.normal(size=(n_cell, z, c))), np.full((n_cell, z), 1), cv, (2, 3))


def pool_oracle(cols, dist):
    n_cell, z, c = cols.features.shape
    out = np.zeros((c, 2, 3))
    for cell in range(n_cell):
        cv = cols.camera_visibility[cell].astype(float)
        w = cv / cv.sum() if cv.sum() > 0 else np.full(len(cv), 1 / len(cv))
        p = w @ dist
        for ch in range(c):
            out[ch, cell // 3, cell % 3] = sum(p[k] * cols.features.data[cell, k, ch] for k in range(z))
    return out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pool_by_height_oracle_and_invariants(seed):
    rng = np.random.default_rng(seed)
    cols = _columns(rng)
    dist = np.stack([softmax(rng.normal(size=3)) for _ in range(2)])
    got = pool_by_height(cols, dist).data
    assert np.allclose(got, pool_oracle(cols, dist), atol=1e-13)
    f = cols.features.data
    lo = f.min(axis=1).T.reshape(4, 2, 3)
    hi = f.max(axis=1).T.reshape(4, 2, 3)
    assert np.all(got >= lo - 1e-12) and np.all(got <= hi + 1e-12)
    scaled = SampledColumnFeatures(T.Tensor(f * 2.5), cols.visibility, cols.camera_visibility, (2, 3))
    assert np.allclose(pool_by_height(scaled, dist).data, 2.5 * got, atol=1e-13)
    perm = rng.permutation(3)
    permuted = SampledColumnFeatures(T.Tensor(f[:, perm]), cols.visibility, cols.camera_visibility, (2, 3))
    assert np.allclose(pool_by_height(permuted, dist[:, perm]).data, got, atol=1e-14)


def test_pool_one_hot_and_uniform():
    rng = np.random.default_rng(0)
    cols = _columns(rng)
    f = cols.features.data
    onehot = np.zeros((2, 3))
    onehot[:, 1] = 1.0
    assert np.allclose(pool_by_height(cols, onehot).data, f[:, 1].T.reshape(4, 2, 3), atol=1e-15)
    uni = np.full((2, 3), 1 / 3)
    assert np.allclose(pool_by_height(cols, uni).data, f.mean(axis=1).T.reshape(4, 2, 3), atol=1e-14)


# ---------------------------------------------------------------- fusion


def _fusion_params(c, s, seed, points=4, perturb=True):
    rng = np.random.default_rng(seed)
    p = ParamSet()
    init_fusion_params(p, c, s, rng, points=points)
    if perturb:
        for k in p.names():
            p.values[k] = p.values[k] + 0.3 * rng.normal(size=p.values[k].shape)
    return p


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_attention_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    p = _fusion_params(4, 1, seed % 1000)
    _, w = attention_weights(rng.normal(size=(4, 5, 6)) * 4, p)
    assert np.all(np.abs(w.data.sum(-1) - 1.0) < 1e-12)


def da_oracle(x, p, prefix="fusion.da"):
    """Per location: offsets, softmax weights and bilinear samples of the value map."""
    v = p.values
    c, h, w = x.shape
    flat = x.reshape(c, -1).T
    q = linear_ref(flat, v[f"{prefix}.q.w"], v[f"{prefix}.q.b"])
    off = linear_ref(q, v[f"{prefix}.off.w"], v[f"{prefix}.off.b"])
    logits = linear_ref(q, v[f"{prefix}.attn.w"], v[f"{prefix}.attn.b"])
    val = linear_ref(flat, v[f"{prefix}.v.w"], v[f"{prefix}.v.b"]).T.reshape(c, h, w)
    k = logits.shape[1]
    out = np.zeros((c, h, w))
    for j in range(h):
        for i in range(w):
            n = j * w + i
            a = softmax(logits[n])
            for kk in range(k):
                out[:, j, i] += a[kk] * bilinear_ref(val, i + off[n, 2 * kk], j + off[n, 2 * kk + 1])
    return out


def test_two_point_attention_at_one_location():
    rng = np.random.default_rng(5)
    p = _fusion_params(3, 1, 5, points=2)
    x = rng.normal(size=(3, 4, 5))
    got = deformable_attention(x, p).data
    ref = da_oracle(x, p)
    assert np.allclose(got[:, 2, 3], ref[:, 2, 3], atol=1e-13)
    assert np.allclose(got, ref, atol=1e-13)


def fusion_oracle(maps, p):
    x = np.concatenate(maps, axis=0)
    v = p.values
    cw = v["fusion.conv.w"][:, :, 0, 0]
    c, h, w = maps[0].shape
    conv = linear_ref(x.reshape(x.shape[0], -1).T, cw, v["fusion.conv.b"]).T.reshape(c, h, w)
    y = da_oracle(conv, p)
    yl = y.reshape(c, -1).T
    z = mlp_ref(yl, p, "fusion.mlp") + yl
    return z.T.reshape(c, h, w)


def test_fuse_multiscale_matches_step_by_step_oracle():
    rng = np.random.default_rng(6)
    p = _fusion_params(4, 2, 6)
    maps = [rng.normal(size=(4, 6, 5)) for _ in range(2)]
    got = fuse_multiscale(maps, p).data
    assert got.shape == (4, 6, 5)
    assert np.allclose(got, fusion_oracle(maps, p), atol=1e-12)


def test_zero_mlp_leaves_the_attention_term():
    rng = np.random.default_rng(7)
    p = _fusion_params(4, 2, 7)
    for k in p.names("fusion.mlp"):
        p.values[k] = np.zeros_like(p.values[k])
    maps = [rng.normal(size=(4, 5, 5)) for _ in range(2)]
    x = np.concatenate(maps)
    conv = T.conv2d(x[None], p["fusion.conv.w"], p["fusion.conv.b"]).data[0]
    assert np.array_equal(fuse_multiscale(maps, p).data, deformable_attention(conv, p).data)


def test_translation_consistency_with_zero_offsets():
    rng = np.random.default_rng(8)
    p = _fusion_params(3, 1, 8, perturb=False)
    for k in ("fusion.da.off.w", "fusion.da.off.b"):
        p.values[k] = np.zeros_like(p.values[k])
    x = rng.normal(size=(3, 7, 8))
    shifted = np.zeros_like(x)
    shifted[:, 1:, 1:] = x[:, :-1, :-1]
    a = fuse_multiscale([x], p).data
    b = fuse_multiscale([shifted], p).data
    assert np.allclose(b[:, 2:-1, 2:-1], a[:, 1:-2, 1:-2], atol=1e-13)


def test_diagonal_ring_init_keeps_samples_off_cell_lines():
    p = _fusion_params(4, 1, 0, perturb=False)
    ring = p.values["fusion.da.off.b"].reshape(-1, 2)
    assert np.allclose(np.abs(ring), 0.5)
    assert len({tuple(r) for r in np.sign(ring)}) == 4
