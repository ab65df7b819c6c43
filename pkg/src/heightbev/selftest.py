"""Executable versions of the documented closed-form examples.

Every check is a tiny deterministic computation with a known answer; the
whole suite is meant to run in well under a minute.
"""
from __future__ import annotations

import tempfile
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .elements import BACKGROUND, CLASSES, MapElement, Prediction
from .fg_separation import ForegroundMask, apply_masks, gt_masks, init_mask_params, mask_loss, predict_masks
from .fusion import deformable_attention, fuse_multiscale, init_fusion_params
from .geometry import BEVGrid, Camera, CameraRig, look_extrinsic, make_reference_grid, pixel_to_feature_coords, project_to_image
from .gradcheck import grad_check
from .height_bev import height_distribution, init_height_params, pool_by_height, sample_columns
from .losses import LossWeights, cls_loss, dir_loss, hungarian_match, pos_loss, total_loss
from .metrics import ap_at_threshold, chamfer_cd, matching_cd, mean_ap, metric_report
from .params import FormatError, ParamSet
from .tensor import Tape, Tensor, backward


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        tail = f" ({self.detail})" if self.detail and not self.passed else ""
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}{tail}"


CHECKS: list[tuple[str, Callable[[], None]]] = []


def check(name: str):
    def deco(fn):
        CHECKS.append((name, fn))
        return fn

    return deco


def close(a, b, tol=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    assert a.shape == b.shape, f"shape {a.shape} != {b.shape}"
    assert np.allclose(a, b, atol=tol, rtol=0), f"{a} != {b}"


_RNG = lambda k=0: np.random.default_rng(1000 + k)  # noqa: E731


# ---------------------------------------------------------------- tensor core


@check("conv2d: 1x1 unit kernel, zero bias is the identity")
def _():
    x = _RNG().normal(size=(3, 5, 6))
    k = np.zeros((3, 3, 1, 1))
    k[np.arange(3), np.arange(3)] = 1.0
    assert np.array_equal(T.conv2d(x, k, np.zeros(3)).data, x)


@check("conv2d: zero kernel with bias b gives constant b per channel")
def _():
    b = np.array([0.5, -2.0])
    out = T.conv2d(_RNG().normal(size=(3, 4, 4)), np.zeros((2, 3, 3, 3)), b).data
    close(out, np.broadcast_to(b[:, None, None], (2, 4, 4)), 0)


@check("softmax: equal logits over n bins give 1/n")
def _():
    close(T.softmax(np.zeros(7)).data, np.full(7, 1 / 7), 1e-15)


@check("softmax: shift invariance")
def _():
    x = _RNG().normal(size=9)
    close(T.softmax(x + 123.4).data, T.softmax(x).data, 1e-12)


@check("sigmoid(0) = 0.5")
def _():
    assert T.sigmoid(np.array(0.0)).item() == 0.5


@check("bilinear: integer pixel centre returns the pixel value")
def _():
    m = _RNG().normal(size=(2, 4, 5))
    out, flag = T.bilinear_sample(m, np.array([[3.0, 2.0]]))
    close(out.data[:, 0], m[:, 2, 3], 0)
    assert flag[0]


@check("bilinear: midpoint of four pixels returns their mean")
def _():
    m = _RNG().normal(size=(1, 4, 4))
    out, _ = T.bilinear_sample(m, np.array([[1.5, 0.5]]))
    close(out.data[0, 0], m[0, 0:2, 1:3].mean(), 1e-15)


@check("bilinear: far outside point gives zeros and flag false")
def _():
    out, flag = T.bilinear_sample(np.ones((3, 4, 4)), np.array([[-5.0, -5.0]]))
    close(out.data, np.zeros((3, 1)), 0)
    assert not flag[0]


@check("avg_pool: constant array pools to the constant")
def _():
    close(T.avg_pool(np.full((2, 3, 4), 1.75), (1, 2)).data, np.full(2, 1.75), 0)


@check("mean of [1, 2, 3, 4] is 2.5")
def _():
    assert T.mean(np.array([1.0, 2.0, 3.0, 4.0])).item() == 2.5


@check("linear: identity weights, zero bias leave input unchanged")
def _():
    x = _RNG().normal(size=(4, 3))
    assert np.array_equal(T.linear(x, np.eye(3), np.zeros(3)).data, x)


@check("linear: zero weights give the bias")
def _():
    b = np.array([1.0, -1.0])
    close(T.linear(_RNG().normal(size=(3, 4)), np.zeros((2, 4)), b).data, np.tile(b, (3, 1)), 0)


@check("positional encoding: channel 0 at row 0 is sin(0)")
def _():
    pe = T.positional_encoding(4, 4, 4)
    assert np.all(pe[0, 0, :] == 0.0)


@check("positional encoding: deterministic across calls")
def _():
    assert np.array_equal(T.positional_encoding(5, 6, 8), T.positional_encoding(5, 6, 8))


@check("backward: softmax cross-entropy gradient is zero at a perfect prediction")
def _():
    logits = Tensor(np.array([800.0, 0.0, 0.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.mul(T.log(T.softmax(logits)[0]), -1.0)
    grads = backward(tape, loss)
    assert np.all(grads[logits] == 0.0)


@check("grad_check flags a deliberately corrupted gradient")
def _():
    p = ParamSet({"w": _RNG().normal(size=(3, 2)), "b": np.zeros(3)})
    x = _RNG(1).normal(size=(5, 2))

    def build(ps):
        return T.sum_(T.sigmoid(T.linear(x, ps["w"], ps["b"])))

    from .gradcheck import analytic_grads

    g = analytic_grads(build, p)
    g["w"] = g["w"] * 1.5
    rep = grad_check(build, p, analytic=g)
    assert rep.max_rel_error > 1e-2 and not rep.passed


# ---------------------------------------------------------------- geometry


def _probe_rig(k=None, t=None, w=1600, h=900) -> CameraRig:
    k = np.array([[1000.0, 0, 800], [0, 1000.0, 450], [0, 0, 1]]) if k is None else k
    return CameraRig((Camera("c", k, np.eye(4) if t is None else t, w, h),))


@check("projection: optical-axis point maps to the principal point")
def _():
    u, v, d, ok = project_to_image(_probe_rig(), 0, [[0.0, 0.0, 10.0]])
    close([u[0], v[0], d[0]], [800, 450, 10], 1e-12)
    assert ok[0]


@check("projection: non-positive depth is invalid")
def _():
    *_, ok = project_to_image(_probe_rig(), 0, [[0.0, 0.0, -1.0], [0.1, 0.0, 0.0]])
    assert not ok.any()


@check("reference grid: 2x2 over defaults with Z=2 enumerates 8 corner points")
def _():
    ref = make_reference_grid(BEVGrid(nx=2, ny=2), z_count=2)
    pts = ref.points
    assert pts.shape == (8, 3)
    g = ref.grid
    xs, ys = g.xs, g.ys
    assert set(xs.tolist()) == {-7.5, 7.5} and set(ys.tolist()) == {-15.0, 15.0}
    assert set(ref.z_levels.tolist()) == {-2.0, 2.0}


@check("reference grid: Z=1 sits at the range midpoint")
def _():
    assert make_reference_grid(BEVGrid(), z_count=1).z_levels.tolist() == [0.0]


@check("feature coords: equal sizes are the identity")
def _():
    uf, vf = pixel_to_feature_coords(np.array([3.25]), np.array([7.5]), (96, 192), (96, 192))
    assert uf[0] == 3.25 and vf[0] == 7.5


@check("feature coords: stride 2 maps u=0.5 to 0")
def _():
    uf, _ = pixel_to_feature_coords(np.array([0.5]), np.array([0.5]), (96, 192), (48, 96))
    assert uf[0] == 0.0


# ---------------------------------------------------------------- fg separation


@check("mask net: all-zero parameters give 0.5 everywhere")
def _():
    p = ParamSet()
    init_mask_params(p, 3, _RNG())
    for k in p.names():
        p.values[k] = np.zeros_like(p.values[k])
    m = predict_masks([_RNG().normal(size=(2, 3, 4, 5))], p)
    assert np.all(m.levels[0].data == 0.5)


@check("mask net: zero input with zero biases gives 0.5")
def _():
    p = ParamSet()
    init_mask_params(p, 3, _RNG())
    for k in ("fg.conv1.b", "fg.conv2.b"):
        p.values[k] = np.zeros_like(p.values[k])
    m = predict_masks([np.zeros((1, 3, 4, 4))], p)
    assert np.all(m.levels[0].data == 0.5)


@check("mask application: F = 0 stays 0; M = 0.5 scales F by 1.5")
def _():
    f = _RNG().normal(size=(2, 3, 4, 4))
    z = apply_masks([np.zeros_like(f)], ForegroundMask([np.full((2, 1, 4, 4), 0.7)], "predicted"))
    assert np.all(z[0].data == 0)
    h = apply_masks([f], ForegroundMask([np.full((2, 1, 4, 4), 0.5)], "predicted"))
    close(h[0].data, 1.5 * f, 1e-15)


@check("gt mask: camera facing away from the BEV range is all zero")
def _():
    t = look_extrinsic([0.0, 0.0, 100.0], 0.0, -np.pi / 2)  # looking straight up from high above
    rig = CameraRig((Camera("up", np.array([[50.0, 0, 32], [0, 50.0, 16], [0, 0, 1]]), t, 64, 32),))
    m = gt_masks(rig, make_reference_grid(BEVGrid(nx=10, ny=20), 4), [(16, 32), (32, 64)])
    assert all(np.all(l == 0) for l in m.levels)


@check("gt mask: every marked cell contains a projected reference point")
def _():
    from .geometry import surround_rig

    rig = surround_rig(2, 64, 32, 90.0)
    ref = make_reference_grid(BEVGrid(nx=10, ny=20), 4)
    shapes = [(8, 16), (16, 32)]
    m = gt_masks(rig, ref, shapes)
    for (hf, wf), lvl in zip(shapes, m.levels):
        for ci in range(len(rig)):
            u, v, _, ok = project_to_image(rig, ci, ref.points)
            uf, vf = pixel_to_feature_coords(u[ok], v[ok], rig.image_size, (hf, wf))
            hits = set(zip(np.clip(np.rint(vf), 0, hf - 1).astype(int), np.clip(np.rint(uf), 0, wf - 1).astype(int)))
            marked = set(zip(*np.nonzero(lvl[ci, 0])))
            assert marked == hits


@check("mask loss: pred = gt gives 0")
def _():
    g = ForegroundMask([np.ones((1, 1, 2, 2))], "ground_truth")
    assert mask_loss(g, g).item() == 0.0


@check("mask loss: 2x2 example gives 0.3")
def _():
    p = ForegroundMask([np.array([[[[0.2, 0.4], [0.6, 0.8]]]])], "predicted")
    g = ForegroundMask([np.array([[[[0.0, 0.0], [1.0, 1.0]]]])], "ground_truth")
    close(mask_loss(p, g).item(), 0.3, 1e-15)


# ---------------------------------------------------------------- height bev


def _zero_height_params(c=4, z=5) -> ParamSet:
    p = ParamSet()
    init_height_params(p, c, z, _RNG())
    for k in p.names("height.mlp"):
        p.values[k] = np.zeros_like(p.values[k])
    return p


@check("height distribution: zero MLP gives uniform 1/Z")
def _():
    d = height_distribution(_RNG().normal(size=(3, 4, 4, 6)), _zero_height_params())
    close(d.data, np.full((3, 5), 0.2), 1e-15)


@check("height distribution: constant logit shift leaves it unchanged")
def _():
    p = _zero_height_params()
    p.values["height.mlp.w2"] = _RNG(2).normal(size=(5, 4))
    x = _RNG().normal(size=(2, 4, 4, 6))
    a = height_distribution(x, p).data
    p.values["height.mlp.b2"] = p.values["height.mlp.b2"] + 3.0
    close(height_distribution(x, p).data, a, 1e-12)


def _overhead_setup():
    # one camera 10 m above the origin looking straight down; the 1x1 grid centre projects to pixel (8, 4)
    k = np.array([[20.0, 0, 8.0], [0, 20.0, 4.0], [0, 0, 1]])
    rig = CameraRig((Camera("down", k, look_extrinsic([0.0, 0.0, 10.0], 0.0, np.pi / 2), 17, 9),))
    ref = make_reference_grid(BEVGrid(-1, 1, -1, 1, 1, 1), z_count=1)
    return rig, ref


@check("column sampling: point at an integer pixel centre returns that pixel")
def _():
    rig, ref = _overhead_setup()
    f = _RNG().normal(size=(1, 3, 9, 17))
    cols = sample_columns([f], rig, ref)[0]
    close(cols.features.data[0, 0], f[0, :, 4, 8], 1e-12)
    assert cols.visibility[0, 0] == 1


@check("column sampling: point behind all cameras gives zeros and visibility 0")
def _():
    rig, _ = _overhead_setup()
    ref = make_reference_grid(BEVGrid(-1, 1, -1, 1, 1, 1), z_count=1, z_min=20.0, z_max=20.0)
    cols = sample_columns([_RNG().normal(size=(1, 3, 9, 17))], rig, ref)[0]
    assert np.all(cols.features.data == 0) and cols.visibility[0, 0] == 0


def _columns(z=4, c=3):
    from .height_bev import SampledColumnFeatures

    feats = _RNG().normal(size=(6, z, c))
    return SampledColumnFeatures(Tensor(feats), np.ones((6, z)), np.ones((6, 1)), (2, 3)), feats


@check("height pooling: uniform distribution is the mean over z")
def _():
    cols, f = _columns()
    bev = pool_by_height(cols, np.full((1, 4), 0.25)).data
    close(bev, f.mean(axis=1).T.reshape(3, 2, 3), 1e-15)


@check("height pooling: one-hot distribution selects that level")
def _():
    cols, f = _columns()
    bev = pool_by_height(cols, np.array([[0.0, 0.0, 1.0, 0.0]])).data
    assert np.array_equal(bev, f[:, 2].T.reshape(3, 2, 3))


# ---------------------------------------------------------------- fusion


def _identity_da(p: ParamSet, c: int, prefix="fusion.da"):
    for k in p.names(prefix):
        p.values[k] = np.zeros_like(p.values[k])
    p.values[f"{prefix}.v.w"] = np.eye(c)


@check("deformable attention: zero offsets, K=1, identity values reproduce the input")
def _():
    c = 4
    p = ParamSet()
    init_fusion_params(p, c, 1, _RNG(), points=1)
    _identity_da(p, c)
    x = _RNG().normal(size=(c, 5, 6))
    close(deformable_attention(x, p).data, x, 1e-15)


@check("deformable attention: constant map gives constant output")
def _():
    c = 3
    p = ParamSet()
    init_fusion_params(p, c, 1, _RNG(), points=4)
    p.values["fusion.da.off.w"] = np.zeros_like(p.values["fusion.da.off.w"])
    p.values["fusion.da.off.b"] = np.zeros_like(p.values["fusion.da.off.b"])
    x = np.full((c, 4, 5), 0.7)
    out = deformable_attention(x, p).data
    expect = p.values["fusion.da.v.w"] @ np.full(c, 0.7) + p.values["fusion.da.v.b"]
    close(out, np.broadcast_to(expect[:, None, None], out.shape), 1e-12)


@check("fusion: s=1 identity conv, identity DA, zero MLP pass the map through")
def _():
    c = 4
    p = ParamSet()
    init_fusion_params(p, c, 1, _RNG(), points=1)
    p.values["fusion.conv.w"] = np.eye(c).reshape(c, c, 1, 1)
    p.values["fusion.conv.b"] = np.zeros(c)
    _identity_da(p, c)
    for k in p.names("fusion.mlp"):
        p.values[k] = np.zeros_like(p.values[k])
    x = _RNG().normal(size=(c, 3, 5))
    close(fuse_multiscale([x], p).data, x, 1e-15)


@check("fusion: three scales of C channels fuse to C x ny x nx")
def _():
    c = 4
    p = ParamSet()
    init_fusion_params(p, c, 3, _RNG())
    assert p.values["fusion.conv.w"].shape == (c, 3 * c, 1, 1)
    out = fuse_multiscale([_RNG(i).normal(size=(c, 3, 5)) for i in range(3)], p)
    assert out.shape == (c, 3, 5)


# ---------------------------------------------------------------- losses


def _line(n=5, dx=0.0):
    return MapElement("divider", np.stack([np.linspace(0, 4, n) + dx, np.zeros(n)], 1))


@check("focal loss: perfect prediction is 0")
def _():
    assert cls_loss(np.array([0.0, 1.0, 0.0, 0.0]), 1).item() == 0.0


@check("focal loss: vanishing true-class probability is clamped at 1e-12")
def _():
    v = cls_loss(np.array([1.0, 0.0, 0.0, 0.0]), 2).item()
    close(v, -0.25 * np.log(1e-12), 1e-12)


@check("point loss: identical, reversed and shifted elements")
def _():
    g = _line()
    assert pos_loss(g.points, g)[0].item() == 0.0
    assert pos_loss(g.points[::-1], g)[0].item() == 0.0
    close(pos_loss(g.points + [1.0, 0.0], g)[0].item(), 1.0, 1e-15)


@check("direction loss: identical is 0, opposite edges give 2")
def _():
    g = _line()
    assert dir_loss(g.points, g.points).item() == 0.0
    close(dir_loss(g.points[::-1], g.points).item(), 2.0, 1e-15)


@check("matching: one prediction identical to one gt is matched; no gts -> all background")
def _():
    g = _line(20)
    probs = np.array([[0.9, 0.05, 0.0, 0.05]])
    rows, cols = hungarian_match(probs, g.points[None], [g])
    assert rows.tolist() == [0] and cols.tolist() == [0]
    rows, _ = hungarian_match(np.tile(probs, (3, 1)), np.tile(g.points[None], (3, 1, 1)), [])
    assert len(rows) == 0
    _, br = total_loss(np.tile(np.eye(4)[BACKGROUND], (3, 1)), np.zeros((3, 20, 2)), [], None, None)
    assert br["cls"] == 0.0


@check("total loss: perfect predictions and masks give 0; gamma=0 drops the mask term")
def _():
    g = _line(20)
    probs = np.array([np.eye(4)[g.label], np.eye(4)[BACKGROUND]])
    pts = np.stack([g.points, g.points + 5])
    m = ForegroundMask([np.ones((1, 1, 2, 2))], "ground_truth")
    loss, _ = total_loss(probs, pts, [g], m, m)
    assert loss.item() == 0.0
    bad = ForegroundMask([np.zeros((1, 1, 2, 2))], "predicted")
    l0, br = total_loss(probs, pts, [g], bad, m, LossWeights(mask=0.0))
    assert l0.item() == 0.0 and br["mask"] > 0


# ---------------------------------------------------------------- metrics


@check("chamfer: A = B gives 0; {(0,0)} vs {(3,4)} gives 50")
def _():
    a = _RNG().normal(size=(6, 2))
    assert chamfer_cd(a, a) == 0.0
    assert chamfer_cd([(0.0, 0.0)], [(3.0, 4.0)]) == 50.0


@check("matching distance: identical gives 0; (0,0) vs (3,4) gives 5")
def _():
    g = _line(20)
    assert matching_cd(g, g) == 0.0
    assert matching_cd(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]])) == 5.0


@check("AP: one perfect prediction gives 1 at every threshold; none gives 0")
def _():
    g = _line(20)
    p = Prediction(MapElement("divider", g.points.copy()), 0.9)
    for tau in (0.2, 0.5, 1.0, 1.5):
        assert ap_at_threshold([p], [g], "divider", tau) == 1.0
        assert ap_at_threshold([], [g], "divider", tau) == 0.0


@check("mAP: all classes perfect gives 1; absent classes are excluded")
def _():
    gts = [_line(20), MapElement("boundary", _line(20, 3.0).points)]
    preds = [Prediction(MapElement(e.cls, e.points.copy()), 1.0) for e in gts]
    rep = mean_ap(preds, gts)
    assert rep["mAP"] == 1.0 and "pedestrian_crossing" not in rep["per_class"]


# ---------------------------------------------------------------- synth


def _tiny_scene_config(**kw):
    from .synth import SceneConfig

    base = dict(image_width=64, image_height=32, channels=8, grid=BEVGrid(nx=10, ny=20))
    base.update(kw)
    return SceneConfig(**base)


@check("synth: same seed twice gives identical scenes and features")
def _():
    from .synth import generate_scene, render_features

    cfg = _tiny_scene_config()
    a, b = generate_scene(11, cfg), generate_scene(11, cfg)
    assert a == b
    fa, fb = render_features(a), render_features(b)
    assert all(np.array_equal(x, y) for x, y in zip(fa.levels, fb.levels))


@check("synth: zero height amplitude gives a flat ground")
def _():
    from .synth import generate_scene

    sc = generate_scene(3, _tiny_scene_config(height_amplitude=0.0))
    xs, ys = np.meshgrid(np.linspace(-15, 15, 7), np.linspace(-30, 30, 9))
    assert np.all(sc.height(xs, ys) == 0.0)


@check("synth: an empty map renders background channels only")
def _():
    from .synth import SyntheticScene, background_channels, generate_scene, render_features, truncation_radii

    sc = generate_scene(5, _tiny_scene_config())
    empty = SyntheticScene(sc.seed, [], sc.height, sc.rig, sc.config)
    fp = render_features(empty)
    n_cls = len(truncation_radii(8)) * len(CLASSES)
    for si, lvl in enumerate(fp.levels):
        assert np.all(lvl[:, :n_cls] == 0)
        for cam in range(lvl.shape[0]):
            assert np.array_equal(lvl[cam, n_cls:], background_channels(empty, cam, si, lvl.shape[2:], 8 - n_cls))


@check("synth: a divider's projected path has zero distance")
def _():
    from .synth import SyntheticScene, class_distances, element_points_3d, generate_scene

    sc = generate_scene(5, _tiny_scene_config())
    div = [e for e in sc.elements if e.cls == "divider"][:1]
    one = SyntheticScene(sc.seed, div, sc.height, sc.rig, sc.config)
    pts = element_points_3d(one)["divider"]
    shape = (32, 64)
    hit_any = False
    for cam in range(len(sc.rig)):
        d = class_distances(one, cam, shape)[0]
        u, v, _, ok = project_to_image(sc.rig, cam, pts)
        if ok.any():
            hit_any = True
            assert np.all(d[np.clip(np.rint(v[ok]).astype(int), 0, 31), np.clip(np.rint(u[ok]).astype(int), 0, 63)] == 0)
    assert hit_any


@check("dataset: save/load round trip; corrupted magic rejected")
def _():
    from .synth import build_datasets, load_dataset, save_dataset

    cfg = _tiny_scene_config()
    ds = build_datasets(cfg, 4, 2, 1)
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "data"
        save_dataset(out, ds)
        back = load_dataset(out, "train")
        assert back.scenes == ds["train"].scenes
        for s in back.scenes:
            assert all(np.array_equal(a, b) for a, b in zip(back.pyramid(s).levels, ds["train"].pyramid(s).levels))
        blob = next((out / "features").iterdir())
        data = bytearray(blob.read_bytes())
        data[:4] = b"XXXX"
        blob.write_bytes(bytes(data))
        try:
            load_dataset(out, "train")
        except FormatError:
            pass
        else:
            raise AssertionError("corrupted magic accepted")


# ---------------------------------------------------------------- pipeline


def tiny_model_config(**kw):
    from .model import ModelConfig

    base = dict(
        channels=8, z_count=4, grid=BEVGrid(nx=10, ny=20), n_queries=8, head_hidden=16, head_embed=4,
        sample_size=3, batch_size=2, scene=_tiny_scene_config(),
    )
    base.update(kw)
    return ModelConfig(**base)


@check("forward: toggles off and zeroed head put every prediction at the origin with uniform probs")
def _():
    from .model import forward, init_params, zero_head
    from .synth import generate_scene, render_features

    cfg = tiny_model_config(height_mechanism=False, fg_separation=False, multiscale_fusion=False)
    p = init_params(cfg)
    zero_head(p)
    sc = generate_scene(2, cfg.scene)
    out = forward(render_features(sc).levels, sc.rig, cfg, p)
    assert np.all(out.points.data == 0)
    close(out.probs.data, np.full((cfg.n_queries, len(CLASSES) + 1), 0.25), 1e-15)


@check("forward: output shapes are N_q x n_pts x 2; toggles keep the parameter count")
def _():
    from .model import forward, init_params
    from .synth import generate_scene, render_features

    cfg = tiny_model_config()
    sc = generate_scene(2, cfg.scene)
    out = forward(render_features(sc).levels, sc.rig, cfg, init_params(cfg))
    assert out.points.shape == (cfg.n_queries, cfg.n_pts, 2)
    assert out.probs.shape == (cfg.n_queries, len(CLASSES) + 1)
    off = tiny_model_config(height_mechanism=False, fg_separation=False, multiscale_fusion=False)
    assert init_params(off).count() == init_params(cfg).count()


@check("training: equal seeds give identical loss curves")
def _():
    from .synth import build_datasets
    from .train import train

    cfg = tiny_model_config()
    ds = build_datasets(cfg.scene, 9, 4, 1)["train"]
    a = train(ds, cfg, seed=3, epochs=2).history
    b = train(ds, cfg, seed=3, epochs=2).history
    assert a == b


@check("training: with gamma = 0 the mask loss contributes exactly zero gradient")
def _():
    from .model import forward, init_params, scene_gt_masks
    from .synth import generate_scene, render_features

    cfg = tiny_model_config(gamma=0.0)
    p = init_params(cfg)
    sc = generate_scene(2, cfg.scene)
    fp = render_features(sc)
    gt = scene_gt_masks(sc.rig, cfg, fp.shapes)
    grads = []
    for masks_gt in (gt, None):
        p.zero_grad()
        with Tape() as tape:
            o = forward(fp.levels, sc.rig, cfg, p)
            loss, _ = total_loss(o.probs, o.points, sc.elements, o.masks if masks_gt is not None else None, masks_gt, cfg.weights)
        backward(tape, loss)
        grads.append({k: v.copy() for k, v in p.grads.items() if k.startswith("fg.")})
    assert all(np.array_equal(grads[0][k], grads[1][k]) for k in grads[0])


@check("evaluation: ground truth as predictions gives mAP 1; no predictions give 0")
def _():
    from .synth import generate_scene

    cfg = _tiny_scene_config()
    scenes = [generate_scene(s, cfg) for s in (1, 2, 3)]
    gts = {str(s.seed): s.elements for s in scenes}
    preds = {k: [Prediction(MapElement(e.cls, e.points.copy()), 1.0) for e in v] for k, v in gts.items()}
    rep = metric_report(preds, gts)
    assert rep["mAP_general"] == 1.0 and rep["mAP_tighter"] == 1.0
    rep0 = metric_report({k: [] for k in gts}, gts)
    assert rep0["mAP_general"] == 0.0 and rep0["mAP_tighter"] == 0.0


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            fn()
            results.append(CheckResult(name, True, seconds=time.perf_counter() - t0))
        except Exception as exc:  # noqa: BLE001 - every failure becomes a report line
            detail = f"{type(exc).__name__}: {exc}" if str(exc) else traceback.format_exc(limit=2).strip().splitlines()[-1]
            results.append(CheckResult(name, False, detail, time.perf_counter() - t0))
    return results
