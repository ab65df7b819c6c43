"""Gradient-check suites: per-module graphs and the full pipeline at desk size."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .fg_separation import apply_masks, gt_masks, init_mask_params, mask_loss, predict_masks
from .fusion import fuse_multiscale, init_fusion_params
from .geometry import BEVGrid, make_reference_grid, surround_rig
from .gradcheck import GradCheckReport, grad_check
from .height_bev import height_distribution, init_height_params, pool_by_height, sample_columns
from .losses import hungarian_match, total_loss
from .model import ModelConfig, forward, init_params, scene_gt_masks
from .params import ParamSet
from .synth import generate_scene, render_features


def perturb(params: ParamSet, rng: np.random.Generator, scale: float = 0.05) -> None:
    """Move every parameter off its initial value so zero-initialised tensors are exercised."""
    for k in params.names():
        v = params.values[k]
        params.values[k] = v + scale * rng.standard_normal(v.shape)


def _probe(x: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    """Scalar readout with random weights, so every output entry matters."""
    return T.sum_(x * rng.standard_normal(x.shape))


def module_reports(tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0) -> dict[str, GradCheckReport]:
    """Small standalone graphs for each module; every entry of every parameter is probed."""
    rng = np.random.default_rng(seed)
    rig = surround_rig(n_cameras=2, width=32, height=16, hfov_deg=90)
    grid = BEVGrid(-6, 6, -8, 8, 6, 8)
    ref = make_reference_grid(grid, 4)
    shapes = [(4, 8), (8, 16)]
    c = 4
    feats = [rng.uniform(-1, 1, (2, c) + s) for s in shapes]
    out: dict[str, GradCheckReport] = {}

    p = ParamSet()
    init_mask_params(p, c, rng)
    gt = gt_masks(rig, ref, shapes)
    w = rng.standard_normal((2, c) + shapes[1])

    def mask_graph(ps):
        m = predict_masks(feats, ps)
        return mask_loss(m, gt) + T.sum_(apply_masks(feats, m)[1] * w)

    out["fg-separation"] = grad_check(mask_graph, p, tolerance, step, per_param=None)

    p = ParamSet()
    init_height_params(p, c, ref.z_count, rng)
    perturb(p, rng)
    w_bev = rng.standard_normal((c, grid.ny, grid.nx))

    def height_graph(ps):
        dist = height_distribution(feats[0], ps)
        cols = sample_columns(feats, rig, ref)
        return T.sum_(pool_by_height(cols[0], dist) * w_bev) + T.sum_(pool_by_height(cols[1], dist) * w_bev)

    out["height-bev"] = grad_check(height_graph, p, tolerance, step, per_param=None)

    p = ParamSet()
    init_fusion_params(p, c, 2, rng)
    perturb(p, rng)
    maps = [rng.uniform(-1, 1, (c, grid.ny, grid.nx)) for _ in range(2)]
    w_f = rng.standard_normal((c, grid.ny, grid.nx))
    out["fusion"] = grad_check(lambda ps: T.sum_(fuse_multiscale(maps, ps) * w_f), p, tolerance, step, per_param=None)
    return out


def end_to_end_builder(cfg: ModelConfig, scene_seed: int = 0, param_seed: int = 0):
    """Params and a loss closure for the whole pipeline on one rendered scene.

    The Hungarian assignment is fixed at the starting point so the loss is a
    smooth function of the parameters around it.
    """
    rng = np.random.default_rng([param_seed, 0x6C])
    params = init_params(cfg, param_seed)
    perturb(params, rng, 0.02)
    scene = generate_scene(scene_seed, cfg.scene)
    fp = render_features(scene, cfg.scales, cfg.channels)
    gt = scene_gt_masks(scene.rig, cfg, fp.shapes) if cfg.fg_separation else None
    out = forward(fp.levels, scene.rig, cfg, params)
    match = hungarian_match(out.probs.data, out.points.data, scene.elements, cfg.weights)

    def build(ps):
        o = forward(fp.levels, scene.rig, cfg, ps)
        loss, _ = total_loss(o.probs, o.points, scene.elements, o.masks, gt, cfg.weights, match=match)
        return loss

    return build, params


def full_report(cfg: ModelConfig, per_param: int = 4, tolerance: float = 1e-4, step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    build, params = end_to_end_builder(cfg, seed, seed)
    return grad_check(build, params, tolerance, step, per_param=per_param, seed=seed)
