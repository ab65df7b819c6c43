"""Foreground/background separation of perspective-view features.

A small conv stack predicts a per-cell foreground probability, which then
re-weights the features residually. Ground truth comes for free by projecting
the reference-point lattice into every camera.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import CameraRig, ReferencePointGrid, pixel_to_feature_coords, project_to_image
from .params import ParamSet, uniform_init
from .tensor import ShapeError, Tensor

PREFIX = "fg"


@dataclass
class FeaturePyramid:
    """Per-scale arrays of shape (n_cameras, C, H_i, W_i); scale 0 is the coarsest."""

    levels: list[np.ndarray]

    def __post_init__(self):
        if not self.levels:
            raise ShapeError("a feature pyramid needs at least one scale")
        n, c = self.levels[0].shape[:2]
        for lvl in self.levels:
            if lvl.ndim != 4 or lvl.shape[:2] != (n, c):
                raise ShapeError(f"pyramid level {lvl.shape} inconsistent with ({n}, {c}, ...)")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [lvl.shape[2:] for lvl in self.levels]

    @property
    def channels(self) -> int:
        return self.levels[0].shape[1]

    @property
    def n_cameras(self) -> int:
        return self.levels[0].shape[0]


@dataclass
class ForegroundMask:
    levels: list  # Tensor or ndarray of shape (n_cameras, 1, H_i, W_i)
    kind: str  # "predicted" | "ground_truth"


def init_mask_params(params: ParamSet, channels: int, rng: np.random.Generator, kernel: int = 3, hidden: int | None = None) -> None:
    hidden = hidden or channels
    fan1, fan2 = channels * kernel * kernel, hidden * kernel * kernel
    params.add(f"{PREFIX}.conv1.w", uniform_init(rng, (hidden, channels, kernel, kernel), fan1))
    params.add(f"{PREFIX}.conv1.b", uniform_init(rng, (hidden,), fan1))
    params.add(f"{PREFIX}.conv2.w", uniform_init(rng, (1, hidden, kernel, kernel), fan2))
    params.add(f"{PREFIX}.conv2.b", uniform_init(rng, (1,), fan2))


def predict_masks(pyramid: Sequence, params: ParamSet) -> ForegroundMask:
    """sigmoid(conv(relu(conv(F)))) per scale, weights shared across scales and cameras."""
    w1, b1 = params[f"{PREFIX}.conv1.w"], params[f"{PREFIX}.conv1.b"]
    w2, b2 = params[f"{PREFIX}.conv2.w"], params[f"{PREFIX}.conv2.b"]
    out = []
    for feats in pyramid:
        feats = T.as_tensor(feats)
        if feats.shape[1] != w1.shape[1]:
            raise ShapeError(f"mask net expects {w1.shape[1]} channels, got features {feats.shape}")
        h = T.relu(T.conv2d(feats, w1, b1))
        out.append(T.sigmoid(T.conv2d(h, w2, b2)))
    return ForegroundMask(out, "predicted")


def apply_masks(pyramid: Sequence, masks: ForegroundMask) -> list[Tensor]:
    """F + F * M per scale, the mask broadcast over channels."""
    if len(pyramid) != len(masks.levels):
        raise ShapeError(f"{len(pyramid)} feature scales vs {len(masks.levels)} mask scales")
    out = []
    for feats, m in zip(pyramid, masks.levels):
        feats, m = T.as_tensor(feats), T.as_tensor(m)
        if m.shape[0] != feats.shape[0] or m.shape[1] != 1 or m.shape[2:] != feats.shape[2:]:
            raise ShapeError(f"mask {m.shape} does not align with features {feats.shape}")
        out.append(feats + feats * m)
    return out


def gt_masks(
    rig: CameraRig,
    ref_grid: ReferencePointGrid,
    pyramid_shapes: Sequence[tuple[int, int]],
    dilation: int = 0,
) -> ForegroundMask:
    """Binary masks marking every feature cell hit by a projected reference point."""
    image_size = rig.image_size
    pts = ref_grid.points
    levels = []
    for hf, wf in pyramid_shapes:
        m = np.zeros((len(rig), 1, hf, wf))
        for ci in range(len(rig)):
            u, v, _, valid = project_to_image(rig, ci, pts)
            uf, vf = pixel_to_feature_coords(u[valid], v[valid], image_size, (hf, wf))
            col = np.clip(np.rint(uf).astype(np.int64), 0, wf - 1)
            row = np.clip(np.rint(vf).astype(np.int64), 0, hf - 1)
            m[ci, 0, row, col] = 1.0
            if dilation > 0:
                m[ci, 0] = _dilate(m[ci, 0], dilation)
        levels.append(m)
    return ForegroundMask(levels, "ground_truth")


def _dilate(m: np.ndarray, radius: int) -> np.ndarray:
    from scipy.ndimage import binary_dilation

    return binary_dilation(m > 0, iterations=radius).astype(np.float64)


def mask_loss(predicted: ForegroundMask, gt: ForegroundMask) -> Tensor:
    """Manhattan distance per (scale, camera), normalised by cell count, summed."""
    if len(predicted.levels) != len(gt.levels):
        raise ShapeError(f"{len(predicted.levels)} predicted scales vs {len(gt.levels)} ground-truth scales")
    total = None
    for p, g in zip(predicted.levels, gt.levels):
        p, g = T.as_tensor(p), T.as_tensor(g)
        if p.shape != g.shape:
            raise ShapeError(f"mask shapes differ: {p.shape} vs {g.shape}")
        cells = int(np.prod(p.shape[1:]))
        term = T.sum_(T.abs_(p - g)) * (1.0 / cells)
        total = term if total is None else total + term
    return total


def write_pgm(path, mask: np.ndarray) -> None:
    """Dump a single (H, W) mask as binary PGM (P5, maxval 255)."""
    m = np.clip(np.rint(255 * np.asarray(mask, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + m.tobytes())
