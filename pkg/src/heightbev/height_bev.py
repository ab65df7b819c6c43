"""Perspective-to-BEV transform driven by a predicted height distribution.

Each BEV cell owns a vertical column of reference points. The column is
sampled from every camera at every pyramid scale, then collapsed along Z with
per-camera height probabilities estimated from the coarsest features.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .geometry import CameraRig, ReferencePointGrid, pixel_to_feature_coords, project_to_image
from .params import ParamSet, uniform_init
from .tensor import ShapeError, Tensor, bilinear_weights

PREFIX = "height"


def init_height_params(params: ParamSet, channels: int, z_count: int, rng: np.random.Generator) -> None:
    params.add(f"{PREFIX}.query", np.zeros(channels))
    params.add(f"{PREFIX}.mlp.w1", uniform_init(rng, (channels, channels), channels))
    params.add(f"{PREFIX}.mlp.b1", uniform_init(rng, (channels,), channels))
    # zero output layer: the distribution starts exactly uniform, like the fallback
    params.add(f"{PREFIX}.mlp.w2", np.zeros((z_count, channels)))
    params.add(f"{PREFIX}.mlp.b2", np.zeros(z_count))


def height_distribution(top, params: ParamSet) -> Tensor:
    """Per-camera probabilities over height bins from (n_cam, C, H, W) top-level features."""
    top = T.as_tensor(top)
    query = params[f"{PREFIX}.query"]
    n, c, h, w = top.shape
    if query.shape != (c,):
        raise ShapeError(f"query length {query.shape[0]} does not match {c} feature channels")
    pe = T.positional_encoding(h, w, c)
    pooled = T.avg_pool(top + pe, (2, 3))
    logits = T.mlp(pooled + query, params, f"{PREFIX}.mlp")
    return T.softmax(logits, axis=-1)


@dataclass
class ColumnGeometry:
    """Constant sampling operators for one (rig, reference grid, pyramid) triple."""

    matrices: list[sp.csr_matrix]  # per scale, (n_cell * Z, n_cam * H * W)
    visibility: np.ndarray  # (n_cell, Z) number of cameras seeing each point
    camera_visibility: np.ndarray  # (n_cell, n_cam) points of the column seen per camera
    grid_shape: tuple[int, int]  # (ny, nx)
    z_count: int


_GEOMETRY_CACHE: dict = {}


def column_geometry(rig: CameraRig, ref_grid: ReferencePointGrid, shapes: Sequence[tuple[int, int]]) -> ColumnGeometry:
    key = (rig.key(), ref_grid.grid, ref_grid.z_count, ref_grid.z_min, ref_grid.z_max, tuple(map(tuple, shapes)))
    hit = _GEOMETRY_CACHE.get(key)
    if hit is not None:
        return hit
    pts = ref_grid.points
    n_pts, n_cam = len(pts), len(rig)
    image_size = rig.image_size
    proj = [project_to_image(rig, ci, pts) for ci in range(n_cam)]
    seen = np.stack([p[3] for p in proj], axis=1)  # (n_pts, n_cam)
    count = seen.sum(axis=1)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    mats = []
    for hf, wf in shapes:
        rows_all, cols_all, vals_all = [], [], []
        for ci, (u, v, _, valid) in enumerate(proj):
            idx = np.flatnonzero(valid)
            uf, vf = pixel_to_feature_coords(u[idx], v[idx], image_size, (hf, wf))
            rr, cc, ww, ok, _ = bilinear_weights(np.stack([uf, vf], axis=1), hf, wf)
            rows_all.append(np.repeat(idx, 4).reshape(-1, 4)[ok])
            cols_all.append((ci * hf * wf + rr * wf + cc)[ok])
            vals_all.append((ww * inv[idx, None])[ok])
        m = sp.csr_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(n_pts, n_cam * hf * wf),
        )
        mats.append(m)
    g = ref_grid.grid
    z = ref_grid.z_count
    geo = ColumnGeometry(
        matrices=mats,
        visibility=count.reshape(-1, z),
        camera_visibility=seen.reshape(-1, z, n_cam).sum(axis=1),
        grid_shape=(g.ny, g.nx),
        z_count=z,
    )
    _GEOMETRY_CACHE[key] = geo
    return geo


@dataclass
class SampledColumnFeatures:
    features: Tensor  # (n_cell, Z, C)
    visibility: np.ndarray  # (n_cell, Z)
    camera_visibility: np.ndarray  # (n_cell, n_cam)
    grid_shape: tuple[int, int]

    @property
    def camera_weights(self) -> np.ndarray:
        """Row-normalised camera attribution; unseen cells fall back to uniform."""
        cv = self.camera_visibility.astype(np.float64)
        tot = cv.sum(axis=1, keepdims=True)
        return np.where(tot > 0, cv / np.where(tot > 0, tot, 1.0), 1.0 / cv.shape[1])


def sample_columns(pyramid: Sequence, rig: CameraRig, ref_grid: ReferencePointGrid, geometry: ColumnGeometry | None = None) -> list[SampledColumnFeatures]:
    """Bilinear column samples per scale, averaged over the cameras that see each point."""
    pyramid = [T.as_tensor(f) for f in pyramid]
    geo = geometry or column_geometry(rig, ref_grid, [f.shape[2:] for f in pyramid])
    z = geo.z_count
    out = []
    for feats, m in zip(pyramid, geo.matrices):
        n, c, h, w = feats.shape
        flat = T.reshape(T.transpose(feats, (0, 2, 3, 1)), (n * h * w, c))
        cols = T.sparse_matmul(m, flat)
        out.append(
            SampledColumnFeatures(
                features=T.reshape(cols, (-1, z, c)),
                visibility=geo.visibility,
                camera_visibility=geo.camera_visibility,
                grid_shape=geo.grid_shape,
            )
        )
    return out


def pool_by_height(columns: SampledColumnFeatures, dist) -> Tensor:
    """Height-weighted sum along Z, returning a (C, ny, nx) BEV map.

    ``dist`` is (n_cam, Z); each cell uses the visibility-weighted mean of the
    distributions of the cameras that observe it.
    """
    dist = T.as_tensor(dist)
    feats = columns.features
    n_cell, z, c = feats.shape
    if dist.shape[-1] != z:
        raise ShapeError(f"distribution has {dist.shape[-1]} bins, columns have {z}")
    if dist.shape[0] != columns.camera_visibility.shape[1]:
        raise ShapeError(f"distribution for {dist.shape[0]} cameras, columns for {columns.camera_visibility.shape[1]}")
    cell_p = T.matmul(columns.camera_weights, dist)  # (n_cell, Z)
    bev = T.sum_(feats * T.reshape(cell_p, (n_cell, z, 1)), axis=1)  # (n_cell, C)
    ny, nx = columns.grid_shape
    return T.reshape(T.transpose(bev, (1, 0)), (c, ny, nx))
