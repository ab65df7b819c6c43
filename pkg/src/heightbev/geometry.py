"""Pinhole cameras, the BEV grid and the 3-D reference-point lattice.

Ego frame: X lateral, Y forward, Z up. Camera frame follows the usual
computer-vision convention (x right, y down, z along the optical axis).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

DEPTH_EPS = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Camera:
    name: str
    intrinsic: np.ndarray  # (3, 3)
    extrinsic: np.ndarray  # (4, 4) ego -> camera
    width: int
    height: int

    def __post_init__(self):
        k = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.extrinsic, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsic", k)
        object.__setattr__(self, "extrinsic", t)
        if k[1, 0] != 0 or k[2, 0] != 0 or k[2, 1] != 0 or k[2, 2] != 1:
            raise GeometryError(f"camera {self.name}: intrinsic matrix must be upper triangular with K[2,2]=1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise GeometryError(f"camera {self.name}: focal lengths must be positive")
        r = t[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9, rtol=0) or not np.allclose(t[3], [0, 0, 0, 1]):
            raise GeometryError(f"camera {self.name}: extrinsic rotation is not orthonormal")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"camera {self.name}: bad image size {self.width}x{self.height}")

    def __eq__(self, other):
        return (
            isinstance(other, Camera)
            and self.name == other.name
            and np.array_equal(self.intrinsic, other.intrinsic)
            and np.array_equal(self.extrinsic, other.extrinsic)
            and (self.width, self.height) == (other.width, other.height)
        )

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "K": self.intrinsic.reshape(-1).tolist(),
            "T": self.extrinsic.reshape(-1).tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        if len(d["K"]) != 9 or len(d["T"]) != 16:
            raise GeometryError(f"camera {d.get('name')}: K needs 9 numbers and T 16")
        return cls(d["name"], np.array(d["K"]), np.array(d["T"]), int(d["width"]), int(d["height"]))


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple[Camera, ...]

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if not self.cameras:
            raise GeometryError("a rig needs at least one camera")

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        """(height, width) shared by all cameras."""
        sizes = {(c.height, c.width) for c in self.cameras}
        if len(sizes) != 1:
            raise GeometryError(f"cameras disagree on image size: {sorted(sizes)}")
        return sizes.pop()

    def to_json(self) -> list[dict]:
        return [c.to_json() for c in self.cameras]

    @classmethod
    def from_json(cls, data) -> "CameraRig":
        return cls(tuple(Camera.from_json(d) for d in data))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "CameraRig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def key(self) -> bytes:
        """Hashable digest of the rig, used for geometry caches."""
        return b"".join(
            c.intrinsic.tobytes() + c.extrinsic.tobytes() + np.array([c.width, c.height]).tobytes()
            for c in self.cameras
        )


def look_extrinsic(position, yaw: float, pitch: float) -> np.ndarray:
    """Ego->camera transform for a camera at ``position``.

    ``yaw`` rotates the viewing direction counter-clockwise from +Y (radians),
    ``pitch`` tilts it downward.
    """
    fwd = np.array([-np.sin(yaw) * np.cos(pitch), np.cos(yaw) * np.cos(pitch), -np.sin(pitch)])
    right = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])
    t = np.eye(4)
    t[:3, :3] = r
    t[:3, 3] = -r @ np.asarray(position, dtype=np.float64)
    return t


def surround_rig(
    n_cameras: int = 6,
    width: int = 192,
    height: int = 96,
    hfov_deg: float = 70.0,
    mount_height: float = 3.0,
    pitch_deg: float = 10.0,
    yaw_offset_deg: float = 0.0,
) -> CameraRig:
    """Evenly yaw-spaced ring of identical pinhole cameras."""
    f = (width / 2) / np.tan(np.radians(hfov_deg) / 2)
    k = np.array([[f, 0, (width - 1) / 2], [0, f, (height - 1) / 2], [0, 0, 1.0]])
    cams = []
    for i in range(n_cameras):
        yaw = np.radians(yaw_offset_deg + i * 360.0 / n_cameras)
        cams.append(Camera(f"cam{i}", k, look_extrinsic([0, 0, mount_height], yaw, np.radians(pitch_deg)), width, height))
    return CameraRig(tuple(cams))


def project_to_image(rig: CameraRig, camera_index: int, points) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project (N, 3) ego points; returns ``u, v, depth, valid`` arrays."""
    if not 0 <= camera_index < len(rig.cameras):
        raise GeometryError(f"camera index {camera_index} out of range for a {len(rig.cameras)}-camera rig")
    cam = rig.cameras[camera_index]
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = p @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    depth = pc[:, 2]
    safe = np.where(np.abs(depth) > DEPTH_EPS, depth, DEPTH_EPS)
    x, y = pc[:, 0] / safe, pc[:, 1] / safe
    k = cam.intrinsic
    u = k[0, 0] * x + k[0, 1] * y + k[0, 2]
    v = k[1, 1] * y + k[1, 2]
    valid = (depth > DEPTH_EPS) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return u, v, depth, valid


def back_project(rig: CameraRig, camera_index: int, u, v, depth) -> np.ndarray:
    """Inverse of :func:`project_to_image` for known depth; returns (N, 3) ego points."""
    cam = rig.cameras[camera_index]
    pix = np.stack([np.asarray(u, float), np.asarray(v, float), np.ones_like(np.asarray(u, float))], axis=-1)
    rays = np.linalg.solve(cam.intrinsic, pix.T).T
    pc = rays * np.asarray(depth, float)[..., None]
    r, t = cam.extrinsic[:3, :3], cam.extrinsic[:3, 3]
    return (pc - t) @ r


@dataclass(frozen=True)
class BEVGrid:
    x_min: float = -15.0
    x_max: float = 15.0
    y_min: float = -30.0
    y_max: float = 30.0
    nx: int = 50
    ny: int = 100

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(f"empty BEV range {self}")
        if self.nx < 1 or self.ny < 1:
            raise GeometryError(f"BEV grid needs nx, ny >= 1, got {self.nx}x{self.ny}")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.nx

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.ny

    @property
    def xs(self) -> np.ndarray:
        return self.x_min + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def ys(self) -> np.ndarray:
        return self.y_min + (np.arange(self.ny) + 0.5) * self.dy

    def to_cell(self, xy) -> np.ndarray:
        """Metric (x, y) -> continuous (i, j) cell coordinates, centres at integers."""
        xy = np.asarray(xy, dtype=np.float64)
        i = (xy[..., 0] - self.x_min) / self.dx - 0.5
        j = (xy[..., 1] - self.y_min) / self.dy - 0.5
        return np.stack([i, j], axis=-1)

    def contains(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        return (
            (xy[..., 0] >= self.x_min) & (xy[..., 0] <= self.x_max)
            & (xy[..., 1] >= self.y_min) & (xy[..., 1] <= self.y_max)
        )


@dataclass(frozen=True, eq=False)
class ReferencePointGrid:
    grid: BEVGrid
    z_count: int = 12
    z_min: float = -2.0
    z_max: float = 2.0

    def __post_init__(self):
        if self.z_count < 1:
            raise GeometryError(f"z_count must be >= 1, got {self.z_count}")

    @cached_property
    def z_levels(self) -> np.ndarray:
        if self.z_count == 1:
            return np.array([(self.z_min + self.z_max) / 2])
        return np.linspace(self.z_min, self.z_max, self.z_count)

    @cached_property
    def points(self) -> np.ndarray:
        """(ny * nx * Z, 3) points ordered (j, i, z) row-major."""
        g = self.grid
        yy, xx, zz = np.meshgrid(g.ys, g.xs, self.z_levels, indexing="ij")
        return np.stack([xx, yy, zz], axis=-1).reshape(-1, 3)

    def __len__(self) -> int:
        return self.grid.nx * self.grid.ny * self.z_count


def make_reference_grid(grid: BEVGrid, z_count: int = 12, z_min: float = -2.0, z_max: float = 2.0) -> ReferencePointGrid:
    return ReferencePointGrid(grid, z_count, z_min, z_max)


def pixel_to_feature_coords(u, v, image_size: tuple[int, int], feature_size: tuple[int, int]):
    """Map image pixel coordinates onto a feature map with centre alignment.

    ``image_size`` and ``feature_size`` are (height, width).
    """
    h, w = image_size
    hf, wf = feature_size
    rx, ry = wf / w, hf / h
    uf = np.asarray(u, dtype=np.float64) * rx - 0.5 * (1 - rx)
    vf = np.asarray(v, dtype=np.float64) * ry - 0.5 * (1 - ry)
    return uf, vf
