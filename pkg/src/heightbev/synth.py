"""Procedural road scenes with exact ground truth, rendered into PV feature pyramids.

Feature channels are geometric rather than photometric: per class and per
truncation radius, ``1 - min(d, r) / r`` where ``d`` is the distance (in
feature pixels) to the class's projected geometry, followed by background
channels carrying a sky/ground elevation ramp plus smooth seeded noise.
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from .elements import CLASSES, MapElement
from .fg_separation import FeaturePyramid
from .geometry import BEVGrid, CameraRig, pixel_to_feature_coords, project_to_image, surround_rig
from .metrics import resample
from .params import FormatError, decode_arrays, encode_arrays

DATASET_VERSION = 1
MAX_HEIGHT_AMPLITUDE = 1.5


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    dividers: tuple[int, int] = (2, 4)
    boundaries: int = 2
    crossings: tuple[int, int] = (0, 2)
    lane_width: tuple[float, float] = (3.0, 3.6)
    heading: float = 0.02  # max |dx/dy| of the road axis
    curvature: float = 0.001  # max |d2x/dy2| / 2
    crossing_depth: float = 3.0
    height_amplitude: float = 1.0  # bound on |h(x, y)|, metres
    n_pts: int = 20
    grid: BEVGrid = field(default_factory=BEVGrid)
    n_cameras: int = 6
    image_width: int = 192
    image_height: int = 96
    hfov_deg: float = 70.0
    mount_height: float = 3.0
    pitch_deg: float = 10.0
    scales: int = 2
    channels: int = 16
    noise_amplitude: float = 0.25

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = BEVGrid(**self.grid)
        self.dividers = tuple(self.dividers)
        self.crossings = tuple(self.crossings)
        self.lane_width = tuple(self.lane_width)
        if not 0 <= self.height_amplitude <= MAX_HEIGHT_AMPLITUDE:
            raise ConfigError(f"height amplitude must lie in [0, {MAX_HEIGHT_AMPLITUDE}] m")
        if self.dividers[0] > self.dividers[1] or self.crossings[0] > self.crossings[1] or self.dividers[0] < 0:
            raise ConfigError("count ranges must be (min, max) with min <= max")
        if self.boundaries not in (0, 1, 2):
            raise ConfigError("a road has at most two boundaries")
        if self.n_pts < 2:
            raise ConfigError("elements need at least two points")
        if self.channels < 4:
            raise ConfigError("need at least 3 class channels plus one background channel")
        if self.scales < 1:
            raise ConfigError("need at least one scale")
        widest = (self.dividers[1] + 1) * self.lane_width[1]
        margin = self._curve_margin()
        g = self.grid
        if widest / 2 + margin + 0.3 > (g.x_max - g.x_min) / 2:
            raise ConfigError(
                f"road of width {widest:.1f} m with {margin:.1f} m curve margin does not fit the "
                f"{g.x_max - g.x_min:.1f} m lateral range"
            )
        if self.crossings[1] * (self.crossing_depth + 4.0) > (g.y_max - g.y_min) - 10.0:
            raise ConfigError("too many crossings for the longitudinal range")

    def _curve_margin(self) -> float:
        half_len = max(abs(self.grid.y_min), abs(self.grid.y_max))
        return self.heading * half_len + self.curvature * half_len**2

    @property
    def strides(self) -> list[int]:
        return [2 ** (self.scales - i) for i in range(self.scales)]

    @property
    def feature_shapes(self) -> list[tuple[int, int]]:
        return [(self.image_height // s, self.image_width // s) for s in self.strides]

    def rig(self) -> CameraRig:
        return surround_rig(self.n_cameras, self.image_width, self.image_height, self.hfov_deg, self.mount_height, self.pitch_deg)

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = asdict(self.grid)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HeightField:
    """h(x, y) = bias + sum_k amp_k * sin(2 pi (fx_k x + fy_k y) + phase_k)."""

    bias: float = 0.0
    amps: tuple = ()
    freqs: tuple = ()  # (fx, fy) pairs, cycles per metre
    phases: tuple = ()

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.full(np.broadcast(x, y).shape, float(self.bias))
        for a, (fx, fy), ph in zip(self.amps, self.freqs, self.phases):
            h = h + a * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
        return h

    @property
    def bound(self) -> float:
        return abs(self.bias) + float(np.sum(np.abs(self.amps)))

    def to_json(self) -> dict:
        return {"bias": self.bias, "amps": list(self.amps), "freqs": [list(f) for f in self.freqs], "phases": list(self.phases)}

    @classmethod
    def from_json(cls, d: dict) -> "HeightField":
        return cls(d["bias"], tuple(d["amps"]), tuple(tuple(f) for f in d["freqs"]), tuple(d["phases"]))


@dataclass(eq=False)
class SyntheticScene:
    seed: int
    elements: list[MapElement]
    height: HeightField
    rig: CameraRig
    config: SceneConfig

    @property
    def scene_id(self) -> str:
        return f"{self.seed:010d}"

    def __eq__(self, other):
        return (
            isinstance(other, SyntheticScene)
            and self.seed == other.seed
            and self.elements == other.elements
            and self.height == other.height
            and self.rig == other.rig
            and self.config == other.config
        )

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "elements": [e.to_json() for e in self.elements],
            "height": self.height.to_json(),
            "rig": self.rig.to_json(),
        }

    @classmethod
    def from_json(cls, d: dict, config: SceneConfig) -> "SyntheticScene":
        els = [MapElement(e["class"], np.array(e["points"])) for e in d["elements"]]
        return cls(int(d["seed"]), els, HeightField.from_json(d["height"]), CameraRig.from_json(d["rig"]), config)


def _road_x(y, center, offset, heading, curv):
    return center + offset + heading * y + curv * y**2


def generate_scene(seed: int, config: SceneConfig | None = None) -> SyntheticScene:
    """Deterministic scene for ``(seed, config)``: a road along +Y with lane lines and crossings."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng([seed, 0x5EED])
    g = cfg.grid
    n_div = int(rng.integers(cfg.dividers[0], cfg.dividers[1] + 1))
    lanes = n_div + 1
    lw = float(rng.uniform(*cfg.lane_width))
    width = lanes * lw
    heading = float(rng.uniform(-cfg.heading, cfg.heading))
    curv = float(rng.uniform(-cfg.curvature, cfg.curvature))
    half = (g.x_max - g.x_min) / 2
    slack = max(half - width / 2 - cfg._curve_margin() - 0.3, 0.0)
    center = (g.x_min + g.x_max) / 2 + float(rng.uniform(-slack, slack))

    ys = np.linspace(g.y_min, g.y_max, 400)
    elements: list[MapElement] = []
    offsets = []
    if cfg.boundaries >= 1:
        offsets.append(("boundary", -width / 2))
    offsets += [("divider", -width / 2 + k * lw) for k in range(1, n_div + 1)]
    if cfg.boundaries == 2:
        offsets.append(("boundary", width / 2))
    for cls, off in offsets:
        xs = _road_x(ys, center, off, heading, curv)
        elements.append(MapElement(cls, resample(np.stack([xs, ys], 1), cfg.n_pts)))

    n_cross = int(rng.integers(cfg.crossings[0], cfg.crossings[1] + 1))
    placed: list[float] = []
    lim = (g.y_max - g.y_min) / 2 - 6.0
    cy0 = (g.y_max + g.y_min) / 2
    for _ in range(n_cross):
        for _attempt in range(100):
            yc = cy0 + float(rng.uniform(-lim, lim))
            if all(abs(yc - p) >= cfg.crossing_depth + 4.0 for p in placed):
                break
        else:
            raise ConfigError("could not place crossings without overlap")
        placed.append(yc)
        y0, y1 = yc - cfg.crossing_depth / 2, yc + cfg.crossing_depth / 2
        xl = _road_x(yc, center, -width / 2, heading, curv)
        xr = _road_x(yc, center, width / 2, heading, curv)
        corners = np.array([[xl, y0], [xr, y0], [xr, y1], [xl, y1]])
        elements.append(MapElement("pedestrian_crossing", resample(corners, cfg.n_pts, closed=True)))

    amp = cfg.height_amplitude
    if amp > 0:
        bias = float(rng.uniform(-0.6 * amp, 0.6 * amp))
        rest = amp - abs(bias)
        a1 = float(rng.uniform(0.3, 0.6) * rest)
        a2 = float(rng.uniform(0.0, 1.0) * (rest - a1))
        freqs = tuple(
            (float(rng.uniform(-1, 1) / 40), float(rng.uniform(-1, 1) / 60)) for _ in range(2)
        )
        phases = tuple(float(p) for p in rng.uniform(0, 2 * np.pi, 2))
        height = HeightField(bias, (a1, a2), freqs, phases)
    else:
        height = HeightField()
    for e in elements:
        if not np.all(g.contains(e.points)):
            raise ConfigError(f"seed {seed}: element leaves the perception range")
    return SyntheticScene(seed, elements, height, cfg.rig(), cfg)


def densify(el: MapElement, step: float = 0.05) -> np.ndarray:
    pts = el.points
    if el.closed:
        pts = np.vstack([pts, pts[:1]])
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(int(np.ceil(np.linalg.norm(b - a) / step)), 1)
        t = np.arange(n) / n
        out.append(a + t[:, None] * (b - a))
    out.append(pts[-1:])
    return np.vstack(out)


def element_points_3d(scene: SyntheticScene, step: float = 0.05) -> dict[str, np.ndarray]:
    """Densely sampled 3-D geometry per class, lifted onto the ground surface."""
    by_cls: dict[str, list] = {c: [] for c in CLASSES}
    for el in scene.elements:
        xy = densify(el, step)
        by_cls[el.cls].append(np.column_stack([xy, scene.height(xy[:, 0], xy[:, 1])]))
    return {c: (np.vstack(v) if v else np.zeros((0, 3))) for c, v in by_cls.items()}


def truncation_radii(channels: int) -> list[float]:
    n = (channels - 1) // len(CLASSES)
    return [float(r) for r in np.round(np.geomspace(1.0, 8.0, n), 6)] if n > 1 else [2.0]


def _elevation(rig: CameraRig, cam: int, shape: tuple[int, int]) -> np.ndarray:
    hf, wf = shape
    h, w = rig.image_size
    c = rig.cameras[cam]
    rx, ry = wf / w, hf / h
    vf, uf = np.meshgrid(np.arange(hf, dtype=float), np.arange(wf, dtype=float), indexing="ij")
    u = (uf + 0.5 * (1 - rx)) / rx
    v = (vf + 0.5 * (1 - ry)) / ry
    pix = np.stack([u, v, np.ones_like(u)], -1).reshape(-1, 3)
    rays = np.linalg.solve(c.intrinsic, pix.T).T @ c.extrinsic[:3, :3]
    return np.arctan2(rays[:, 2], np.hypot(rays[:, 0], rays[:, 1])).reshape(hf, wf)


def background_channels(scene: SyntheticScene, cam: int, scale: int, shape, n: int) -> np.ndarray:
    elev = _elevation(scene.rig, cam, shape)
    out = np.empty((n,) + tuple(shape))
    for k in range(n):
        rng = np.random.default_rng([scene.seed, cam, scale, k, 0xB6])
        noise = gaussian_filter(rng.standard_normal(shape), 1.5, mode="wrap")
        noise /= max(noise.std(), 1e-12)
        out[k] = 0.5 * np.tanh(elev / 0.05) + scene.config.noise_amplitude * noise
    return out


def class_distances(scene: SyntheticScene, cam: int, shape, geometry: dict[str, np.ndarray] | None = None) -> np.ndarray:
    """(n_classes, H, W) Euclidean distance in feature pixels to each class's projection (inf if absent)."""
    geometry = geometry if geometry is not None else element_points_3d(scene)
    hf, wf = shape
    out = np.full((len(CLASSES), hf, wf), np.inf)
    for ci, cls in enumerate(CLASSES):
        pts = geometry[cls]
        if len(pts) == 0:
            continue
        u, v, _, valid = project_to_image(scene.rig, cam, pts)
        if not valid.any():
            continue
        uf, vf = pixel_to_feature_coords(u[valid], v[valid], scene.rig.image_size, shape)
        col = np.clip(np.rint(uf).astype(int), 0, wf - 1)
        row = np.clip(np.rint(vf).astype(int), 0, hf - 1)
        hit = np.zeros(shape, dtype=bool)
        hit[row, col] = True
        out[ci] = distance_transform_edt(~hit)
    return out


def render_features(scene: SyntheticScene, scales: int | None = None, channels: int | None = None) -> FeaturePyramid:
    """Deterministic feature pyramid (coarsest scale first) for every camera."""
    cfg = scene.config
    scales = scales or cfg.scales
    channels = channels or cfg.channels
    strides = [2 ** (scales - i) for i in range(scales)]
    radii = truncation_radii(channels)
    n_bg = channels - len(radii) * len(CLASSES)
    geom = element_points_3d(scene)
    h, w = scene.rig.image_size
    levels = []
    for si, s in enumerate(strides):
        shape = (h // s, w // s)
        lvl = np.empty((len(scene.rig), channels) + shape)
        for cam in range(len(scene.rig)):
            d = class_distances(scene, cam, shape, geom)
            k = 0
            for r in radii:
                for ci in range(len(CLASSES)):
                    lvl[cam, k] = 1.0 - np.minimum(d[ci], r) / r
                    k += 1
            lvl[cam, k:] = background_channels(scene, cam, si, shape, n_bg)
        levels.append(lvl)
    return FeaturePyramid(levels)


# ------------------------------------------------------------------ datasets


@dataclass
class SceneDataset:
    scenes: list[SyntheticScene]
    split: str
    config: SceneConfig
    features: dict[str, FeaturePyramid] = field(default_factory=dict)

    def __post_init__(self):
        seeds = [s.seed for s in self.scenes]
        if len(set(seeds)) != len(seeds):
            raise ConfigError("scene seeds must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.scenes)

    def pyramid(self, scene: SyntheticScene) -> FeaturePyramid:
        fp = self.features.get(scene.scene_id)
        if fp is None:
            fp = render_features(scene)
            self.features[scene.scene_id] = fp
        return fp


def split_seeds(seed: int, n_train: int, n_val: int) -> tuple[list[int], list[int]]:
    base = seed * 1_000_000
    return [base + k for k in range(n_train)], [base + 500_000 + k for k in range(n_val)]


def build_datasets(config: SceneConfig, seed: int, n_train: int, n_val: int) -> dict[str, SceneDataset]:
    tr, va = split_seeds(seed, n_train, n_val)
    out = {}
    for name, seeds in (("train", tr), ("val", va)):
        scenes = [generate_scene(s, config) for s in seeds]
        ds = SceneDataset(scenes, name, config)
        for sc in scenes:
            ds.pyramid(sc)
        out[name] = ds
    return out


def save_dataset(path: str | os.PathLike, datasets: dict[str, SceneDataset]) -> None:
    """Write manifest.json, scenes/<id>.json and features/<id>.bin under ``path``.

    The directory is assembled in a temporary sibling and renamed into place.
    """
    path = Path(path)
    configs = {json.dumps(d.config.to_json(), sort_keys=True) for d in datasets.values()}
    if len(configs) != 1:
        raise ConfigError("all splits of a dataset must share one generation config")
    all_ids = [s.scene_id for d in datasets.values() for s in d.scenes]
    if len(set(all_ids)) != len(all_ids):
        raise ConfigError("dataset splits overlap")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
    try:
        (tmp / "scenes").mkdir()
        (tmp / "features").mkdir()
        cfg = next(iter(datasets.values())).config
        manifest = {
            "version": DATASET_VERSION,
            "config": cfg.to_json(),
            "splits": {name: [s.scene_id for s in d.scenes] for name, d in datasets.items()},
        }
        for d in datasets.values():
            for s in d.scenes:
                (tmp / "scenes" / f"{s.scene_id}.json").write_text(json.dumps(s.to_json()))
                fp = d.pyramid(s)
                blob = encode_arrays({f"scale{i}": lvl for i, lvl in enumerate(fp.levels)})
                (tmp / "features" / f"{s.scene_id}.bin").write_bytes(blob)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=1))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_dataset(path: str | os.PathLike, split: str = "train") -> SceneDataset:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{path} has no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise FormatError(f"dataset version {manifest.get('version')} != supported {DATASET_VERSION}")
    if split not in manifest["splits"]:
        raise FormatError(f"dataset has no split {split!r} (available: {sorted(manifest['splits'])})")
    cfg = SceneConfig.from_json(manifest["config"])
    scenes, feats = [], {}
    for sid in manifest["splits"][split]:
        sc = SyntheticScene.from_json(json.loads((path / "scenes" / f"{sid}.json").read_text()), cfg)
        arrays = decode_arrays((path / "features" / f"{sid}.bin").read_bytes())
        try:
            levels = [arrays[f"scale{i}"] for i in range(len(arrays))]
        except KeyError as exc:
            raise FormatError(f"feature blob for scene {sid} lacks {exc}") from None
        scenes.append(sc)
        feats[sc.scene_id] = FeaturePyramid(levels)
    return SceneDataset(scenes, split, cfg, feats)
