"""Model assembly: configuration, parameter layout, polyline head and the forward pass."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Sequence

import numpy as np

from . import tensor as T
from .elements import BACKGROUND, CLASSES, Prediction, prediction_from_probs
from .fg_separation import ForegroundMask, apply_masks, gt_masks, init_mask_params, predict_masks
from .fusion import fuse_multiscale, init_fusion_params
from .geometry import BEVGrid, CameraRig, ReferencePointGrid, make_reference_grid
from .height_bev import column_geometry, height_distribution, init_height_params, pool_by_height, sample_columns
from .losses import LossWeights
from .metrics import resample
from .params import ParamSet, uniform_init
from .synth import SceneConfig
from .tensor import ShapeError, Tensor


class ConfigMismatch(ValueError):
    pass


@dataclass
class ModelConfig:
    scales: int = 2
    channels: int = 16
    z_count: int = 12
    z_min: float = -2.0
    z_max: float = 2.0
    grid: BEVGrid = field(default_factory=BEVGrid)
    # loss weights; lam/alpha/beta are assumed values, see README
    gamma: float = 1.0
    lam: float = 2.0
    alpha: float = 5.0
    beta: float = 0.005
    height_mechanism: bool = True
    fg_separation: bool = True
    multiscale_fusion: bool = True
    lr: float = 3e-4
    weight_decay: float = 1.25e-3
    epochs: int = 50
    batch_size: int = 4
    n_queries: int = 16
    n_pts: int = 20
    da_points: int = 4
    da_heads: int = 1
    mask_kernel: int = 3
    head_hidden: int = 64
    head_embed: int = 16
    sample_size: int = 7  # head samples a sample_size^2 metric patch around each point
    sample_radius: float = 3.0  # metres
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)

    def __post_init__(self):
        if isinstance(self.grid, dict):
            self.grid = BEVGrid(**self.grid)
        if isinstance(self.scene, dict):
            self.scene = SceneConfig.from_json(self.scene)
        if self.z_count < 1:
            raise ConfigMismatch("z_count must be >= 1")
        if self.z_max < self.z_min:
            raise ConfigMismatch("z range is reversed")
        for k in ("gamma", "lam", "alpha", "beta", "lr", "weight_decay"):
            if getattr(self, k) < 0:
                raise ConfigMismatch(f"{k} must be >= 0")
        if self.scales < 1 or self.channels < 2 or self.channels % 2:
            raise ConfigMismatch("need scales >= 1 and an even channel count")
        if self.n_queries < 1 or self.n_pts < 2 or self.sample_size < 1 or self.batch_size < 1:
            raise ConfigMismatch("query, point, sample and batch counts must be positive")
        for k in ("height_mechanism", "fg_separation", "multiscale_fusion"):
            if not isinstance(getattr(self, k), bool):
                raise ConfigMismatch(f"{k} must be a boolean")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(cls=self.lam, pos=self.alpha, dir=self.beta, mask=self.gamma)

    @property
    def ref_grid(self) -> ReferencePointGrid:
        return make_reference_grid(self.grid, self.z_count, self.z_min, self.z_max)

    def to_json(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["grid"] = asdict(self.grid)
        d["scene"] = self.scene.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigMismatch(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _coerce(raw: str, current: Any):
    if isinstance(current, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigMismatch(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (list, tuple)):
        return json.loads(raw)
    return raw


def apply_overrides(cfg_json: dict, overrides: Sequence[str]) -> dict:
    """Apply ``key=value`` (dotted keys reach nested sections) to a config dict."""
    out = json.loads(json.dumps(cfg_json))
    for item in overrides:
        if "=" not in item:
            raise ConfigMismatch(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = out
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigMismatch(f"unknown config section {p!r} in {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigMismatch(f"unknown config key {key!r}")
        try:
            node[parts[-1]] = _coerce(raw, node[parts[-1]])
        except ValueError as exc:
            raise ConfigMismatch(f"bad value for {key!r}: {exc}") from None
    return out


def load_config(path: str | None, overrides: Sequence[str] = ()) -> ModelConfig:
    base = ModelConfig().to_json()
    if path:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(base)
        if unknown:
            raise ConfigMismatch(f"unknown config keys: {sorted(unknown)}")
        for k, v in user.items():
            if isinstance(base[k], dict) and isinstance(v, dict):
                base[k].update(v)
            else:
                base[k] = v
    return ModelConfig.from_json(apply_overrides(base, overrides))


# ------------------------------------------------------------------ parameters


def anchor_polylines(cfg: ModelConfig) -> np.ndarray:
    """Initial reference polylines: longitudinal lines spread across x, then rectangles spread along y."""
    g, q, n = cfg.grid, cfg.n_queries, cfg.n_pts
    n_rect = (q * 3) // 8
    n_line = q - n_rect
    out = []
    ys = np.linspace(g.y_min, g.y_max, n)
    margin = 0.05 * (g.x_max - g.x_min)
    for x in np.linspace(g.x_min + margin, g.x_max - margin, n_line) if n_line > 1 else [0.5 * (g.x_min + g.x_max)]:
        out.append(np.stack([np.full(n, x), ys], axis=1))
    half_w = 0.23 * (g.x_max - g.x_min)
    cx = 0.5 * (g.x_min + g.x_max)
    span = 0.375 * (g.y_max - g.y_min)
    cy0 = 0.5 * (g.y_min + g.y_max)
    centers = np.linspace(cy0 - span, cy0 + span, n_rect) if n_rect > 1 else [cy0]
    for cy in centers:
        rect = np.array([[cx - half_w, cy - 1.5], [cx + half_w, cy - 1.5], [cx + half_w, cy + 1.5], [cx - half_w, cy + 1.5]])
        out.append(resample(rect, n, closed=True))
    return np.stack(out)


def head_input_dim(cfg: ModelConfig) -> int:
    return cfg.sample_size**2 * cfg.channels + cfg.head_embed + 2


def init_params(cfg: ModelConfig, seed: int | None = None) -> ParamSet:
    """Every module's parameters, independent of the toggles."""
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0xA11])
    p = ParamSet()
    c = cfg.channels
    init_mask_params(p, c, rng, kernel=cfg.mask_kernel)
    init_height_params(p, c, cfg.z_count, rng)
    init_fusion_params(p, c, cfg.scales, rng, points=cfg.da_points, heads=cfg.da_heads)
    d_in, hid = head_input_dim(cfg), cfg.head_hidden
    p.add("head.ref", anchor_polylines(cfg))
    p.add("head.embed", rng.normal(0.0, 1.0, (cfg.n_queries, cfg.head_embed)))
    p.add("head.pt.w1", uniform_init(rng, (hid, d_in), d_in))
    p.add("head.pt.b1", uniform_init(rng, (hid,), d_in))
    p.add("head.pt.w2", np.zeros((2, hid)))
    p.add("head.pt.b2", np.zeros(2))
    d_cls = cfg.sample_size**2 * c + cfg.head_embed
    p.add("head.cls.w1", uniform_init(rng, (hid, d_cls), d_cls))
    p.add("head.cls.b1", uniform_init(rng, (hid,), d_cls))
    p.add("head.cls.w2", uniform_init(rng, (len(CLASSES) + 1, hid), hid))
    p.add("head.cls.b2", np.zeros(len(CLASSES) + 1))
    return p


def check_params(cfg: ModelConfig, params: ParamSet) -> None:
    """Reject parameter sets whose names or shapes disagree with ``cfg``."""
    ref = init_params(cfg, 0)
    missing = [k for k in ref.names() if k not in params]
    extra = [k for k in params.names() if k not in ref]
    if missing or extra:
        raise ConfigMismatch(f"parameter names differ from config: missing {missing[:4]}, unexpected {extra[:4]}")
    bad = [(k, params.values[k].shape, ref.values[k].shape) for k in ref.names() if params.values[k].shape != ref.values[k].shape]
    if bad:
        k, got, want = bad[0]
        raise ConfigMismatch(f"parameter {k} has shape {got}, config implies {want} ({len(bad)} mismatches)")


def zero_head(params: ParamSet) -> None:
    for k in params.names("head."):
        params.values[k] = np.zeros_like(params.values[k])


# ------------------------------------------------------------------ forward


def _sample_pattern(cfg: ModelConfig) -> np.ndarray:
    r = cfg.sample_radius if cfg.sample_size > 1 else 0.0
    s = np.linspace(-r, r, cfg.sample_size)
    dy, dx = np.meshgrid(s, s, indexing="ij")
    return np.stack([dx.reshape(-1), dy.reshape(-1)], axis=1)


def head(bev, params: ParamSet, cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Per-query polyline regression and classification from the fused BEV map.

    Each query owns a reference polyline. A metric patch around every reference
    point is bilinearly sampled; a shared MLP maps (patch, query embedding,
    normalised position) to a point offset, and a second MLP maps the
    polyline-averaged patch plus embedding to class probabilities.
    """
    bev = T.as_tensor(bev)
    g = cfg.grid
    c = bev.shape[0]
    ref = params["head.ref"]
    q, n, _ = ref.shape
    pat = _sample_pattern(cfg)
    gsz = pat.shape[0]
    world = T.reshape(ref, (q, n, 1, 2)) + pat[None, None]
    scale = np.array([1.0 / g.dx, 1.0 / g.dy])
    shift = np.array([g.x_min / g.dx + 0.5, g.y_min / g.dy + 0.5])
    cells = world * scale - shift
    samp, _ = T.bilinear_sample(bev, T.reshape(cells, (q * n * gsz, 2)))  # (C, Q*n*G)
    samp = T.reshape(T.transpose(T.reshape(samp, (c, q, n, gsz)), (1, 2, 3, 0)), (q, n, gsz * c))
    emb = params["head.embed"]
    e = emb.shape[1]
    half = np.array([0.5 * (g.x_max - g.x_min), 0.5 * (g.y_max - g.y_min)])
    center = np.array([0.5 * (g.x_max + g.x_min), 0.5 * (g.y_max + g.y_min)])
    refn = (ref - center) * (1.0 / half)
    x = T.concat([samp, T.broadcast_to(T.reshape(emb, (q, 1, e)), (q, n, e)), refn], axis=2)
    pts = ref + T.mlp(x, params, "head.pt")
    pooled = T.concat([T.mean(samp, axis=1), emb], axis=1)
    probs = T.softmax(T.mlp(pooled, params, "head.cls"), axis=-1)
    return probs, pts


@dataclass
class ForwardOutput:
    probs: Tensor  # (N_q, n_classes + 1), background last
    points: Tensor  # (N_q, n_pts, 2)
    masks: ForegroundMask | None
    intermediates: dict

    def predictions(self) -> list[Prediction]:
        return [prediction_from_probs(p, pr) for p, pr in zip(self.points.data, self.probs.data)]


def _validate(cfg: ModelConfig, params: ParamSet, levels: Sequence, rig: CameraRig) -> None:
    if len(levels) != cfg.scales:
        raise ConfigMismatch(f"config has {cfg.scales} scales, features have {len(levels)}")
    for lvl in levels:
        if lvl.shape[0] != len(rig) or lvl.shape[1] != cfg.channels:
            raise ConfigMismatch(f"features {lvl.shape} do not match {len(rig)} cameras x {cfg.channels} channels")
    checks = {
        "fg.conv1.w": (None, cfg.channels, cfg.mask_kernel, cfg.mask_kernel),
        "height.mlp.w2": (cfg.z_count, cfg.channels),
        "fusion.conv.w": (cfg.channels, cfg.scales * cfg.channels, 1, 1),
        "head.ref": (cfg.n_queries, cfg.n_pts, 2),
        "head.pt.w1": (cfg.head_hidden, head_input_dim(cfg)),
    }
    for name, want in checks.items():
        if name not in params:
            raise ConfigMismatch(f"parameter {name} missing")
        got = params.values[name].shape
        if len(got) != len(want) or any(w is not None and w != s for w, s in zip(want, got)):
            raise ConfigMismatch(f"parameter {name} has shape {got}, config implies {want}")


def forward(levels: Sequence, rig: CameraRig, cfg: ModelConfig, params: ParamSet) -> ForwardOutput:
    """fg-separation -> height-aware PV-to-BEV -> multi-scale fusion -> head.

    Disabled toggles fall back to: masks of ones (features doubled, no mask
    loss), uniform height weights, and the first pyramid level's BEV map alone.
    """
    levels = [np.asarray(getattr(l, "data", l)) for l in levels]
    _validate(cfg, params, levels, rig)
    feats = [T.Tensor(l) for l in levels]
    inter: dict = {}
    if cfg.fg_separation:
        masks = predict_masks(feats, params)
        feats = apply_masks(feats, masks)
    else:
        masks = None
        feats = [f * 2.0 for f in feats]
    if cfg.height_mechanism:
        dist = height_distribution(feats[0], params)
    else:
        dist = T.Tensor(np.full((len(rig), cfg.z_count), 1.0 / cfg.z_count))
    inter["height_dist"] = dist
    used = feats if cfg.multiscale_fusion else feats[:1]
    ref_grid = cfg.ref_grid
    geo = column_geometry(rig, ref_grid, [l.shape[2:] for l in levels])
    if not cfg.multiscale_fusion:
        geo = _first_scale(geo)
    cols = sample_columns(used, rig, ref_grid, geo)
    bevs = [pool_by_height(c, dist) for c in cols]
    inter["bev_maps"] = bevs
    fused = fuse_multiscale(bevs, params, heads=cfg.da_heads) if cfg.multiscale_fusion else bevs[0]
    inter["fused"] = fused
    probs, pts = head(fused, params, cfg)
    return ForwardOutput(probs, pts, masks, inter)


def _first_scale(geo):
    from dataclasses import replace

    return replace(geo, matrices=geo.matrices[:1])


_GT_MASK_CACHE: dict = {}


def scene_gt_masks(rig: CameraRig, cfg: ModelConfig, shapes) -> ForegroundMask:
    key = (rig.key(), cfg.grid, cfg.z_count, cfg.z_min, cfg.z_max, tuple(map(tuple, shapes)))
    hit = _GT_MASK_CACHE.get(key)
    if hit is None:
        hit = gt_masks(rig, cfg.ref_grid, shapes)
        _GT_MASK_CACHE[key] = hit
    return hit

