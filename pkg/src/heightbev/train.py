"""Training loop, AdamW, checkpoints and evaluation runs."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from .elements import Prediction
from .losses import total_loss
from .metrics import metric_report
from .model import ModelConfig, check_params, forward, init_params, scene_gt_masks
from .params import FormatError, ParamSet, decode_arrays, encode_arrays
from .synth import SceneDataset
from .tensor import Tape, backward

log = logging.getLogger(__name__)

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, step: int, scene: str, value: float):
        super().__init__(f"loss became {value} at epoch {epoch}, step {step} (scene {scene})")
        self.epoch, self.step, self.scene, self.value = epoch, step, scene, value


@dataclass
class AdamW:
    lr: float
    weight_decay: float
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def step(self, params: ParamSet) -> None:
        """One update with bias-corrected moments and decoupled weight decay."""
        self.t += 1
        c1 = 1.0 - BETA1**self.t
        c2 = 1.0 - BETA2**self.t
        for name in params.names():
            if name in params.frozen:
                continue
            g = params.grads[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= BETA1
            m += (1 - BETA1) * g
            v *= BETA2
            v += (1 - BETA2) * g * g
            p = params.values[name]
            upd = (m / c1) / (np.sqrt(v / c2) + EPS) + self.weight_decay * p
            params.values[name] = p - self.lr * upd

    def to_bytes(self) -> bytes:
        arrays = {f"m.{k}": a for k, a in self.m.items()}
        arrays.update({f"v.{k}": a for k, a in self.v.items()})
        arrays["t"] = np.array([float(self.t)])
        return encode_arrays(arrays)

    @classmethod
    def from_bytes(cls, blob: bytes, lr: float, weight_decay: float) -> "AdamW":
        arrays = decode_arrays(blob)
        opt = cls(lr, weight_decay, t=int(arrays.pop("t")[0]))
        for k, a in arrays.items():
            kind, name = k.split(".", 1)
            (opt.m if kind == "m" else opt.v)[name] = a.copy()
        return opt


@dataclass
class TrainState:
    params: ParamSet
    optimizer: AdamW
    config: ModelConfig
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)  # one dict per finished epoch

    def save(self, path: str | os.PathLike) -> None:
        """Checkpoint directory: params.bin, optim.bin, state.json (replaced atomically)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=f".{path.name}."))
        try:
            (tmp / "params.bin").write_bytes(self.params.to_bytes())
            (tmp / "optim.bin").write_bytes(self.optimizer.to_bytes())
            meta = {"epoch": self.epoch, "seed": self.seed, "history": self.history, "config": self.config.to_json()}
            (tmp / "state.json").write_text(json.dumps(meta, indent=1))
            if path.exists():
                shutil.rmtree(path)
            os.replace(tmp, path)
        except BaseException:
            shutil.rmtree(tmp, ignore_errors=True)
            raise

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TrainState":
        path = Path(path)
        if not (path / "state.json").exists():
            raise FormatError(f"{path} is not a checkpoint directory (state.json missing)")
        meta = json.loads((path / "state.json").read_text())
        cfg = ModelConfig.from_json(meta["config"])
        params = ParamSet.from_bytes((path / "params.bin").read_bytes())
        check_params(cfg, params)
        opt = AdamW.from_bytes((path / "optim.bin").read_bytes(), cfg.lr, cfg.weight_decay)
        return cls(params, opt, cfg, meta["epoch"], meta["seed"], meta["history"])


def new_state(cfg: ModelConfig, seed: int | None = None) -> TrainState:
    seed = cfg.seed if seed is None else seed
    return TrainState(init_params(cfg, seed), AdamW(cfg.lr, cfg.weight_decay), cfg, 0, seed, [])


def scene_loss(ds: SceneDataset, scene, cfg: ModelConfig, params: ParamSet):
    """Build the graph for one scene; returns (tape, loss tensor, breakdown)."""
    fp = ds.pyramid(scene)
    with Tape() as tape:
        out = forward(fp.levels, scene.rig, cfg, params)
        if not (np.all(np.isfinite(out.points.data)) and np.all(np.isfinite(out.probs.data))):
            # matching cannot run on NaN costs; report as a non-finite loss
            return tape, None, {"total": float("nan")}
        gt = scene_gt_masks(scene.rig, cfg, fp.shapes) if out.masks is not None else None
        loss, br = total_loss(out.probs, out.points, scene.elements, out.masks, gt, cfg.weights)
    return tape, loss, br


def train_epoch(state: TrainState, ds: SceneDataset) -> dict:
    cfg, params = state.config, state.params
    rng = np.random.default_rng([state.seed, state.epoch, 0x7A1])
    order = rng.permutation(len(ds))
    sums: dict[str, float] = {}
    for b0 in range(0, len(order), cfg.batch_size):
        batch = order[b0 : b0 + cfg.batch_size]
        params.zero_grad()
        for idx in batch:
            sc = ds.scenes[int(idx)]
            tape, loss, br = scene_loss(ds, sc, cfg, params)
            if not np.isfinite(br["total"]):
                raise TrainingDiverged(state.epoch, state.optimizer.t, sc.scene_id, br["total"])
            backward(tape, loss)
            for k, v in br.items():
                sums[k] = sums.get(k, 0.0) + v
        for name in params.names():
            params.grads[name] /= len(batch)
            if not np.all(np.isfinite(params.grads[name])):
                raise TrainingDiverged(state.epoch, state.optimizer.t, "batch", float("nan"))
        state.optimizer.step(params)
    return {k: v / len(ds) for k, v in sums.items()}


def train(
    ds: SceneDataset,
    cfg: ModelConfig,
    seed: int | None = None,
    epochs: int | None = None,
    val: SceneDataset | None = None,
    ckpt: str | os.PathLike | None = None,
    state: TrainState | None = None,
    eval_every: int = 0,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Train on ``ds``; checkpoint after every epoch when ``ckpt`` is given.

    Deterministic given (dataset, config, seed): the BLAS pool is pinned to one
    thread so reduction order never depends on the machine.
    """
    if len(ds) == 0:
        raise ValueError("training split is empty")
    state = state or new_state(cfg, seed)
    epochs = cfg.epochs if epochs is None else epochs
    with threadpool_limits(limits=1):
        while state.epoch < epochs:
            rec = train_epoch(state, ds)
            state.epoch += 1
            rec["epoch"] = state.epoch
            if val is not None and eval_every and (state.epoch % eval_every == 0 or state.epoch == epochs):
                rep, _ = evaluate(val, state.params, state.config)
                rec["val_mAP_general"] = rep["mAP_general"]
                rec["val_mAP_tighter"] = rep["mAP_tighter"]
            state.history.append(rec)
            log.info("epoch %d %s", state.epoch, json.dumps({k: round(v, 5) for k, v in rec.items()}))
            if ckpt is not None:
                state.save(ckpt)
            if on_epoch is not None:
                on_epoch(state)
    return state


def predict(ds: SceneDataset, params: ParamSet, cfg: ModelConfig) -> dict[str, list[Prediction]]:
    out = {}
    with threadpool_limits(limits=1):
        for sc in ds.scenes:
            fp = ds.pyramid(sc)
            out[str(sc.seed)] = forward(fp.levels, sc.rig, cfg, params).predictions()
    return out


def evaluate(ds: SceneDataset, params: ParamSet, cfg: ModelConfig) -> tuple[dict, dict]:
    """Metric report over a split plus the raw predictions."""
    if len(ds) == 0:
        raise ValueError(f"split {ds.split!r} is empty")
    preds = predict(ds, params, cfg)
    gts = {str(s.seed): list(s.elements) for s in ds.scenes}
    return metric_report(preds, gts), preds


def digest(obj) -> str:
    """Stable hash of a JSON-serialisable object (used for determinism checks)."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()
