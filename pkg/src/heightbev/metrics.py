"""Chamfer-distance average precision for vectorised map elements."""
from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Mapping, Sequence

import numpy as np

from .elements import CLASSES, MapElement, Prediction

GENERAL_THRESHOLDS = (0.5, 1.0, 1.5)
TIGHTER_THRESHOLDS = (0.2, 0.5, 1.0)
RESAMPLE_POINTS = 100


def _pairwise_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)


def chamfer_cd(a, b) -> float:
    """Symmetric chamfer distance with squared norms (mean nearest squared distance both ways)."""
    d = _pairwise_sq(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def resample(points, n: int = RESAMPLE_POINTS, closed: bool = False) -> np.ndarray:
    """``n`` points evenly spaced by arclength along a polyline (or closed polygon)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 1:
        return np.repeat(pts, n, axis=0)
    if closed:
        pts = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        return np.repeat(pts[:1], n, axis=0)
    t = np.linspace(0.0, s[-1], n, endpoint=not closed)
    return np.stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])], axis=1)


def matching_cd(pred, gt, n: int = RESAMPLE_POINTS) -> float:
    """Half the symmetric mean nearest Euclidean distance, in metres.

    Elements (or raw point arrays) are arclength-resampled to ``n`` points first.
    """
    a = _prepare(pred, n)
    b = _prepare(gt, n)
    d = np.sqrt(_pairwise_sq(a, b))
    return float(0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean()))


def _prepare(x, n: int) -> np.ndarray:
    if isinstance(x, Prediction):
        x = x.element
    if isinstance(x, MapElement):
        return resample(x.points, n, x.closed)
    return resample(x, n, False)


def _cd_matrix(preds: Sequence[Prediction], gts: Sequence[MapElement], n: int) -> np.ndarray:
    pa = [_prepare(p, n) for p in preds]
    gb = [_prepare(g, n) for g in gts]
    out = np.zeros((len(pa), len(gb)))
    for i, a in enumerate(pa):
        for j, b in enumerate(gb):
            d = np.sqrt(_pairwise_sq(a, b))
            out[i, j] = 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())
    return out


def _sort_key(scene: str, p: Prediction):
    # ties on score broken by scene id, then by the rounded point coordinates
    return (-p.score, scene, tuple(np.round(p.element.points, 9).reshape(-1)))


class _ClassPool:
    """Score-ranked predictions of one class with their distances to same-scene gts."""

    def __init__(self, preds: Mapping[str, Sequence[Prediction]], gts: Mapping[str, Sequence[MapElement]], cls: str, n: int):
        entries = []
        self.n_gt = 0
        gt_ids = {}
        for scene in sorted(set(preds) | set(gts)):
            g = [e for e in gts.get(scene, ()) if e.cls == cls]
            gt_ids[scene] = self.n_gt
            p = [x for x in preds.get(scene, ()) if x.cls == cls]
            cd = _cd_matrix(p, g, n) if p and g else np.zeros((len(p), len(g)))
            for i, x in enumerate(p):
                entries.append((_sort_key(scene, x), self.n_gt, cd[i]))
            self.n_gt += len(g)
        entries.sort(key=lambda e: e[0])
        self.scores = np.array([-e[0][0] for e in entries])
        self.offsets = [e[1] for e in entries]
        self.dists = [e[2] for e in entries]

    def greedy_tp(self, tau: float) -> np.ndarray:
        taken = np.zeros(self.n_gt, dtype=bool)
        tp = np.zeros(len(self.dists), dtype=bool)
        for k, (off, d) in enumerate(zip(self.offsets, self.dists)):
            if d.size == 0:
                continue
            cand = np.where(~taken[off : off + d.size] & (d < tau), d, np.inf)
            j = int(np.argmin(cand))
            if np.isfinite(cand[j]):
                taken[off + j] = True
                tp[k] = True
        return tp


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """Area under the all-point interpolated precision-recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def ap_at_threshold(preds, gts, cls: str, tau: float, n: int = RESAMPLE_POINTS) -> float:
    """AP of one class at chamfer threshold ``tau`` (metres).

    ``preds``/``gts`` map scene id -> list. Predictions are taken in descending
    score order and greedily matched to the closest unmatched same-scene gt
    with distance below ``tau``.
    """
    if tau <= 0:
        raise ValueError("threshold must be positive")
    pool = _ClassPool(_as_scenes(preds), _as_scenes(gts), cls, n)
    return ap_from_tp(pool.greedy_tp(tau), pool.n_gt)


def _as_scenes(x) -> Mapping[str, Sequence]:
    if isinstance(x, Mapping):
        return x
    return {"0": list(x)}


def mean_ap(preds, gts, thresholds: Iterable[float] = GENERAL_THRESHOLDS, n: int = RESAMPLE_POINTS) -> dict:
    """Per-class AP at each threshold, their mean per class, and mAP over present classes."""
    preds, gts = _as_scenes(preds), _as_scenes(gts)
    thresholds = tuple(thresholds)
    per_class = {}
    for cls in CLASSES:
        pool = _ClassPool(preds, gts, cls, n)
        if pool.n_gt == 0 and len(pool.dists) == 0:
            continue
        aps = {f"AP@{t:g}": ap_from_tp(pool.greedy_tp(t), pool.n_gt) for t in thresholds}
        aps["AP"] = float(np.mean(list(aps.values())))
        per_class[cls] = aps
    m = float(np.mean([v["AP"] for v in per_class.values()])) if per_class else 0.0
    return {"per_class": per_class, "mAP": m, "thresholds": list(thresholds)}


def metric_report(preds, gts) -> dict:
    """Both threshold regimes in one JSON-serialisable report."""
    general = mean_ap(preds, gts, GENERAL_THRESHOLDS)
    tighter = mean_ap(preds, gts, TIGHTER_THRESHOLDS)
    per_class = {}
    for cls in CLASSES:
        row = {}
        if cls in general["per_class"]:
            row.update({k: v for k, v in general["per_class"][cls].items() if k != "AP"})
            row["AP_general"] = general["per_class"][cls]["AP"]
        if cls in tighter["per_class"]:
            row.update({k: v for k, v in tighter["per_class"][cls].items() if k != "AP"})
            row["AP_tighter"] = tighter["per_class"][cls]["AP"]
        if row:
            per_class[cls] = row
    return {"per_class": per_class, "mAP_general": general["mAP"], "mAP_tighter": tighter["mAP"]}


def report_csv(report: dict) -> str:
    """Table with one row per regime: AP per class then mAP."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "AP_div", "AP_bou", "AP_ped", "mAP"])
    for regime in ("general", "tighter"):
        row = [regime]
        for cls in CLASSES:
            v = report["per_class"].get(cls, {}).get(f"AP_{regime}")
            row.append("" if v is None else f"{v:.4f}")
        row.append(f"{report[f'mAP_{regime}']:.4f}")
        w.writerow(row)
    return buf.getvalue()


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
