"""Set-prediction training losses: focal classification, point, direction and mask terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .elements import BACKGROUND, MapElement
from .fg_separation import ForegroundMask, mask_loss
from .tensor import ShapeError, Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0  # lambda
    pos: float = 5.0  # alpha
    dir: float = 0.005  # beta
    mask: float = 1.0  # gamma

    def __post_init__(self):
        for k in ("cls", "pos", "dir", "mask"):
            if getattr(self, k) < 0:
                raise ValueError(f"loss weight {k} must be >= 0")


def focal_values(p_true: np.ndarray) -> np.ndarray:
    p = np.maximum(p_true, PROB_FLOOR)
    return -FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * np.log(p)


def cls_loss(pred_probs, gt_class) -> Tensor:
    """Focal loss on the probability assigned to ``gt_class``.

    ``pred_probs`` may be a single vector or a (Q, K) batch with one target per
    row; the result is the per-row loss (a scalar for a single vector).
    """
    probs = T.as_tensor(pred_probs)
    single = probs.ndim == 1
    if single:
        probs = T.reshape(probs, (1, -1))
    tgt = np.atleast_1d(np.asarray(gt_class, dtype=np.int64))
    p_t = probs[np.arange(probs.shape[0]), tgt]
    one_minus = 1.0 - p_t
    loss = T.mul(T.power(one_minus, FOCAL_GAMMA) * T.log(p_t, floor=PROB_FLOOR), -FOCAL_ALPHA)
    return T.reshape(loss, ()) if single else loss


def gt_orderings(points: np.ndarray, closed: bool) -> np.ndarray:
    """Equivalent point orderings of an element: (n_orderings, n, 2)."""
    pts = np.asarray(points, dtype=np.float64)
    if not closed:
        return np.stack([pts, pts[::-1]])
    n = len(pts)
    # closed sequences may repeat the first vertex at the end; treat them cyclically as given
    fwd = [np.roll(pts, -s, axis=0) for s in range(n)]
    rev = [np.roll(pts[::-1], -s, axis=0) for s in range(n)]
    return np.stack(fwd + rev)


def pos_costs(pred_pts: np.ndarray, gt: MapElement) -> np.ndarray:
    """Mean Manhattan distance of each prediction (Q, n, 2) under every gt ordering -> (Q, n_ord)."""
    orders = gt_orderings(gt.points, gt.closed)
    if pred_pts.shape[-2] != orders.shape[1]:
        raise ShapeError(f"point count mismatch: prediction {pred_pts.shape[-2]} vs ground truth {orders.shape[1]}")
    d = np.abs(pred_pts[:, None] - orders[None]).sum(-1)
    return d.mean(-1)


def pos_loss(pred_pts, gt: MapElement) -> tuple[Tensor, np.ndarray]:
    """Minimum over equivalent gt orderings of the mean Manhattan point distance.

    Returns the loss and the selected gt ordering (n, 2).
    """
    pred_pts = T.as_tensor(pred_pts)
    orders = gt_orderings(gt.points, gt.closed)
    if pred_pts.shape[0] != orders.shape[1]:
        raise ShapeError(f"point count mismatch: prediction {pred_pts.shape[0]} vs ground truth {orders.shape[1]}")
    best = int(np.argmin(pos_costs(pred_pts.data[None], gt)[0]))
    T.note_branch("pos_ordering", best)
    target = orders[best]
    loss = T.mean(T.sum_(T.abs_(pred_pts - target), axis=1))
    return loss, target


def _edges(pts, closed: bool):
    if closed:
        return pts[np.roll(np.arange(pts.shape[0]), -1)] - pts
    return pts[1:] - pts[:-1]


def dir_loss(pred_pts, gt_ordered: np.ndarray, closed: bool = False) -> Tensor:
    """Mean (1 - cos) between predicted and gt edge vectors; degenerate edges contribute 0."""
    pred_pts = T.as_tensor(pred_pts)
    pe = _edges(pred_pts, closed)
    ge = _edges(np.asarray(gt_ordered, dtype=np.float64), closed)
    pn = np.linalg.norm(pe.data, axis=1)
    gn = np.linalg.norm(ge, axis=1)
    ok = (pn > 1e-12) & (gn > 1e-12)
    T.note_branch("dir_edges", ok)
    n_edges = ge.shape[0]
    if not ok.any():
        return T.mul(T.sum_(pe), 0.0)
    pe_ok = pe[np.flatnonzero(ok)]
    g_unit = ge[ok] / gn[ok, None]
    norm = T.sqrt(T.sum_(pe_ok * pe_ok, axis=1))
    cos = T.sum_(pe_ok * g_unit, axis=1) / norm
    return T.sum_(1.0 - cos) * (1.0 / n_edges)


def cost_matrix(probs: np.ndarray, pts: np.ndarray, gts: list[MapElement], weights: LossWeights) -> np.ndarray:
    q = probs.shape[0]
    cost = np.zeros((q, len(gts)))
    for j, g in enumerate(gts):
        cost[:, j] = weights.cls * focal_values(probs[:, g.label]) + weights.pos * pos_costs(pts, g).min(axis=1)
    return cost


def hungarian_match(probs: np.ndarray, pts: np.ndarray, gts: list[MapElement], weights: LossWeights = LossWeights()) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one assignment; returns (pred_indices, gt_indices).

    Predictions left out of the assignment are background.
    """
    if not gts or probs.shape[0] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost_matrix(np.asarray(probs), np.asarray(pts), gts, weights))
    return rows.astype(np.int64), cols.astype(np.int64)


def total_loss(
    pred_probs,
    pred_pts,
    gts: list[MapElement],
    masks_pred: ForegroundMask | None,
    masks_gt: ForegroundMask | None,
    weights: LossWeights = LossWeights(),
    match: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the four terms plus a per-term breakdown.

    Classification covers every query (unmatched ones against background) and
    is normalised by the number of matched instances, like the point and
    direction terms.
    """
    pred_probs, pred_pts = T.as_tensor(pred_probs), T.as_tensor(pred_pts)
    if match is None:
        match = hungarian_match(pred_probs.data, pred_pts.data, gts, weights)
    rows, cols = match
    n_match = max(len(rows), 1)
    targets = np.full(pred_probs.shape[0], BACKGROUND, dtype=np.int64)
    targets[rows] = [gts[j].label for j in cols]
    l_cls = T.sum_(cls_loss(pred_probs, targets)) * (1.0 / n_match)
    l_pos = l_dir = None
    for i, j in zip(rows, cols):
        g = gts[j]
        p_i = pred_pts[int(i)]
        lp, ordered = pos_loss(p_i, g)
        ld = dir_loss(p_i, ordered, g.closed)
        l_pos = lp if l_pos is None else l_pos + lp
        l_dir = ld if l_dir is None else l_dir + ld
    zero = T.mul(T.sum_(pred_pts), 0.0)
    l_pos = zero if l_pos is None else l_pos * (1.0 / n_match)
    l_dir = zero if l_dir is None else l_dir * (1.0 / n_match)
    terms = {"cls": l_cls, "pos": l_pos, "dir": l_dir}
    total = l_cls * weights.cls + l_pos * weights.pos + l_dir * weights.dir
    if masks_pred is not None and masks_gt is not None:
        l_mask = mask_loss(masks_pred, masks_gt)
        terms["mask"] = l_mask
        if weights.mask > 0:
            total = total + l_mask * weights.mask
    breakdown = {k: v.item() for k, v in terms.items()}
    breakdown["total"] = total.item()
    return total, breakdown
