import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heightbev.elements import BACKGROUND, MapElement
from heightbev.fg_separation import ForegroundMask
from heightbev.losses import (
    LossWeights,
    cls_loss,
    cost_matrix,
    dir_loss,
    focal_values,
    hungarian_match,
    pos_loss,
    total_loss,
)
from heightbev.tensor import ShapeError, Tape, Tensor, backward


def focal_oracle(p):
    return -0.25 * (1.0 - p) ** 2 * math.log(max(p, 1e-12))


# 0.25 * (2/3)^2 * ln 3, evaluated by hand
UNIFORM3_FROZEN = 0.12206803207423442


def test_uniform_focal_value():
    assert focal_oracle(1 / 3) == pytest.approx(UNIFORM3_FROZEN, abs=1e-15)
    assert cls_loss(np.full(3, 1 / 3), 1).item() == pytest.approx(UNIFORM3_FROZEN, abs=1e-14)


def test_focal_limits():
    assert cls_loss(np.array([1.0, 0, 0, 0]), 0).item() == 0.0
    big = cls_loss(np.array([0.0, 1.0, 0, 0]), 0).item()
    assert big == pytest.approx(0.25 * math.log(1e12))
    assert np.allclose(focal_values(np.array([1e-3, 0.5])), [focal_oracle(1e-3), focal_oracle(0.5)])


def test_pos_loss_trivial_values():
    pts = np.stack([np.linspace(0, 5, 20), np.zeros(20)], 1)
    gt = MapElement("divider", pts)
    assert pos_loss(pts, gt)[0].item() == 0.0
    assert pos_loss(pts[::-1], gt)[0].item() == 0.0
    assert pos_loss(pts + [1.0, 0.0], gt)[0].item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ShapeError):
        pos_loss(pts[:10], gt)


def ordering_oracle(pred, gt_pts, closed):
    n = len(gt_pts)
    cands = [gt_pts, gt_pts[::-1]]
    if closed:
        cands = [np.roll(gt_pts, -s, 0) for s in range(n)] + [np.roll(gt_pts[::-1], -s, 0) for s in range(n)]
    return min(float(np.mean(np.abs(pred - c).sum(1))) for c in cands)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 7), st.booleans())
def test_pos_loss_equivalence_invariance(seed, shift, reverse):
    rng = np.random.default_rng(seed)
    gt_pts = rng.normal(size=(8, 2)) * 3
    pred = rng.normal(size=(8, 2)) * 3
    closed = MapElement("pedestrian_crossing", gt_pts)
    alt = np.roll(gt_pts[::-1] if reverse else gt_pts, -shift, 0)
    a = pos_loss(pred, closed)[0].item()
    b = pos_loss(pred, MapElement("pedestrian_crossing", alt))[0].item()
    assert a == b
    assert a == pytest.approx(ordering_oracle(pred, gt_pts, True), abs=1e-12)
    op = MapElement("divider", gt_pts)
    assert pos_loss(pred, op)[0].item() == pos_loss(pred, MapElement("divider", gt_pts[::-1]))[0].item()


def dir_oracle(pred, gt, closed):
    n = len(gt)
    idx = [(i, (i + 1) % n) for i in range(n)] if closed else [(i, i + 1) for i in range(n - 1)]
    total = 0.0
    for i, j in idx:
        a, b = pred[j] - pred[i], gt[j] - gt[i]
        na, nb = math.hypot(*a), math.hypot(*b)
        if na > 1e-12 and nb > 1e-12:
            total += 1.0 - (a[0] * b[0] + a[1] * b[1]) / (na * nb)
    return total / len(idx)


def test_dir_loss_trivial_values():
    pts = np.stack([np.linspace(0, 5, 20), np.linspace(0, 1, 20)], 1)
    assert dir_loss(pts, pts).item() == pytest.approx(0.0, abs=1e-15)
    assert dir_loss(pts[::-1], pts).item() == pytest.approx(2.0, abs=1e-12)
    flat = pts.copy()
    flat[5] = flat[4]  # one zero-length predicted edge
    assert np.isfinite(dir_loss(flat, pts).item())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_dir_loss_matches_per_edge_oracle(seed, closed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.normal(size=(2, 6, 2))
    assert dir_loss(pred, gt, closed).item() == pytest.approx(dir_oracle(pred, gt, closed), abs=1e-12)


def _line(y0, n=20, cls="divider"):
    return MapElement(cls, np.stack([np.linspace(-5, 5, n), np.full(n, y0)], 1))


def brute_force_assignment(cost):
    q, g = cost.shape
    best, arg = np.inf, None
    for perm in itertools.permutations(range(q), g):
        c = sum(cost[p, j] for j, p in enumerate(perm))
        if c < best:
            best, arg = c, perm
    return best, arg


def test_hungarian_crossed_case_matches_brute_force():
    gts = [_line(0.0), _line(5.0)]
    pts = np.stack([gts[1].points + 0.1, gts[0].points - 0.2])  # crossed
    probs = np.array([[0.7, 0.1, 0.1, 0.1], [0.6, 0.2, 0.1, 0.1]])
    rows, cols = hungarian_match(probs, pts, gts)
    cost = cost_matrix(probs, pts, gts, LossWeights())
    best, perm = brute_force_assignment(cost)
    assert dict(zip(cols.tolist(), rows.tolist())) == {0: perm[0], 1: perm[1]} == {0: 1, 1: 0}
    assert cost[rows, cols].sum() == pytest.approx(best, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5), st.integers(0, 3))
def test_hungarian_is_optimal(seed, q, g):
    g = min(g, q)
    rng = np.random.default_rng(seed)
    gts = [MapElement("divider", rng.normal(size=(4, 2)) * 5) for _ in range(g)]
    pts = rng.normal(size=(q, 4, 2)) * 5
    probs = rng.dirichlet(np.ones(4), size=q)
    rows, cols = hungarian_match(probs, pts, gts)
    if g == 0:
        assert len(rows) == 0
        return
    cost = cost_matrix(probs, pts, gts, LossWeights())
    assert cost[rows, cols].sum() == pytest.approx(brute_force_assignment(cost)[0], abs=1e-9)


def test_single_identical_pred_is_matched_and_zero_gts_is_background():
    gt = _line(1.0)
    probs = np.array([[0.05, 0.9, 0.025, 0.025], [0.9, 0.05, 0.025, 0.025]])
    pts = np.stack([gt.points + 3.0, gt.points])
    rows, cols = hungarian_match(probs, pts, [gt])
    assert rows.tolist() == [1] and cols.tolist() == [0]
    _, terms = total_loss(probs, pts, [], None, None)
    expected = sum(focal_oracle(p[BACKGROUND]) for p in probs)
    assert terms["cls"] == pytest.approx(expected, abs=1e-12)
    assert terms["pos"] == 0.0 and terms["dir"] == 0.0


def _mask(values):
    v = np.asarray(values, dtype=float)
    return ForegroundMask([Tensor(v[:, None])], "predicted")


def test_total_loss_perfect_and_gamma_zero():
    gts = [_line(0.0), _line(4.0, cls="boundary")]
    probs = np.zeros((3, 4))
    probs[0, 0] = probs[1, 1] = probs[2, BACKGROUND] = 1.0
    pts = np.stack([gts[0].points, gts[1].points, gts[0].points + 9])
    m = np.zeros((1, 4, 4))
    m[0, 1:3, 1:3] = 1.0
    total, terms = total_loss(probs, pts, gts, _mask(m), _mask(m))
    assert total.item() == pytest.approx(0.0, abs=1e-9)
    pm = np.full_like(m, 0.5)
    w0 = LossWeights(mask=0.0)
    t0, b0 = total_loss(probs, pts, gts, _mask(pm), _mask(m), w0)
    assert b0["mask"] > 0 and t0.item() == pytest.approx(0.0, abs=1e-9)


def test_total_equals_sum_of_independent_terms():
    rng = np.random.default_rng(3)
    gts = [MapElement("divider", rng.normal(size=(6, 2)) * 4), MapElement("pedestrian_crossing", rng.normal(size=(6, 2)) * 4)]
    probs = rng.dirichlet(np.ones(4), size=4)
    pts = rng.normal(size=(4, 6, 2)) * 4
    pm = rng.uniform(0.05, 0.95, size=(2, 3, 5))
    gm = (rng.uniform(size=(2, 3, 5)) > 0.5).astype(float)
    w = LossWeights(cls=2.0, pos=5.0, dir=0.005, mask=1.0)
    total, terms = total_loss(probs, pts, gts, _mask(pm), _mask(gm), w)
    rows, cols = hungarian_match(probs, pts, gts, w)
    tgt = np.full(4, BACKGROUND)
    tgt[rows] = [gts[j].label for j in cols]
    n = len(rows)
    l_cls = sum(focal_oracle(probs[i, tgt[i]]) for i in range(4)) / n
    l_pos = l_dir = 0.0
    for i, j in zip(rows, cols):
        g = gts[j]
        l_pos += ordering_oracle(pts[i], g.points, g.closed)
        _, ordered = pos_loss(pts[i], g)
        l_dir += dir_oracle(pts[i], ordered, g.closed)
    l_pos /= n
    l_dir /= n
    assert terms["cls"] == pytest.approx(l_cls, abs=1e-12)
    assert terms["pos"] == pytest.approx(l_pos, abs=1e-12)
    assert terms["dir"] == pytest.approx(l_dir, abs=1e-12)
    l_mask = sum(np.abs(pm[c] - gm[c]).sum() / pm[c].size for c in range(2))
    assert terms["mask"] == pytest.approx(l_mask, abs=1e-12)
    expected = w.cls * l_cls + w.pos * l_pos + w.dir * l_dir + w.mask * terms["mask"]
    assert total.item() == pytest.approx(expected, abs=1e-12)
    assert terms["total"] == total.item()


def test_all_zero_weights_give_zero():
    rng = np.random.default_rng(5)
    gts = [MapElement("divider", rng.normal(size=(5, 2)))]
    total, _ = total_loss(
        rng.dirichlet(np.ones(4), size=2), rng.normal(size=(2, 5, 2)), gts,
        _mask(rng.uniform(0.1, 0.9, (1, 2, 2))), _mask(np.ones((1, 2, 2))), LossWeights(0, 0, 0, 0),
    )
    assert total.item() == 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(pos=-1.0)


def test_total_loss_gradient_flows_to_points():
    rng = np.random.default_rng(8)
    gts = [MapElement("divider", rng.normal(size=(5, 2)))]
    pts = Tensor(rng.normal(size=(2, 5, 2)), requires_grad=True)
    probs = Tensor(rng.dirichlet(np.ones(4), size=2), requires_grad=True)
    with Tape() as tape:
        total, _ = total_loss(probs, pts, gts, None, None)
    g = backward(tape, total)
    assert np.abs(g[pts]).sum() > 0 and np.abs(g[probs]).sum() > 0
