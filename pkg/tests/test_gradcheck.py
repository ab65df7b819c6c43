import numpy as np

from heightbev import tensor as T
from heightbev.checks import module_reports
from heightbev.gradcheck import grad_check, rel_error
from heightbev.params import ParamSet
from heightbev.tensor import Tape, _emit, as_tensor


def test_smooth_graph_passes_without_kinks():
    p = ParamSet()
    p.add("w", np.array([0.3, -1.2, 2.0]))
    rep = grad_check(lambda ps: T.sum_(T.sigmoid(ps["w"]) * T.sigmoid(ps["w"])), p, per_param=None)
    assert rep.passed and rep.kinks == 0 and rep.max_rel_error < 1e-8


def test_kink_within_step_is_detected_and_refined():
    p = ParamSet()
    # 3e-6 from the ReLU kink: a 1e-5 central difference straddles it
    p.add("w", np.array([3e-6, 0.5]))
    rep = grad_check(lambda ps: T.sum_(T.relu(ps["w"])), p, per_param=None)
    e = rep.entries[0]
    assert e.kinks == 1 and e.raw_max_rel_error > 0.1
    assert abs(e.smallest_step - 1e-6) < 1e-18 and e.max_rel_error < 1e-9 and rep.passed


def test_kink_exactly_at_the_point_is_unresolved():
    p = ParamSet()
    p.add("w", np.array([0.0]))
    rep = grad_check(lambda ps: T.sum_(T.abs_(ps["w"])), p, per_param=None)
    assert rep.unresolved == 1 and not rep.passed


def _bad_square(x):
    x = as_tensor(x)
    return _emit("bad_square", x.data**2, (x,), lambda g: (g * 2.1 * x.data,))


def test_wrong_gradient_still_fails():
    p = ParamSet()
    p.add("w", np.array([0.7, -0.4]))
    rep = grad_check(lambda ps: T.sum_(_bad_square(ps["w"])), p, per_param=None)
    assert not rep.passed and rep.max_rel_error > 0.04


def test_branch_log_only_when_tracking():
    x = T.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Tape() as t:
        T.relu(x)
    assert t.branches == []
    with Tape(track_branches=True) as t:
        T.relu(x)
    assert t.branches[0][0] == "relu" and t.branches[0][1].tolist() == [False, True]


def test_rel_error_floor():
    assert rel_error(0.0, 1e-7) == 1e-7 / 1e-5
    assert rel_error(2.0, 1.0) == 0.5


def test_module_suites_pass():
    reps = module_reports()
    assert set(reps) == {"fg-separation", "height-bev", "fusion"}
    for r in reps.values():
        assert r.passed, r.lines()[-1]
