"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tape, Tensor, backward

# gradients smaller than this are compared on an absolute scale
ABS_FLOOR = 1e-5
# kink-straddling probes are retried at step / 10, ... down to this
MIN_STEP = 1e-9


@dataclass
class ParamReport:
    name: str
    checked: int
    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    kinks: int = 0  # probes whose +-step straddled a non-smooth point
    raw_max_rel_error: float = 0.0  # at the nominal step, kinks included
    smallest_step: float = 0.0
    unresolved: int = 0  # probes still straddling a kink at MIN_STEP


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    entries: list[ParamReport] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> ParamReport | None:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)

    @property
    def raw_max_rel_error(self) -> float:
        return max((e.raw_max_rel_error for e in self.entries), default=0.0)

    @property
    def kinks(self) -> int:
        return sum(e.kinks for e in self.entries)

    @property
    def unresolved(self) -> int:
        return sum(e.unresolved for e in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and self.unresolved == 0

    def lines(self) -> list[str]:
        out = []
        for e in self.entries:
            line = (
                f"{e.name:40s} n={e.checked:3d} max_rel={e.max_rel_error:.3e} "
                f"at {e.worst_index} (analytic {e.analytic:+.6e}, numeric {e.numeric:+.6e})"
            )
            if e.kinks:
                line += f" kinks={e.kinks} raw={e.raw_max_rel_error:.3e} min_step={e.smallest_step:.0e}"
            if e.unresolved:
                line += f" UNRESOLVED={e.unresolved}"
            out.append(line)
        w = self.worst
        if w is not None:
            status = "PASS" if self.passed else "FAIL"
            out.append(
                f"worst: {w.name} {w.max_rel_error:.3e} (tol {self.tolerance:g}) {status}; "
                f"{self.kinks} kink-straddling probes re-measured at smaller steps, "
                f"raw worst at step {self.step:g} {self.raw_max_rel_error:.3e}"
            )
        return out


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), ABS_FLOOR)


def _evaluate(graph_builder, params: ParamSet) -> tuple[float, list]:
    """Loss value plus the branch log of every non-smooth op along the way."""
    with Tape(track_branches=True) as tape:
        loss = graph_builder(params).item()
    return loss, tape.branches


def _same_branches(a: list, b: list) -> bool:
    if len(a) != len(b):
        return False
    for (na, da), (nb, db) in zip(a, b):
        if na != nb or da.shape != db.shape or not np.array_equal(da, db):
            return False
    return True


def analytic_grads(graph_builder: Callable[[ParamSet], Tensor], params: ParamSet) -> dict[str, np.ndarray]:
    params.zero_grad()
    with Tape() as tape:
        loss = graph_builder(params)
    backward(tape, loss)
    return {k: v.copy() for k, v in params.grads.items()}


def grad_check(
    graph_builder: Callable[[ParamSet], Tensor],
    params: ParamSet,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    per_param: int | None = 6,
    seed: int = 0,
    names: list[str] | None = None,
    analytic: dict[str, np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``graph_builder(params)`` must deterministically return a scalar loss.
    Up to ``per_param`` random entries of each parameter are probed (all of
    them when ``per_param`` is None). Failures are reported, never raised.

    A central difference is only a derivative estimate when both evaluations
    stay on the same smooth piece. Non-smooth ops log their branch decisions;
    a probe whose +-step changes any of them is re-measured with the step cut
    by 10x until it does not, and both figures are reported.
    """
    rng = np.random.default_rng(seed)
    if analytic is None:
        analytic = analytic_grads(graph_builder, params)
    _, base_branches = _evaluate(graph_builder, params)
    report = GradCheckReport(tolerance=tolerance, step=step)
    for name in names or list(params.values):
        value = params.values[name]
        flat = value.reshape(-1)
        if per_param is None or flat.size <= per_param:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=per_param, replace=False))
        worst = (0.0, 0, 0.0, 0.0)
        kinks = unresolved = 0
        raw_worst, smallest = 0.0, step
        for i in idx:
            orig = flat[i]
            ana = float(analytic[name].reshape(-1)[i])
            h = step
            while True:
                flat[i] = orig + h
                fp, bp = _evaluate(graph_builder, params)
                flat[i] = orig - h
                fm, bm = _evaluate(graph_builder, params)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = rel_error(ana, num)
                if h == step:
                    raw_worst = max(raw_worst, err)
                smooth = _same_branches(bp, base_branches) and _same_branches(bm, base_branches)
                if smooth:
                    break
                if h == step:
                    kinks += 1
                if h / 10 < MIN_STEP:
                    unresolved += 1
                    break
                h /= 10
            smallest = min(smallest, h)
            if err >= worst[0]:
                worst = (err, int(i), ana, num)
        report.entries.append(
            ParamReport(
                name=name,
                checked=len(idx),
                max_rel_error=worst[0],
                worst_index=tuple(int(j) for j in np.unravel_index(worst[1], value.shape)) if value.size else (),
                analytic=worst[2],
                numeric=worst[3],
                kinks=kinks,
                raw_max_rel_error=raw_worst,
                smallest_step=smallest,
                unresolved=unresolved,
            )
        )
    return report
