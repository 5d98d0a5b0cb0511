"""Closed-loop case study: plant stepping, per-step records, comparison metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .controller import MpcController, reference_schedule
from .plant import DhgPlant

# a state counts as converged when the unit-scaled error stays below this
CONVERGENCE_TOL = 0.1


@dataclass(frozen=True)
class StepRecord:
    k: int
    t: float
    x: np.ndarray
    u: np.ndarray
    reference: str
    objective: float
    solve_time: float
    sqp_iterations: int
    kkt_residual: float
    active_input_rows: int
    warm_start_defect: float


@dataclass
class ClosedLoopResult:
    variant: str
    dt: float
    records: list = field(default_factory=list)
    state_labels: list = field(default_factory=list)
    input_labels: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.records)

    def states(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.records])

    def solve_times(self) -> np.ndarray:
        return np.array([r.solve_time for r in self.records])

    def convergence_step(self, x_target: np.ndarray, x_scale: np.ndarray,
                         start: int = 0, end: int | None = None) -> int | None:
        """First step >= start after which the scaled error stays small up to end."""
        X = self.states()
        err = np.max(np.abs(X - x_target[None, :]) / x_scale[None, :], axis=1)
        good = err < CONVERGENCE_TOL
        end = len(good) if end is None else min(end, len(good))
        for k in range(start, end):
            if good[k:end].all():
                return k
        return None

    def to_csv(self) -> str:
        """Deterministic per-step log: same scenario and seed, same bytes.

        Wall-clock solve times are kept out of this file (see timing_csv).
        """
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["k", "t", *self.state_labels, *self.input_labels,
                  "reference", "objective", "sqp_iterations",
                  "kkt_residual", "active_input_rows", "warm_start_defect"]
        writer.writerow(header)
        for r in self.records:
            writer.writerow([r.k, repr(float(r.t)),
                             *[repr(float(v)) for v in r.x],
                             *[repr(float(v)) for v in r.u],
                             r.reference, repr(float(r.objective)),
                             r.sqp_iterations, repr(float(r.kkt_residual)),
                             r.active_input_rows, repr(float(r.warm_start_defect))])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "solve_time"])
        for r in self.records:
            writer.writerow([r.k, repr(float(r.solve_time))])
        return buf.getvalue()


def run_closed_loop(plant: DhgPlant, controller: MpcController, x0: np.ndarray,
                    n_sim: int, k_step: int, dt: float,
                    d_first: np.ndarray, d_second: np.ndarray) -> ClosedLoopResult:
    """Simulate n_sim steps; the true disturbance switches at k_step.

    The plant is advanced with the same Euler map the controller predicts
    with (nominal setting, no model mismatch).  Any controller failure
    aborts the loop; the partial record list is attached to the exception.
    """
    result = ClosedLoopResult(variant=controller.variant, dt=dt,
                              state_labels=plant.state_labels(),
                              input_labels=plant.input_labels())
    x = np.asarray(x0, float).copy()
    for k in range(n_sim):
        try:
            u, sol = controller.step(x, k)
        except Exception as exc:
            exc.partial_result = result  # type: ignore[attr-defined]
            raise
        ocp_labels, _ = reference_schedule(controller.variant, k,
                                           controller.solver.N, controller.k_step)
        result.records.append(StepRecord(
            k=k, t=k * dt, x=x.copy(), u=u.copy(), reference=ocp_labels[0],
            objective=sol.objective, solve_time=sol.solve_time,
            sqp_iterations=sol.sqp_iterations, kkt_residual=sol.kkt_residual,
            active_input_rows=sol.active_input_rows,
            warm_start_defect=sol.warm_start_defect))
        d = d_first if k < k_step else d_second
        x = plant.step(x, u, d, dt)
    return result


@dataclass(frozen=True)
class ComparisonReport:
    """Input-smoothness and timing comparison of the two controller variants."""

    max_heat_change: dict      # variant -> max |u(k+1)-u(k)| over heat inputs, window
    heat_change_ratio: float   # best per-input ratio ("reduces changes by up to ...")
    overall_ratio: float       # ratio of the two variants' global max changes
    per_input_ratio: np.ndarray
    solve_time_mean: dict
    solve_time_max: dict
    window: tuple

    def summary_lines(self) -> list:
        lines = [f"transition window: k in [{self.window[0]}, {self.window[1]}]"]
        for variant in self.max_heat_change:
            lines.append(f"max heat-flow input change {variant}: "
                         f"{self.max_heat_change[variant]:.4f} MW")
        lines.append("per-input change ratios (variant 1 / variant 2): "
                     + ", ".join(f"{r:.3f}" for r in self.per_input_ratio))
        lines.append(f"smoothness gain, best heat-flow input: {self.heat_change_ratio:.3f}x")
        lines.append(f"smoothness gain, worst-case input change: {self.overall_ratio:.3f}x")
        for variant in self.solve_time_mean:
            lines.append(f"solve time {variant}: mean {self.solve_time_mean[variant]:.3f} s, "
                         f"max {self.solve_time_max[variant]:.3f} s")
        return lines


def compute_metrics(result_1: ClosedLoopResult, result_2: ClosedLoopResult,
                    n_heat_inputs: int, k_step: int, horizon: int) -> ComparisonReport:
    """Per-heat-flow-input max successive change inside the transition window.

    The window covers [k_step - horizon, k_step + horizon], the only phase
    where the two variants differ.  Changes are reported in MW.  The
    headline ratio is the best per-input gain: the demand step at k_step
    feeds through every controller's injections, so the input whose loop
    carries the changing demand is dominated by that exogenous jump and a
    global-max comparison would measure the disturbance, not the law.
    """
    if result_1.n_steps != result_2.n_steps or result_1.dt != result_2.dt:
        raise ValueError("runs stem from different scenarios and cannot be compared")
    lo = max(k_step - horizon, 0)
    hi = min(k_step + horizon, result_1.n_steps - 1)

    changes = {}
    per_input = {}
    for res in (result_1, result_2):
        U = res.inputs()[:, -n_heat_inputs:] / 1e3  # kW -> MW
        dU = np.abs(np.diff(U[lo:hi + 1], axis=0))
        per_input[res.variant] = dU.max(axis=0)
        changes[res.variant] = float(dU.max())
    v1, v2 = result_1.variant, result_2.variant
    ratios = per_input[v1] / np.maximum(per_input[v2], 1e-300)
    overall = changes[v1] / changes[v2] if changes[v2] > 0 else np.inf
    return ComparisonReport(
        max_heat_change=changes,
        heat_change_ratio=float(np.max(ratios)),
        overall_ratio=float(overall),
        per_input_ratio=ratios,
        solve_time_mean={r.variant: float(np.mean(r.solve_times())) for r in (result_1, result_2)},
        solve_time_max={r.variant: float(np.max(r.solve_times())) for r in (result_1, result_2)},
        window=(lo, hi))
