"""Finite-horizon optimal control and the receding-horizon laws.

The optimal control problem is transcribed by multiple shooting: all N+1
states and N inputs are decision variables and the Euler dynamics enter as
equality constraints.  A sequential quadratic programming loop linearizes
the dynamics at the current trajectory iterate, solves a sparse convex QP
(Gauss-Newton Hessian from the stage and terminal weights, terminal
ellipsoid linearized), and globalizes with an l1 merit line search.  Two
receding-horizon variants differ only in how their reference schedules
switch between the two operating points around the step change.

Everything in this module works in scaled coordinates; only the
receding-horizon wrapper converts from/to physical units.
"""
from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

import osqp

_QP_DATA_ERRORS = (ValueError, getattr(osqp, "OSQPException", ValueError))

from .constraints import OperatingLimits, UnitScaling
from .equilibrium import SteadyState
from .plant import DhgPlant, SingularMassError
from .terminal import TerminalIngredients

SQP_MAX_ITER = 100
KKT_TOL = 1e-8
DEFECT_TOL = 1e-9
LINE_SEARCH_HALVINGS = 25
# per-iteration cap on the step, in scaled units; the subproblem model is
# only trusted inside this box and the terminal slack keeps it feasible
STEP_CAP = 2.0


class OcpError(RuntimeError):
    pass


class OcpInfeasibleError(OcpError):
    def __init__(self, message: str, violated: str = ""):
        super().__init__(message)
        self.violated = violated


@dataclass(frozen=True)
class StageRef:
    """Reference tuple for one stage: scaled state/input, physical disturbance."""

    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    label: str


@dataclass(frozen=True)
class OcpProblem:
    x0: np.ndarray                 # scaled initial state
    stages: tuple                  # N StageRef entries
    terminal: TerminalIngredients  # matches the reference at the horizon end

    @property
    def N(self) -> int:
        return len(self.stages)


@dataclass
class OcpSolution:
    X: np.ndarray                  # (N+1, n) scaled states
    U: np.ndarray                  # (N, m) scaled inputs
    objective: float
    status: str
    sqp_iterations: int
    kkt_residual: float
    max_defect: float
    terminal_cost: float
    solve_time: float
    active_input_rows: int = 0
    warm_start_defect: float = np.nan  # shifted-warm-start consistency, pre-solve


def reference_schedule(variant: str, k: int, N: int, k_step: int) -> tuple[list[str], str]:
    """Per-stage reference labels and the terminal label for solve time k.

    variant "mpc1": every stage and the terminal follow the operating point
    active at the solve time (switch at k_step).  variant "mpc2": stage i
    follows the point active at absolute time k+i, and the terminal follows
    the point active at k+N, so it switches already at k = k_step - N.
    """
    if variant not in ("mpc1", "mpc2"):
        raise ValueError(f"unknown controller variant {variant!r}")
    if k_step <= N:
        raise ValueError("the schedule change must lie beyond one horizon")
    if variant == "mpc1":
        lab = "I" if k < k_step else "II"
        return [lab] * N, lab
    labels = ["I" if (k + i) < k_step else "II" for i in range(N)]
    terminal = "I" if k < k_step - N else "II"
    return labels, terminal


class OcpSolver:
    """SQP solver bound to one plant, horizon and constraint envelope."""

    def __init__(self, plant: DhgPlant, scaling: UnitScaling, limits: OperatingLimits,
                 Q: np.ndarray, R: np.ndarray, N: int, dt: float):
        self.plant = plant
        self.scaling = scaling
        self.limits = limits
        self.Q, self.R = Q, R
        self.N, self.dt = N, dt
        self.n = plant.n
        self.m = plant.n_u
        n, m = self.n, self.m

        self.x_lb = limits.x_lb / scaling.x_scale
        self.x_ub = limits.x_ub / scaling.x_scale
        self.u_lb = limits.u_lb / scaling.u_scale
        self.u_ub = limits.u_ub / scaling.u_scale
        self.Tq = limits.flow_map() * scaling.u_scale[None, :]  # edge flows from scaled u
        self.q_edge_ub = limits.q_edge_ub
        # a chord edge's flow cap can reduce to a plain input bound; keeping
        # such rows would duplicate the box rows and degenerate pinned KKT
        # systems, so they are dropped when the box is at least as tight
        redundant = np.zeros(self.Tq.shape[0], dtype=bool)
        for j, row in enumerate(self.Tq):
            nz_cols = np.flatnonzero(row)
            if len(nz_cols) == 1 and np.isclose(row[nz_cols[0]], 1.0):
                c = nz_cols[0]
                redundant[j] = (self.u_lb[c] >= 0.0
                                and self.u_ub[c] <= self.q_edge_ub[j] + 1e-12)
        self.Tq_qp = self.Tq[~redundant]
        self.q_edge_ub_qp = self.q_edge_ub[~redundant]
        self.n_flow = self.Tq_qp.shape[0]
        self._as_state = None

        # decision vector: states, inputs, plus one slack that softens the
        # linearized terminal row inside the subproblem (exact penalty)
        self.nz = (N + 1) * n + N * m + 1
        self._iu0 = (N + 1) * n
        self._islack = self.nz - 1

        # constraint row layout
        self.n_eq = (N + 1) * n
        self.rows_sbox = self.n_eq                      # boxes on x_1..x_N
        self.rows_ubox = self.rows_sbox + N * n
        self.rows_flow = self.rows_ubox + N * m
        self.row_term = self.rows_flow + N * self.n_flow
        self.row_slack = self.row_term + 1
        self.n_rows = self.row_slack + 1

        self._build_patterns()

    # -- sparse pattern bookkeeping ---------------------------------------
    def _build_patterns(self):
        N, n, m = self.N, self.n, self.m
        rows, cols = [], []
        # init condition rows: I * dx_0
        rows.append(np.arange(n)); cols.append(np.arange(n))
        # dynamics rows: dx_{k+1} - A_k dx_k - B_k du_k
        for k in range(N):
            r0 = n * (k + 1)
            rows.append(r0 + np.arange(n)); cols.append(n * (k + 1) + np.arange(n))
            rows.append(r0 + np.repeat(np.arange(n), n)); cols.append(n * k + np.tile(np.arange(n), n))
            rows.append(r0 + np.repeat(np.arange(n), m)); cols.append(self._iu0 + m * k + np.tile(np.arange(m), n))
        # state boxes x_1..x_N
        rows.append(self.rows_sbox + np.arange(N * n)); cols.append(n + np.arange(N * n))
        # input boxes
        rows.append(self.rows_ubox + np.arange(N * m)); cols.append(self._iu0 + np.arange(N * m))
        # flow rows
        fr, fc, fdata = [], [], []
        Tq = self.Tq_qp
        nz_r, nz_c = np.nonzero(Tq)
        for k in range(N):
            fr.append(self.rows_flow + self.n_flow * k + nz_r)
            fc.append(self._iu0 + m * k + nz_c)
            fdata.append(Tq[nz_r, nz_c])
        rows += fr; cols += fc
        self._flow_data = np.concatenate(fdata) if fdata else np.empty(0)
        # terminal ellipsoid row over dx_N, softened by the slack variable
        rows.append(np.full(n, self.row_term)); cols.append(n * N + np.arange(n))
        rows.append(np.array([self.row_term])); cols.append(np.array([self._islack]))
        rows.append(np.array([self.row_slack])); cols.append(np.array([self._islack]))
        self._rows = np.concatenate(rows)
        self._cols = np.concatenate(cols)
        self._n_dyn_data = N * (n + n * n + n * m)

    def _constraint_matrix(self, A_stack, B_stack, term_row):
        N, n, m = self.N, self.n, self.m
        dyn = np.empty(self._n_dyn_data)
        per = n + n * n + n * m
        for k in range(N):
            o = k * per
            dyn[o:o + n] = 1.0
            dyn[o + n:o + n + n * n] = -A_stack[k].ravel()
            dyn[o + n + n * n:o + per] = -B_stack[k].ravel()
        data = np.concatenate([
            np.ones(n), dyn,
            np.ones(N * n), np.ones(N * m),
            self._flow_data, term_row, [-1.0], [1.0],
        ])
        return sp.csc_matrix((data, (self._rows, self._cols)), shape=(self.n_rows, self.nz))

    def _hessian(self, P_term: np.ndarray):
        blocks = [sp.csc_matrix(2.0 * self.Q)] * self.N \
            + [sp.csc_matrix(2.0 * P_term)] \
            + [sp.csc_matrix(2.0 * self.R)] * self.N \
            + [sp.csc_matrix(np.array([[2.0]]))]  # slack curvature
        full = sp.block_diag(blocks, format="csc")
        return sp.triu(full, format="csc"), full

    def _refine_step(self, H_full, grad, A_qp, l, u, y):
        """Equality-constrained Newton step on the active set found by the
        first-order solver; machine precision when the identification holds.
        Returns None when the refined step fails its feasibility checks.
        """
        if not np.all(np.isfinite(y)):
            return None
        tol_dual = 1e-9 * max(1.0, float(np.max(np.abs(y))) if y.size else 1.0)
        eq = l == u
        low = (~eq) & (y < -tol_dual)
        high = (~eq) & (y > tol_dual)
        act = np.where(eq | low | high)[0]
        rhs_act = np.where(eq[act] | low[act], l[act], u[act])
        A_act = A_qp[act, :]
        K = sp.bmat([[H_full, A_act.T], [A_act, None]], format="csc")
        try:
            sol = sp.linalg.splu(K).solve(np.concatenate([-grad, rhs_act]))
        except RuntimeError:
            return None
        cand = sol[:H_full.shape[0]]
        if not np.all(np.isfinite(cand)):
            return None
        Az = A_qp @ cand
        if not (np.all(Az >= l - 1e-8) and np.all(Az <= u + 1e-8)):
            return None
        return cand

    def _solve_qp_active_set(self, H_full, grad, A_csr, l, u, max_switches=60):
        """Primal-dual active-set QP solve with exact sparse KKT factorization.

        Pins a working set of rows at their bounds, solves the equality
        problem, then exchanges wrong-sign multipliers and violated rows all
        at once.  Warm-started from the last working set; returns
        (step, duals) on success or None when the exchange cycles, in which
        case the caller falls back to the first-order solver.
        """
        n_rows, nz = A_csr.shape[0], H_full.shape[0]
        eq = l == u
        state = self._as_state
        if state is None or state.shape[0] != n_rows:
            state = np.zeros(n_rows, dtype=np.int8)
        state = np.where(eq, 0, state)  # equalities are handled separately

        for _ in range(max_switches):
            pinned = eq | (state != 0)
            act = np.flatnonzero(pinned)
            if len(act) > nz:
                return None  # overdetermined working set; not a vertex
            rhs_act = np.where(eq[act] | (state[act] == -1), l[act], u[act])
            A_act = A_csr[act, :]
            K = sp.bmat([[H_full, A_act.T], [A_act, None]], format="csc")
            K.sort_indices()
            rhs = np.concatenate([-grad, rhs_act])
            try:
                sol = sp.linalg.splu(K).solve(rhs)
            except (RuntimeError, ValueError):
                return None
            if not np.all(np.isfinite(sol)):
                return None
            # near-singular factorizations return garbage instead of raising
            if np.max(np.abs(K @ sol - rhs)) > 1e-7 * max(1.0, np.max(np.abs(rhs))):
                return None
            dz = sol[:nz]
            nu_act = sol[nz:]
            y = np.zeros(n_rows)
            y[act] = nu_act

            scale = max(1.0, float(np.max(np.abs(nu_act))) if nu_act.size else 1.0)
            dual_tol = 1e-10 * scale
            release = np.zeros(n_rows, dtype=bool)
            ineq_act = act[~eq[act]]
            wrong = np.where(state[ineq_act] == 1, y[ineq_act] < -dual_tol,
                             y[ineq_act] > dual_tol)
            release[ineq_act[wrong]] = True

            Az = A_csr @ dz
            below = (~pinned) & (Az < l - 1e-10)
            above = (~pinned) & (Az > u + 1e-10)

            if not (release.any() or below.any() or above.any()):
                self._as_state = state
                return dz, y
            state[release] = 0
            state[below] = -1
            state[above] = 1
        return None

    # -- objective helpers -------------------------------------------------
    def _objective(self, X, U, ocp: OcpProblem) -> float:
        J = 0.0
        for k, ref in enumerate(ocp.stages):
            dx = X[k] - ref.x
            du = U[k] - ref.u
            J += dx @ self.Q @ dx + du @ self.R @ du
        dxN = X[-1] - ocp.terminal.x_ref
        return float(J + dxN @ ocp.terminal.P @ dxN)

    def _gradient(self, X, U, ocp: OcpProblem, slack_weight: float) -> np.ndarray:
        g = np.zeros(self.nz)
        n, m = self.n, self.m
        for k, ref in enumerate(ocp.stages):
            g[n * k:n * (k + 1)] = 2.0 * self.Q @ (X[k] - ref.x)
            g[self._iu0 + m * k:self._iu0 + m * (k + 1)] = 2.0 * self.R @ (U[k] - ref.u)
        g[n * self.N:n * (self.N + 1)] = 2.0 * ocp.terminal.P @ (X[-1] - ocp.terminal.x_ref)
        g[self._islack] = slack_weight
        return g

    def _defects(self, X, U, ocp: OcpProblem) -> np.ndarray:
        sx, su = self.scaling.x_scale, self.scaling.u_scale
        Xp = X[:-1] * sx[None, :]
        Up = U * su[None, :]
        steps = np.empty_like(Xp)
        for label in {ref.label for ref in ocp.stages}:
            idx = [k for k, ref in enumerate(ocp.stages) if ref.label == label]
            d = ocp.stages[idx[0]].d
            steps[idx] = self.plant.step_batch(Xp[idx], Up[idx], d, self.dt)
        return steps / sx[None, :] - X[1:]

    def _stage_jacobians(self, X, U, ocp: OcpProblem):
        sx, su = self.scaling.x_scale, self.scaling.u_scale
        Xp = X[:-1] * sx[None, :]
        Up = U * su[None, :]
        A = np.empty((self.N, self.n, self.n))
        B = np.empty((self.N, self.n, self.m))
        for label in {ref.label for ref in ocp.stages}:
            idx = [k for k, ref in enumerate(ocp.stages) if ref.label == label]
            d = ocp.stages[idx[0]].d
            Ab, Bb = self.plant.step_jacobians_batch(Xp[idx], Up[idx], d, self.dt)
            A[idx] = Ab; B[idx] = Bb
        A *= sx[None, None, :] / sx[None, :, None]
        B *= su[None, None, :] / sx[None, :, None]
        return A, B

    # -- main entry ----------------------------------------------------------
    def rollout(self, x0, U, ocp: OcpProblem):
        """Defect-free state trajectory under the given input plan."""
        X = np.empty((self.N + 1, self.n))
        X[0] = x0
        sx = self.scaling.x_scale
        for k in range(self.N):
            x = self.plant.step(self.scaling.unscale_x(X[k]),
                                self.scaling.unscale_u(U[k]),
                                ocp.stages[k].d, self.dt)
            X[k + 1] = x / sx
        return X

    def cold_start(self, ocp: OcpProblem):
        """Roll the terminal reference's local feedback over the horizon.

        This lands the trajectory (near-)inside the terminal region even
        when the initial state belongs to a different operating point, so
        the optimizer starts close to feasibility.
        """
        ti = ocp.terminal
        X = np.empty((self.N + 1, self.n))
        U = np.empty((self.N, self.m))
        X[0] = ocp.x0
        sx = self.scaling.x_scale
        for k in range(self.N):
            u = ti.u_ref - ti.K @ (X[k] - ti.x_ref)
            U[k] = np.clip(u, self.u_lb, self.u_ub)
            x = self.plant.step(self.scaling.unscale_x(X[k]),
                                self.scaling.unscale_u(U[k]),
                                ocp.stages[k].d, self.dt)
            X[k + 1] = x / sx
        return X, U

    def shift_warm_start(self, X, U, ocp: OcpProblem):
        """Shift the previous solution one stage, repeating the last input."""
        U_new = np.vstack([U[1:], U[-1]])
        x_last = self.scaling.scale_x(self.plant.step(
            self.scaling.unscale_x(X[-1]), self.scaling.unscale_u(U[-1]),
            ocp.stages[-1].d, self.dt))
        X_new = np.vstack([X[1:], x_last])
        X_new[0] = ocp.x0
        return X_new, U_new

    def solve(self, ocp: OcpProblem, warm_start=None) -> OcpSolution:
        t_start = time.perf_counter()
        N, n, m = self.N, self.n, self.m
        if warm_start is None:
            X, U = self.cold_start(ocp)
        else:
            # re-roll the warm states so the starting point is dynamics-
            # consistent even when the schedule changed under the shift
            _, U = warm_start
            U = U.copy()
            try:
                X = self.rollout(ocp.x0, U, ocp)
            except SingularMassError:
                X, U = self.cold_start(ocp)

        H, H_full = self._hessian(ocp.terminal.P)
        mu = 100.0  # exact-penalty weight, raised from the multipliers below
        status = "max_iterations"
        kkt = np.inf
        qp = None
        defects = self._defects(X, U, ocp)

        # continuation: when the start lies far outside the terminal region,
        # converge against a relaxed radius first and tighten geometrically;
        # one overly ambitious linearized constraint otherwise stalls the loop
        dN0 = X[-1] - ocp.terminal.x_ref
        c_start = float(dN0 @ ocp.terminal.P @ dN0)
        alpha_goal = ocp.terminal.alpha
        alpha_cur = max(alpha_goal, 0.5 * c_start)

        def viol_term(X_c):
            dN = X_c[-1] - ocp.terminal.x_ref
            return max(0.0, float(dN @ ocp.terminal.P @ dN) - alpha_cur)

        def infeasibility(X_c, defects_c):
            return (float(np.sum(np.abs(defects_c)))
                    + float(np.sum(np.abs(ocp.x0 - X_c[0]))) + viol_term(X_c))

        def bounds_at(X_c, U_c, defects_c):
            l = np.empty(self.n_rows); u = np.empty(self.n_rows)
            l[:n] = u[:n] = ocp.x0 - X_c[0]
            l[n:self.n_eq] = u[n:self.n_eq] = defects_c.reshape(-1)
            xs = X_c[1:].reshape(-1)
            l[self.rows_sbox:self.rows_ubox] = np.maximum(np.tile(self.x_lb, N) - xs, -STEP_CAP)
            u[self.rows_sbox:self.rows_ubox] = np.minimum(np.tile(self.x_ub, N) - xs, STEP_CAP)
            us = U_c.reshape(-1)
            l[self.rows_ubox:self.rows_flow] = np.maximum(np.tile(self.u_lb, N) - us, -STEP_CAP)
            u[self.rows_ubox:self.rows_flow] = np.minimum(np.tile(self.u_ub, N) - us, STEP_CAP)
            flows = (U_c @ self.Tq_qp.T).reshape(-1)
            l[self.rows_flow:self.row_term] = -flows
            u[self.rows_flow:self.row_term] = np.tile(self.q_edge_ub_qp, N) - flows
            dxN = X_c[-1] - ocp.terminal.x_ref
            l[self.row_term] = -np.inf
            u[self.row_term] = alpha_cur - float(dxN @ ocp.terminal.P @ dxN)
            l[self.row_slack] = 0.0
            u[self.row_slack] = np.inf
            return l, u

        def solve_subproblem(grad, l, u, what):
            nonlocal qp
            out = self._solve_qp_active_set(H_full, grad, A_qp.tocsr(), l, u)
            if out is not None:
                if os.environ.get("DHGMPC_SQP_TRACE"):
                    print(f"    {what}: active-set exact solve")
                return out
            try:
                if qp is None:
                    qp = osqp.OSQP()
                    qp.setup(H, grad, A_qp, l, u, verbose=False, eps_abs=1e-6,
                             eps_rel=1e-6, polishing=True, max_iter=20000)
                else:
                    # identical sparsity pattern: warm-started value update
                    qp.update(q=grad, l=l, u=u, Ax=A_qp.data)
                res = qp.solve(raise_error=False)
            except _QP_DATA_ERRORS as exc:
                raise OcpInfeasibleError(
                    f"invalid {what} subproblem (likely crossed bounds): {exc}",
                    violated="state box") from exc
            if os.environ.get("DHGMPC_SQP_TRACE"):
                print(f"    {what}: qp={res.info.status}/{res.info.iter} "
                      f"polish={res.info.status_polish}")
            if "infeasible" in res.info.status:
                raise OcpInfeasibleError(
                    f"QP subproblem {res.info.status} ({what})",
                    violated="input/state/terminal constraint set")
            # an exact Newton step on the identified active set outranks the
            # first-order solution whenever it validates
            refined = self._refine_step(H_full, grad, A_qp, l, u, res.y)
            if refined is not None:
                return refined, res.y
            polished = getattr(res.info, "status_polish", 0) == 1
            if res.info.status_val in (1, 2) or polished:
                return res.x, res.y
            raise OcpInfeasibleError(
                f"QP subproblem {res.info.status} ({what})",
                violated="input/state/terminal constraint set")

        for it in range(1, SQP_MAX_ITER + 1):
            A_st, B_st = self._stage_jacobians(X, U, ocp)
            dxN = X[-1] - ocp.terminal.x_ref
            term_row = 2.0 * (ocp.terminal.P @ dxN)
            A_qp = self._constraint_matrix(A_st, B_st, term_row)
            grad = self._gradient(X, U, ocp, mu)
            l, u = bounds_at(X, U, defects)
            dz, y = solve_subproblem(grad, l, u, "step")

            dX = dz[: (N + 1) * n].reshape(N + 1, n)
            dU = dz[self._iu0:self._islack].reshape(N, m)
            slack = max(float(dz[self._islack]), 0.0)
            step_inf = float(np.max(np.abs(dz[: self._islack])))

            # first-order optimality: current point feasible, no move proposed
            max_defect = float(np.max(np.abs(defects))) if defects.size else 0.0
            kkt = max(max_defect, step_inf, viol_term(X))
            if kkt <= KKT_TOL and max_defect <= DEFECT_TOL:
                if alpha_cur <= alpha_goal:
                    status = "converged"
                    break
                alpha_cur = max(alpha_goal, 0.25 * alpha_cur)
                continue

            # exact-penalty weight from the dynamics and terminal multipliers
            y_all = np.concatenate([y[:self.n_eq], y[self.row_term:self.row_term + 1]])
            mu_req = 2.0 * float(np.max(np.abs(y_all))) if y_all.size else 1.0
            if mu < mu_req:
                mu = mu_req
                grad = self._gradient(X, U, ocp, mu)

            J0 = self._objective(X, U, ocp)
            c0 = infeasibility(X, defects)
            merit0 = J0 + mu * c0
            quad = 2.0 * (np.einsum("ki,ij,kj->", dX[:-1], self.Q, dX[:-1])
                          + np.einsum("ki,ij,kj->", dU, self.R, dU)
                          + dX[-1] @ ocp.terminal.P @ dX[-1])
            lin_term = float(grad[: self._islack] @ dz[: self._islack])
            model_merit = J0 + lin_term + 0.5 * float(quad) + slack * slack + mu * slack
            pred = max(merit0 - model_merit, 0.0)

            if step_inf <= 3e-4:
                # merit differences for such steps drown in rounding noise;
                # the exact subproblem step is trusted outright in this regime
                X, U = X + dX, U + dU
                defects = self._defects(X, U, ocp)
                continue

            accepted = False
            t = 1.0
            for half in range(LINE_SEARCH_HALVINGS):
                X_t = X + t * dX
                U_t = U + t * dU
                defects_t = self._defects(X_t, U_t, ocp)
                merit_t = self._objective(X_t, U_t, ocp) + mu * infeasibility(X_t, defects_t)
                if merit_t <= merit0 - 1e-4 * t * pred + 1e-12:
                    accepted = True
                    break
                if half == 0:
                    # second-order correction: a minimum-norm (in the Hessian
                    # metric) restoration of the constraints at the full trial
                    # point; no objective gradient, so it does not re-optimize
                    grad_soc = np.zeros(self.nz)
                    grad_soc[self._islack] = mu
                    l_t, u_t = bounds_at(X_t, U_t, defects_t)
                    try:
                        dz_c, _ = solve_subproblem(grad_soc, l_t, u_t, "correction")
                    except OcpInfeasibleError:
                        dz_c = None
                    if dz_c is not None:
                        X_c = X_t + dz_c[: (N + 1) * n].reshape(N + 1, n)
                        U_c = U_t + dz_c[self._iu0:self._islack].reshape(N, m)
                        defects_c = self._defects(X_c, U_c, ocp)
                        merit_c = self._objective(X_c, U_c, ocp) \
                            + mu * infeasibility(X_c, defects_c)
                        if merit_c <= merit0 - 1e-4 * pred + 1e-12:
                            X_t, U_t, defects_t = X_c, U_c, defects_c
                            accepted = True
                            break
                t *= 0.5
            if os.environ.get("DHGMPC_SQP_TRACE"):
                print(f"  it={it} step={step_inf:.3e} t={t:.4f} acc={accepted} "
                      f"mu={mu:.1e} J0={J0:.4f} c0={c0:.4e} viol={viol_term(X_t):.3e} "
                      f"pred={pred:.3e} dmerit={merit0 - merit_t:.3e}")
            if not accepted:
                # merit stalled at numerical noise: stop at the current point
                status = "stalled"
                break
            X, U, defects = X_t, U_t, defects_t

        flows = U @ self.Tq.T
        slack = np.minimum.reduce([
            (np.tile(self.u_ub, (N, 1)) - U).min(axis=1),
            (U - np.tile(self.u_lb, (N, 1))).min(axis=1),
            (np.tile(self.q_edge_ub, (N, 1)) - flows).min(axis=1),
            flows.min(axis=1),
        ])
        active = int(np.sum(slack < 1e-7))
        dxN = X[-1] - ocp.terminal.x_ref
        return OcpSolution(
            X=X, U=U, objective=self._objective(X, U, ocp), status=status,
            sqp_iterations=it, kkt_residual=float(kkt),
            max_defect=float(np.max(np.abs(defects))),
            terminal_cost=float(dxN @ ocp.terminal.P @ dxN),
            solve_time=time.perf_counter() - t_start,
            active_input_rows=active)


@dataclass
class MpcController:
    """Receding-horizon law: solve, apply the first input, shift, repeat."""

    solver: OcpSolver
    variant: str
    k_step: int
    steady_states: dict        # label -> SteadyState (physical units)
    ingredients: dict          # label -> TerminalIngredients (scaled)
    _warm: tuple | None = field(default=None, repr=False)
    _last_terminal: str | None = field(default=None, repr=False)
    _last_solution: OcpSolution | None = field(default=None, repr=False)

    def build_ocp(self, x_phys: np.ndarray, k: int) -> OcpProblem:
        labels, term_label = reference_schedule(self.variant, k, self.solver.N, self.k_step)
        scaling = self.solver.scaling
        stages = []
        for lab in labels:
            ss = self.steady_states[lab]
            stages.append(StageRef(x=scaling.scale_x(ss.x), u=scaling.scale_u(ss.u),
                                   d=ss.d, label=lab))
        return OcpProblem(x0=scaling.scale_x(x_phys), stages=tuple(stages),
                          terminal=self.ingredients[term_label])

    def step(self, x_phys: np.ndarray, k: int) -> tuple[np.ndarray, OcpSolution]:
        """Optimal input for the measured state; retains the shifted solution."""
        ocp = self.build_ocp(x_phys, k)
        warm = None
        warm_defect = np.nan
        if self._warm is not None:
            warm = self.solver.shift_warm_start(self._warm[0], self._warm[1], ocp)
            warm_defect = float(np.max(np.abs(
                self.solver._defects(warm[0], warm[1], ocp))))
            if ocp.terminal.label != self._last_terminal:
                # the terminal region jumped: the shifted plan aims at the old
                # set, so restart from the new terminal controller's rollout
                warm = None
        sol = self.solver.solve(ocp, warm_start=warm)
        sol.warm_start_defect = warm_defect
        self._warm = (sol.X, sol.U)
        self._last_terminal = ocp.terminal.label
        self._last_solution = sol
        u_phys = self.solver.scaling.unscale_u(sol.U[0])
        return u_phys, sol
