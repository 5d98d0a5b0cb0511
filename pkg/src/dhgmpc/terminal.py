"""Terminal cost and terminal region synthesis for one steady state.

Pipeline: LQR gain from a discrete Riccati equation (structure-preserving
doubling), terminal weight P from a discrete Lyapunov equation with a
slightly inflated right-hand side, and the region radius alpha from a
bisection whose inner step maximizes the cost-decrease violation over the
ellipsoid boundary with multi-start projected gradient ascent.

All quantities here live in scaled coordinates (masses in t, heat flows in
MW) to keep the matrices well conditioned.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constraints import OperatingLimits, UnitScaling
from .equilibrium import SteadyState
from .plant import DhgPlant

DARE_RESIDUAL_TOL = 1e-10
LYAP_RESIDUAL_TOL = 1e-10
ALPHA_REL_TOL = 1e-3
DECREASE_MARGIN = 1.05  # inflation of Q + K'RK in the Lyapunov right-hand side


class TerminalSynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class TerminalIngredients:
    """Terminal weight, region radius and LQR gain for one steady state.

    ``P`` defines the terminal cost |x - x_ref|_P^2 and the region
    {x : |x - x_ref|_P^2 <= alpha}; ``K`` is applied as u = u_ref - K (x - x_ref).
    All matrices act on scaled coordinates.
    """

    P: np.ndarray
    alpha: float
    K: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    x_ref: np.ndarray  # scaled
    u_ref: np.ndarray  # scaled
    label: str = ""

    def cost(self, x_scaled: np.ndarray) -> float:
        dx = x_scaled - self.x_ref
        return float(dx @ self.P @ dx)

    def contains(self, x_scaled: np.ndarray, slack: float = 0.0) -> bool:
        return self.cost(x_scaled) <= self.alpha + slack


def solve_dare(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Stabilizing solution of the discrete Riccati equation by doubling.

    Returns (P, K) with K the gain of u = -K x for the regulator problem.
    Raises if the iteration stalls or the residual exceeds the tolerance.
    """
    n = A.shape[0]
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for _ in range(max_iter):
        W = np.eye(n) + Gk @ Hk
        W_inv_A = np.linalg.solve(W, Ak)
        H_next = Hk + Ak.T @ Hk @ W_inv_A
        G_next = Gk + Ak @ np.linalg.solve(W, Gk) @ Ak.T
        A_next = Ak @ W_inv_A
        H_next = 0.5 * (H_next + H_next.T)
        if np.linalg.norm(H_next - Hk, "fro") <= 1e-15 * max(np.linalg.norm(H_next, "fro"), 1.0):
            Hk = H_next
            break
        Ak, Gk, Hk = A_next, G_next, H_next
    P = 0.5 * (Hk + Hk.T)
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    res = A.T @ P @ A - P - A.T @ P @ B @ K + Q
    rel = np.linalg.norm(res, "fro") / max(np.linalg.norm(P, "fro"), 1.0)
    if not np.isfinite(rel) or rel > DARE_RESIDUAL_TOL:
        raise TerminalSynthesisError(f"Riccati doubling residual {rel:.3e} too large")
    return P, K


def solve_discrete_lyapunov(A_cl: np.ndarray, Q_star: np.ndarray,
                            max_iter: int = 200) -> np.ndarray:
    """Solve A_cl' P A_cl - P = -Q_star by squaring (needs rho(A_cl) < 1)."""
    rho = np.max(np.abs(np.linalg.eigvals(A_cl)))
    if rho >= 1.0:
        raise TerminalSynthesisError(f"closed-loop spectral radius {rho:.6f} >= 1")
    P = Q_star.copy()
    S = A_cl.copy()
    for _ in range(max_iter):
        P = P + S.T @ P @ S
        S = S @ S
        if np.linalg.norm(S, "fro") < 1e-150:
            break
        if np.max(np.abs(S)) ** 2 * np.linalg.norm(P) < 1e-18 * np.linalg.norm(P):
            break
    P = 0.5 * (P + P.T)
    res = A_cl.T @ P @ A_cl - P + Q_star
    rel = np.linalg.norm(res, "fro") / max(np.linalg.norm(P, "fro"), 1.0)
    if rel > LYAP_RESIDUAL_TOL:
        raise TerminalSynthesisError(f"Lyapunov residual {rel:.3e} too large")
    return P


def ellipsoid_box_projection(P: np.ndarray, alpha: float) -> np.ndarray:
    """Half-widths of the smallest axis-aligned box containing the ellipsoid."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    P_inv = np.linalg.inv(P)
    diag = np.diag(P_inv)
    if np.any(diag <= 0):
        raise ValueError("P is not positive definite")
    return np.sqrt(alpha * diag)


class ScaledStep:
    """Euler step and Jacobians of the plant in scaled coordinates."""

    def __init__(self, plant, scaling: UnitScaling, d: np.ndarray, dt: float):
        self.plant = plant
        self.scaling = scaling
        self.d = np.asarray(d, float)
        self.dt = dt

    def step(self, xs: np.ndarray, us: np.ndarray) -> np.ndarray:
        x = self.scaling.unscale_x(xs)
        u = self.scaling.unscale_u(us)
        return self.scaling.scale_x(self.plant.step(x, u, self.d, self.dt))

    def jacobians(self, xs: np.ndarray, us: np.ndarray):
        x = self.scaling.unscale_x(xs)
        u = self.scaling.unscale_u(us)
        A, B = self.plant.step_jacobians(x, u, self.d, self.dt)
        sx, su = self.scaling.x_scale, self.scaling.u_scale
        return A * (sx[None, :] / sx[:, None]), B * (su[None, :] / sx[:, None])

    def step_batch(self, Xs: np.ndarray, Us: np.ndarray) -> np.ndarray:
        X = Xs * self.scaling.x_scale[None, :]
        U = Us * self.scaling.u_scale[None, :]
        return self.plant.step_batch(X, U, self.d, self.dt) / self.scaling.x_scale[None, :]

    def jacobians_batch(self, Xs: np.ndarray, Us: np.ndarray):
        X = Xs * self.scaling.x_scale[None, :]
        U = Us * self.scaling.u_scale[None, :]
        A, B = self.plant.step_jacobians_batch(X, U, self.d, self.dt)
        sx, su = self.scaling.x_scale, self.scaling.u_scale
        return A * (sx[None, None, :] / sx[None, :, None]), B * (su[None, None, :] / sx[None, :, None])


def _admissibility_cap(P, K, ss: SteadyState, limits: OperatingLimits,
                       scaling: UnitScaling) -> float:
    """Largest alpha whose ellipsoid respects the state box and, through the
    local feedback, every input constraint.  Exact for quadratic sets."""
    P_inv = np.linalg.inv(P)
    x_ref_s = scaling.scale_x(ss.x)
    cap = np.inf
    # state box, coordinatewise
    lb_s = scaling.scale_x(limits.x_lb)
    ub_s = scaling.scale_x(limits.x_ub)
    margins = np.minimum(x_ref_s - lb_s, ub_s - x_ref_s)
    if np.any(margins <= 0):
        raise TerminalSynthesisError("steady state violates the state box")
    cap = min(cap, float(np.min(margins ** 2 / np.diag(P_inv))))
    # input polyhedron mapped through u = u_ref - K dx
    G, h = limits.input_halfspaces()
    GSu = G * scaling.u_scale[None, :]
    slack = h - G @ ss.u
    if np.any(slack <= 0):
        raise TerminalSynthesisError("steady input is not interior to the input set")
    C = GSu @ K  # rows c_j so that constraint reads c_j . dx <= slack_j
    for j in range(C.shape[0]):
        w = float(C[j] @ P_inv @ C[j])
        if w > 1e-16:
            cap = min(cap, slack[j] ** 2 / w)
    return cap


def _max_violation_on_boundary(dyn: ScaledStep, ti_like: dict, alpha: float,
                               rng: np.random.Generator, n_starts: int = 100,
                               n_iter: int = 80) -> tuple[float, np.ndarray]:
    """Maximize the decrease violation over the ellipsoid boundary.

    phi(x) = |f(x, u(x)) - x_ref|_P^2 - |x - x_ref|_P^2 + l(x, u(x)) with
    u(x) = u_ref - K (x - x_ref).  Projected gradient ascent on the sphere
    parameterisation from normally distributed starts; returns the largest
    violation found and the corresponding boundary point (scaled).
    """
    P, K, Q, R = ti_like["P"], ti_like["K"], ti_like["Q"], ti_like["R"]
    x_ref, u_ref = ti_like["x_ref"], ti_like["u_ref"]
    L = np.linalg.cholesky(P)
    Linv_T = np.linalg.inv(L).T  # x = x_ref + sqrt(alpha) Linv_T y, |y| = 1
    sq = np.sqrt(alpha)

    def phi_and_grad(Y):
        # Y: (b, n) unit vectors
        dx = sq * Y @ Linv_T.T
        X = x_ref[None, :] + dx
        U = u_ref[None, :] - dx @ K.T
        df = dyn.step_batch(X, U) - x_ref[None, :]
        A, B = dyn.jacobians_batch(X, U)
        du = U - u_ref[None, :]
        vals = (np.einsum("bi,ij,bj->b", df, P, df)
                - np.einsum("bi,ij,bj->b", dx, P, dx)
                + np.einsum("bi,ij,bj->b", dx, Q, dx)
                + np.einsum("bi,ij,bj->b", du, R, du))
        Acl = A - B @ K[None, :, :]
        gx = (2.0 * np.einsum("bij,bi->bj", Acl, df @ P)
              - 2.0 * dx @ P + 2.0 * dx @ Q + 2.0 * (dx @ K.T) @ R @ K)
        grads = sq * gx @ Linv_T
        return vals, grads

    Y = rng.standard_normal((n_starts, P.shape[0]))
    Y /= np.linalg.norm(Y, axis=1, keepdims=True)
    vals, grads = phi_and_grad(Y)
    step = np.full(n_starts, 0.1)
    for _ in range(n_iter):
        tang = grads - (np.sum(grads * Y, axis=1, keepdims=True)) * Y
        Y_new = Y + step[:, None] * tang
        Y_new /= np.linalg.norm(Y_new, axis=1, keepdims=True)
        vals_new, grads_new = phi_and_grad(Y_new)
        improved = vals_new > vals
        step = np.where(improved, np.minimum(step * 1.3, 1.0), step * 0.4)
        Y = np.where(improved[:, None], Y_new, Y)
        vals = np.where(improved, vals_new, vals)
        grads = np.where(improved[:, None], grads_new, grads)
        if np.all(step < 1e-12):
            break
    i_best = int(np.argmax(vals))
    x_best = x_ref + sq * (Linv_T @ Y[i_best])
    return float(vals[i_best]), x_best


def find_alpha(dyn: ScaledStep, P, K, Q, R, ss: SteadyState,
               limits: OperatingLimits, scaling: UnitScaling,
               seed: int = 0, n_starts: int = 100) -> float:
    """Largest region radius passing admissibility and the decrease test.

    The admissibility cap (state box plus feedback-mapped input set) is
    exact; the decrease test relies on multi-start ascent, so globality is
    approximated, not certified.
    """
    cap = _admissibility_cap(P, K, ss, limits, scaling)
    ti_like = {"P": P, "K": K, "Q": Q, "R": R,
               "x_ref": scaling.scale_x(ss.x), "u_ref": scaling.scale_u(ss.u)}
    rng = np.random.default_rng(seed)

    def admissible_decrease(alpha: float) -> bool:
        worst, _ = _max_violation_on_boundary(dyn, ti_like, alpha, rng, n_starts)
        return worst <= 0.0

    if admissible_decrease(cap):
        return cap
    lo, hi = 0.0, cap
    while (hi - lo) > ALPHA_REL_TOL * hi:
        mid = 0.5 * (lo + hi)
        if admissible_decrease(mid):
            lo = mid
        else:
            hi = mid
    if lo <= 0.0:
        raise TerminalSynthesisError("no positive region radius passes the decrease test")
    return lo


def synthesize(plant: DhgPlant, ss: SteadyState, lin_scaled: tuple,
               Q: np.ndarray, R: np.ndarray, limits: OperatingLimits,
               scaling: UnitScaling, dt: float, seed: int = 0,
               label: str = "") -> TerminalIngredients:
    """Full synthesis for one steady state.

    ``lin_scaled`` is the pair (A_s, B_s) of Euler-step Jacobians in scaled
    coordinates at the steady state.
    """
    A_s, B_s = lin_scaled
    _, K = solve_dare(A_s, B_s, Q, R)
    A_cl = A_s - B_s @ K
    Q_star = DECREASE_MARGIN * (Q + K.T @ R @ K)
    Q_star = 0.5 * (Q_star + Q_star.T)
    P = solve_discrete_lyapunov(A_cl, Q_star)
    dyn = ScaledStep(plant, scaling, ss.d, dt)
    alpha = find_alpha(dyn, P, K, Q, R, ss, limits, scaling, seed=seed)
    return TerminalIngredients(P=P, alpha=alpha, K=K, Q=Q, R=R,
                               x_ref=scaling.scale_x(ss.x),
                               u_ref=scaling.scale_u(ss.u), label=label)


# ---- serialization ---------------------------------------------------------

def save_ingredients(directory, ti: TerminalIngredients) -> None:
    """Write P/K as CSV plus a small key=value metadata file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tag = ti.label or "terminal"
    np.savetxt(directory / f"{tag}_P.csv", ti.P, delimiter=",")
    np.savetxt(directory / f"{tag}_K.csv", ti.K, delimiter=",")
    np.savetxt(directory / f"{tag}_Q.csv", ti.Q, delimiter=",")
    np.savetxt(directory / f"{tag}_R.csv", ti.R, delimiter=",")
    np.savetxt(directory / f"{tag}_xref.csv", ti.x_ref, delimiter=",")
    np.savetxt(directory / f"{tag}_uref.csv", ti.u_ref, delimiter=",")
    with open(directory / f"{tag}_meta.txt", "w") as fh:
        fh.write(f"label = {ti.label}\n")
        fh.write(f"alpha = {float(ti.alpha)!r}\n")


def load_ingredients(directory, label: str) -> TerminalIngredients:
    directory = Path(directory)
    alpha = None
    with open(directory / f"{label}_meta.txt") as fh:
        for line in fh:
            key, _, value = line.partition("=")
            if key.strip() == "alpha":
                alpha = float(value)
    if alpha is None:
        raise ValueError(f"no alpha recorded in {label}_meta.txt")
    load = lambda part: np.atleast_2d(np.loadtxt(directory / f"{label}_{part}.csv", delimiter=","))
    return TerminalIngredients(
        P=load("P"), alpha=alpha, K=load("K"), Q=load("Q"), R=load("R"),
        x_ref=np.loadtxt(directory / f"{label}_xref.csv", delimiter=","),
        u_ref=np.loadtxt(directory / f"{label}_uref.csv", delimiter=","),
        label=label)
