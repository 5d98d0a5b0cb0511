"""Steady operating points of the grid model.

A steady state pins the hot-layer temperatures of designated storages, the
consumer return temperatures and the storage fill fractions, and solves the
remaining balance equations for temperatures, chord flows and injections
with a damped Newton iteration.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .constraints import OperatingLimits
from .plant import DhgPlant

MAX_NEWTON_ITER = 200
MAX_DAMPING_HALVINGS = 30
RESIDUAL_TOL = 1e-9


class SteadyStateError(RuntimeError):
    """Newton iteration failed or produced an inadmissible operating point."""


@dataclass(frozen=True)
class SteadyStateSpec:
    """Targets defining one steady operating point.

    demands:       extracted heat per consumer HX, kW, in edge order
    t_ambient:     deg C
    pinned_temps:  (vertex id, deg C) pairs; vertices must be storage hot layers
    return_temps:  (edge id, deg C) pairs for every consumer HX outlet
    fills:         hot-layer fill fraction per storage index
    """

    demands: tuple
    t_ambient: float
    pinned_temps: tuple
    return_temps: tuple
    fills: dict = field(default_factory=dict)

    def fill_fraction(self, tes_index: int) -> float:
        frac = self.fills.get(tes_index, 0.5)
        if not 0.0 < frac < 1.0:
            raise ValueError(f"fill fraction for storage {tes_index} must be in (0, 1)")
        return frac


@dataclass(frozen=True)
class SteadyState:
    """A fixed point (x, u, d) of the dynamics, with its residual norm."""

    x: np.ndarray
    u: np.ndarray
    d: np.ndarray
    residual_norm: float
    label: str = ""


@dataclass(frozen=True)
class SteadyStateReport:
    ok: bool
    residual_norm: float
    min_edge_flow: float
    input_margin: float
    state_margin: float
    messages: tuple


def solve_steady_state(plant: DhgPlant, spec: SteadyStateSpec, label: str = "") -> SteadyState:
    """Solve the pinned balance equations by damped Newton iteration.

    Unknowns are the vertex/edge temperatures, chord flows and injections;
    the hot-layer masses are fixed through the fill fractions.  The stacked
    system (all balance equations plus the pin equations) must be square,
    which holds when the pins number ``n_q + n_pr - n_tes``.
    """
    graph, layout = plant.graph, plant.layout
    nv, ne, nq = layout.n_vertices, layout.n_edges, plant.n_q
    npr = plant.n_u - nq
    n_t = nv + ne

    if len(spec.demands) != len(plant.consumer_cols):
        raise ValueError("one demand per consumer HX is required")
    n_pins = len(spec.pinned_temps) + len(spec.return_temps)
    if n_t + layout.n_tes + n_pins != n_t + nq + npr:
        raise SteadyStateError(
            f"pin count {n_pins} does not square the system "
            f"(need {nq + npr - layout.n_tes})"
        )

    hot_ids = {graph.vertices[i].id for i in graph.hot_rows}
    pin_rows = []
    for vid, val in spec.pinned_temps:
        if vid not in hot_ids:
            raise ValueError(f"pinned vertex {vid} is not a storage hot layer")
        pin_rows.append((graph.vertex_index(vid), float(val)))
    ret_rows = []
    consumer_ids = {graph.edges[j].id: j for j in plant.consumer_cols}
    for eid, val in spec.return_temps:
        if eid not in consumer_ids:
            raise ValueError(f"return-temperature pin {eid} is not a consumer HX")
        ret_rows.append((consumer_ids[eid], float(val)))

    m_h = np.array([spec.fill_fraction(t) * plant.params.tes_mass[k]
                    for k, (t, _, _) in enumerate(graph.tes_pairs())])
    d = np.concatenate([np.asarray(spec.demands, float), [spec.t_ambient]])

    pinned_vals = [v for _, v in pin_rows] + [v for _, v in ret_rows]
    t_init = float(np.mean(pinned_vals)) if pinned_vals else spec.t_ambient
    T0 = np.full(n_t, t_init)
    # seed the pins so the initial temperature field is not uniform (a
    # uniform field hides the flows from the Jacobian)
    for row, val in pin_rows:
        T0[row] = val
    for row, val in ret_rows:
        T0[nv + row] = val
    y = np.concatenate([T0, np.full(nq, 1.0),
                        np.full(npr, max(float(np.sum(spec.demands)), 1.0) / max(npr, 1))])
    # preferred point for directions the equations leave free (uniform
    # temperature fields make some flows indeterminate)
    y_prior = np.concatenate([T0, np.zeros(nq), np.zeros(npr)])

    def unpack(y):
        T = y[:n_t]
        q_c = y[n_t:n_t + nq]
        p_pr = y[n_t + nq:]
        x = np.concatenate([m_h, T])
        u = np.concatenate([q_c, p_pr])
        return x, u

    def residual(y):
        x, u = unpack(y)
        g = plant.balance(x, u, d)
        pins = [x[layout.n_tes + row] - val for row, val in pin_rows]
        pins += [x[layout.n_tes + nv + row] - val for row, val in ret_rows]
        return np.concatenate([g, pins])

    def jacobian(y):
        x, u = unpack(y)
        q_c = u[:nq]
        J = np.zeros((plant.n + n_pins, n_t + nq + npr))
        tt = layout.temps
        # balance rows: mass block then energy block
        J[layout.mass, n_t:n_t + nq] = plant.Bh_Ft
        J[tt, :n_t] = plant.temperature_coupling(q_c) + np.diag(
            -np.concatenate([plant.kv_norm, plant.ke_norm]))
        J[tt, n_t:n_t + nq] = np.einsum("itk,k->ti", plant.A_hat, x[tt])
        J[layout.edge_temp, n_t + nq:] = plant.S_pr / plant.params.cp
        for k, (row, _) in enumerate(pin_rows):
            J[plant.n + k, row] = 1.0
        for k, (row, _) in enumerate(ret_rows):
            J[plant.n + len(pin_rows) + k, nv + row] = 1.0
        return J

    def newton_step(J, r, y):
        """Min-norm Newton step; null-space directions move toward the prior."""
        U, s, Vt = np.linalg.svd(J)
        rank = int(np.sum(s > 1e-12 * s[0]))
        Ur, sr, Vr = U[:, :rank], s[:rank], Vt[:rank]
        step = Vr.T @ ((Ur.T @ -r) / sr)
        if rank < J.shape[1]:
            Vn = Vt[rank:]
            step = step + Vn.T @ (Vn @ (y_prior - y))
        return step

    r = residual(y)
    norm = np.linalg.norm(r, np.inf)
    for _ in range(MAX_NEWTON_ITER):
        if norm <= RESIDUAL_TOL:
            break
        step = newton_step(jacobian(y), r, y)
        t = 1.0
        for _ in range(MAX_DAMPING_HALVINGS):
            y_new = y + t * step
            r_new = residual(y_new)
            norm_new = np.linalg.norm(r_new, np.inf)
            if norm_new < norm:
                break
            t *= 0.5
        else:
            raise SteadyStateError("Newton damping exhausted without progress")
        y, r, norm = y_new, r_new, norm_new
    else:
        raise SteadyStateError(f"no convergence after {MAX_NEWTON_ITER} iterations "
                               f"(residual {norm:.3e})")

    x, u = unpack(y)
    q_e = plant.F.T @ u[:nq]
    if np.any(q_e < 0):
        j = int(np.argmin(q_e))
        raise SteadyStateError(
            f"edge {graph.edges[j].id} carries negative implied flow {q_e[j]:.4g} kg/s")
    f_norm = float(np.linalg.norm(plant.f(x, u, d), np.inf))
    return SteadyState(x=x, u=u, d=d, residual_norm=f_norm, label=label)


def validate_steady_state(plant: DhgPlant, ss: SteadyState,
                          limits: OperatingLimits | None = None) -> SteadyStateReport:
    """Re-check the fixed-point property, flow signs and constraint margins."""
    from .plant import SingularMassError

    messages = []
    try:
        f_norm = float(np.linalg.norm(plant.f(ss.x, ss.u, ss.d), np.inf))
    except SingularMassError as exc:
        f_norm = np.inf
        messages.append(str(exc))
    if f_norm > 1e-8:
        messages.append(f"residual {f_norm:.3e} exceeds 1e-8")
    q_e = plant.F.T @ ss.u[: plant.n_q]
    min_flow = float(np.min(q_e)) if q_e.size else 0.0
    if min_flow < 0:
        messages.append("negative implied edge flow")
    in_margin = np.inf
    st_margin = np.inf
    if limits is not None:
        in_margin = limits.input_margin(ss.u)
        st_margin = limits.state_margin(ss.x)
        if in_margin <= 0:
            messages.append("input lies on or outside the admissible set")
        if st_margin <= 0:
            messages.append("state lies on or outside the state box")
    return SteadyStateReport(ok=not messages, residual_norm=f_norm,
                             min_edge_flow=min_flow, input_margin=float(in_margin),
                             state_margin=float(st_margin), messages=tuple(messages))
