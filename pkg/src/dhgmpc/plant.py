"""Continuous-time thermo-hydraulic grid model and its explicit Euler step.

The state stacks the storage hot-layer masses, all vertex temperatures and
all edge temperatures, x = (m_h, T_v, T_e).  Inputs are the chord mass
flows and the injected heat flows, u = (q_c, P_pr); disturbances are the
extracted heat flows and the ambient temperature, d = (P_d, T_a).  The
dynamics have the quasi-linear form

    M(x) xdot = A(q_c) x + E_u u + E_d d,

with a diagonal, state-dependent mass matrix.  Heat flows and heat-loss
coefficients are divided by the specific heat capacity internally so that
every term of the balance equations carries units of kg*K/s.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .topology import CycleBasis, DhgGraph, build_incidence

# Vertex masses below this are treated as a singular mass matrix (kg).
MIN_VERTEX_MASS = 1.0


class SingularMassError(RuntimeError):
    """A storage layer or junction mass dropped below the usable minimum."""


@dataclass(frozen=True)
class PlantParameters:
    """Physical constants and per-component geometry.

    Lengths/diameters are per edge (HX stations carry a nominal diameter
    and a fixed water volume instead of a pipe geometry).  Heat-loss
    coefficients are physical, in kJ/(K*s).
    """

    edge_length: np.ndarray        # m
    edge_diameter: np.ndarray      # m
    kappa_vertex: np.ndarray       # kJ/(K s)
    kappa_edge: np.ndarray         # kJ/(K s)
    tes_mass: np.ndarray           # kg, per storage (sorted by storage index)
    junction_mass: float = 3000.0  # kg
    hx_volume: float = 2.0         # m^3 of water per HX station
    rho: float = 988.05            # kg/m^3
    cp: float = 4.18               # kJ/(kg K)
    friction: float = 0.02         # Darcy friction factor

    def __post_init__(self):
        for name in ("edge_length", "edge_diameter", "kappa_vertex", "kappa_edge", "tes_mass"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.edge_length <= 0) or np.any(self.edge_diameter <= 0):
            raise ValueError("edge lengths and diameters must be positive")
        if np.any(self.tes_mass <= 0) or self.junction_mass <= 0 or self.hx_volume <= 0:
            raise ValueError("masses and volumes must be positive")
        if np.any(self.kappa_vertex < 0) or np.any(self.kappa_edge < 0):
            raise ValueError("heat-loss coefficients must be nonnegative")
        if self.rho <= 0 or self.cp <= 0:
            raise ValueError("rho and cp must be positive")


@dataclass(frozen=True)
class StateLayout:
    """Index bookkeeping for the stacked state vector."""

    n_tes: int
    n_vertices: int
    n_edges: int

    @property
    def n(self) -> int:
        return self.n_tes + self.n_vertices + self.n_edges

    @property
    def mass(self) -> slice:
        return slice(0, self.n_tes)

    @property
    def vertex_temp(self) -> slice:
        return slice(self.n_tes, self.n_tes + self.n_vertices)

    @property
    def edge_temp(self) -> slice:
        return slice(self.n_tes + self.n_vertices, self.n)

    @property
    def temps(self) -> slice:
        return slice(self.n_tes, self.n)


def size_pipes(graph: DhgGraph, params: PlantParameters, steady_edge_flows: np.ndarray,
               target_gradient: float = 300.0) -> np.ndarray:
    """Choose pipe diameters for a prescribed pressure gradient (Pa/m).

    Solves (friction/d) * rho v^2 / 2 = target_gradient per pipe with
    v = q / (rho pi d^2 / 4) by bisection on d in [1 mm, 2 m].  HX edges
    keep the diameter already present in ``params``.
    """
    q = np.asarray(steady_edge_flows, dtype=float)
    d_out = params.edge_diameter.copy()
    for j, e in enumerate(graph.edges):
        if e.cls != "pipe":
            continue
        if q[j] <= 0:
            raise ValueError(f"pipe {e.id} carries no steady flow and cannot be sized")

        def gradient(d: float) -> float:
            v = q[j] / (params.rho * np.pi * d * d / 4.0)
            return params.friction / d * params.rho * v * v / 2.0

        lo, hi = 1e-3, 2.0
        if (gradient(lo) - target_gradient) * (gradient(hi) - target_gradient) > 0:
            raise ValueError(f"no diameter in [1 mm, 2 m] meets the gradient for pipe {e.id}")
        while (hi - lo) > 1e-10 * hi:
            mid = 0.5 * (lo + hi)
            if gradient(mid) > target_gradient:
                lo = mid  # too narrow, pressure drop too large
            else:
                hi = mid
        d_out[j] = 0.5 * (lo + hi)
    return d_out


def edge_masses(graph: DhgGraph, params: PlantParameters) -> np.ndarray:
    """Water mass per edge: rho*A*L for pipes, a fixed volume for HXs."""
    m = np.empty(graph.n_edges)
    for j, e in enumerate(graph.edges):
        if params.edge_length[j] <= 0:
            raise ValueError(f"edge {e.id} has nonpositive length")
        if e.cls == "pipe":
            area = np.pi * params.edge_diameter[j] ** 2 / 4.0
            m[j] = params.rho * area * params.edge_length[j]
        else:
            m[j] = params.rho * params.hx_volume
    return m


class DhgPlant:
    """Assembled grid model: balance equations, Jacobians, Euler stepping."""

    def __init__(self, graph: DhgGraph, basis: CycleBasis, params: PlantParameters):
        self.graph = graph
        self.basis = basis
        self.params = params
        self.B = build_incidence(graph)
        self.F = basis.F.astype(float)
        self.layout = StateLayout(len(graph.tes_pairs()), graph.n_vertices, graph.n_edges)

        Babs = np.abs(self.B)
        self.B_plus = 0.5 * (Babs + self.B)    # edge -> target vertex
        self.B_minus = 0.5 * (Babs - self.B)   # edge -> source vertex
        self.Bh_Ft = (self.B[graph.hot_rows, :] @ self.F.T).astype(float)

        self.producer_cols = graph.edge_cols("producer_hx")
        self.consumer_cols = graph.edge_cols("consumer_hx")
        n_e = graph.n_edges
        self.S_pr = np.zeros((n_e, len(self.producer_cols)))
        self.S_pr[self.producer_cols, np.arange(len(self.producer_cols))] = 1.0
        self.S_d = np.zeros((n_e, len(self.consumer_cols)))
        self.S_d[self.consumer_cols, np.arange(len(self.consumer_cols))] = 1.0

        self.kv_norm = params.kappa_vertex / params.cp  # kg/s
        self.ke_norm = params.kappa_edge / params.cp
        self.edge_mass = edge_masses(graph, params)

        self.n = self.layout.n
        self.n_u = basis.n_cycles + len(self.producer_cols)
        self.n_d = len(self.consumer_cols) + 1
        self.n_q = basis.n_cycles

        # unit responses of the temperature coupling block, one per chord
        n_t = graph.n_vertices + n_e
        self.A_hat = np.empty((self.n_q, n_t, n_t))
        for i in range(self.n_q):
            ei = np.zeros(self.n_q)
            ei[i] = 1.0
            self.A_hat[i] = self.temperature_coupling(ei)

        self.E_u = np.zeros((self.n, self.n_u))
        self.E_u[self.layout.mass, : self.n_q] = self.Bh_Ft
        self.E_u[self.layout.edge_temp, self.n_q:] = self.S_pr / params.cp
        self.E_d = np.zeros((self.n, self.n_d))
        self.E_d[self.layout.edge_temp, :-1] = -self.S_d / params.cp
        self.E_d[self.layout.vertex_temp, -1] = self.kv_norm
        self.E_d[self.layout.edge_temp, -1] = self.ke_norm

        self.A0 = np.zeros((self.n, self.n))
        tt = np.arange(self.layout.temps.start, self.layout.temps.stop)
        self.A0[tt, tt] = -np.concatenate([self.kv_norm, self.ke_norm])

        # constant part of the vertex-mass diagonal; storage layers are
        # filled in per state
        pairs = graph.tes_pairs()
        self._hot_vrows = np.array([h for _, h, _ in pairs], dtype=int)
        self._cold_vrows = np.array([c for _, _, c in pairs], dtype=int)
        self._mv_const = np.zeros(graph.n_vertices)
        self._mv_const[graph.junction_rows] = params.junction_mass

    # ---- state bookkeeping ---------------------------------------------
    def split_state(self, x: np.ndarray):
        lo = self.layout
        return x[lo.mass], x[lo.vertex_temp], x[lo.edge_temp]

    def state_labels(self) -> list[str]:
        labels = [f"m_h_tes{t}" for t, _, _ in self.graph.tes_pairs()]
        labels += [f"T_v_{v.id}" for v in self.graph.vertices]
        labels += [f"T_e_{e.id}" for e in self.graph.edges]
        return labels

    def input_labels(self) -> list[str]:
        labels = [f"q_c_{cid}" for cid in self.basis.chords]
        labels += [f"P_pr_{self.graph.edges[j].id}" for j in self.producer_cols]
        return labels

    # ---- model assembly --------------------------------------------------
    def temperature_coupling(self, q_c: np.ndarray) -> np.ndarray:
        """Flow-dependent coupling of vertex and edge temperatures."""
        q_e = self.F.T @ q_c
        tl = -np.diag(self.B_plus @ q_e)
        tr = self.B_plus * q_e[None, :]
        bl = q_e[:, None] * self.B_minus.T
        br = -np.diag(q_e)
        return np.block([[tl, tr], [bl, br]])

    def mass_diag(self, x: np.ndarray) -> np.ndarray:
        """Diagonal of M(x); raises when a vertex mass is not usable."""
        m_h, _, _ = self.split_state(x)
        mv = self._mv_const.copy()
        mv[self._hot_vrows] = m_h
        mv[self._cold_vrows] = self.params.tes_mass - m_h
        if np.any(mv < MIN_VERTEX_MASS):
            bad = int(np.argmin(mv))
            raise SingularMassError(
                f"vertex {self.graph.vertices[bad].id} mass {mv[bad]:.3g} kg "
                f"is below {MIN_VERTEX_MASS} kg"
            )
        return np.concatenate([np.ones(self.layout.n_tes), mv, self.edge_mass])

    def assemble(self, x: np.ndarray, u: np.ndarray):
        """Return (M_diag, A, E_u, E_d) evaluated at the given state/input."""
        q_c = u[: self.n_q]
        A = self.A0.copy()
        tt = self.layout.temps
        A[tt, tt] += self.temperature_coupling(q_c)
        return self.mass_diag(x), A, self.E_u, self.E_d

    def balance(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Right-hand side before division by the masses, g = M(x) xdot."""
        q_c = u[: self.n_q]
        g = self.A0 @ x + self.E_u @ u + self.E_d @ d
        tt = self.layout.temps
        g[tt] += self.temperature_coupling(q_c) @ x[tt]
        return g

    def f(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Continuous-time state derivative."""
        return self.balance(x, u, d) / self.mass_diag(x)

    def step(self, x: np.ndarray, u: np.ndarray, d: np.ndarray, dt: float) -> np.ndarray:
        """One explicit Euler step of size dt (seconds)."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        return x + dt * self.f(x, u, d)

    # ---- exact Jacobians -------------------------------------------------
    def jac_x(self, x: np.ndarray, u: np.ndarray, d: np.ndarray) -> np.ndarray:
        """d f / d x, including the storage-mass dependence of M(x)."""
        mdiag = self.mass_diag(x)
        q_c = u[: self.n_q]
        Jg = self.A0.copy()
        tt = self.layout.temps
        Jg[tt, tt] += self.temperature_coupling(q_c)
        J = Jg / mdiag[:, None]
        # rows whose mass depends on m_h pick up a -f * dm/dm_h / m term
        fval = self.balance(x, u, d) / mdiag
        off = self.layout.n_tes
        for i in range(self.layout.n_tes):
            hrow = off + self._hot_vrows[i]
            crow = off + self._cold_vrows[i]
            J[hrow, i] -= fval[hrow] / mdiag[hrow]
            J[crow, i] += fval[crow] / mdiag[crow]
        return J

    def jac_u(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """d f / d u."""
        mdiag = self.mass_diag(x)
        tt = self.layout.temps
        Jg = self.E_u.copy()
        Jg[tt, : self.n_q] += np.einsum("itk,k->ti", self.A_hat, x[tt])
        return Jg / mdiag[:, None]

    def step_jacobians(self, x, u, d, dt):
        """Jacobians of the Euler map x + dt*f."""
        A = np.eye(self.n) + dt * self.jac_x(x, u, d)
        B = dt * self.jac_u(x, u)
        return A, B

    # ---- batched evaluation (same math, leading batch axis) ---------------
    def mass_diag_batch(self, X: np.ndarray) -> np.ndarray:
        m_h = X[:, self.layout.mass]
        mv = np.broadcast_to(self._mv_const, (X.shape[0], self.layout.n_vertices)).copy()
        mv[:, self._hot_vrows] = m_h
        mv[:, self._cold_vrows] = self.params.tes_mass[None, :] - m_h
        if np.any(mv < MIN_VERTEX_MASS):
            raise SingularMassError("a vertex mass in the batch is below the usable minimum")
        ones = np.ones((X.shape[0], self.layout.n_tes))
        me = np.broadcast_to(self.edge_mass, (X.shape[0], self.layout.n_edges))
        return np.concatenate([ones, mv, me], axis=1)

    def balance_batch(self, X, U, d):
        tt = self.layout.temps
        G = X @ self.A0.T + U @ self.E_u.T + (self.E_d @ d)[None, :]
        qc = U[:, : self.n_q]
        G[:, tt] += np.einsum("bi,itk,bk->bt", qc, self.A_hat, X[:, tt])
        return G

    def step_batch(self, X, U, d, dt):
        return X + dt * self.balance_batch(X, U, d) / self.mass_diag_batch(X)

    def step_jacobians_batch(self, X, U, d, dt):
        """Per-sample Euler-step Jacobians, shapes (b, n, n) and (b, n, m)."""
        b = X.shape[0]
        tt = self.layout.temps
        mdiag = self.mass_diag_batch(X)
        qc = U[:, : self.n_q]
        Jg = np.broadcast_to(self.A0, (b, self.n, self.n)).copy()
        Jg[:, tt, tt] += np.einsum("bi,itk->btk", qc, self.A_hat)
        J = Jg / mdiag[:, :, None]
        fval = self.balance_batch(X, U, d) / mdiag
        off = self.layout.n_tes
        for i in range(self.layout.n_tes):
            hrow = off + self._hot_vrows[i]
            crow = off + self._cold_vrows[i]
            J[:, hrow, i] -= fval[:, hrow] / mdiag[:, hrow]
            J[:, crow, i] += fval[:, crow] / mdiag[:, crow]
        A = np.eye(self.n)[None, :, :] + dt * J
        Bg = np.broadcast_to(self.E_u, (b, self.n, self.n_u)).copy()
        Bg[:, tt, : self.n_q] += np.einsum("itk,bk->bti", self.A_hat, X[:, tt])
        B = dt * Bg / mdiag[:, :, None]
        return A, B

    # ---- diagnostics -------------------------------------------------------
    def heat_loss_fraction(self, u: np.ndarray, d: np.ndarray) -> float:
        """Share of the injected heat lost to the surroundings, at steady state."""
        p_in = float(np.sum(u[self.n_q:]))
        p_out = float(np.sum(d[:-1]))
        if p_in <= 0:
            raise ValueError("no injected heat; loss fraction undefined")
        return (p_in - p_out) / p_in


class LinearizedPlant:
    """Linear stand-in for :class:`DhgPlant` around a reference point.

    Shares the stepping/Jacobian interface, which lets the optimal control
    and terminal-set machinery run on an exactly linear model.
    """

    def __init__(self, plant: DhgPlant, x_ref, u_ref, d_ref, dt: float):
        self.n = plant.n
        self.n_u = plant.n_u
        self.x_ref = np.asarray(x_ref, float)
        self.u_ref = np.asarray(u_ref, float)
        self.dt = dt
        self._A, self._B = plant.step_jacobians(self.x_ref, self.u_ref, np.asarray(d_ref, float), dt)

    def step(self, x, u, d, dt=None):
        return self.x_ref + self._A @ (x - self.x_ref) + self._B @ (u - self.u_ref)

    def step_jacobians(self, x, u, d, dt=None):
        return self._A, self._B

    def step_batch(self, X, U, d, dt=None):
        return self.x_ref[None, :] + (X - self.x_ref) @ self._A.T + (U - self.u_ref) @ self._B.T

    def step_jacobians_batch(self, X, U, d, dt=None):
        b = X.shape[0]
        return (np.broadcast_to(self._A, (b, *self._A.shape)).copy(),
                np.broadcast_to(self._B, (b, *self._B.shape)).copy())


def with_sized_pipes(graph: DhgGraph, params: PlantParameters, steady_edge_flows: np.ndarray,
                     target_gradient: float = 300.0) -> PlantParameters:
    """Parameters with pipe diameters sized for the given steady flows."""
    d = size_pipes(graph, params, steady_edge_flows, target_gradient)
    return replace(params, edge_diameter=d)
