"""Operating envelope: state/input boxes, per-edge flow caps, unit scaling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OperatingLimits:
    """Box bounds on states and inputs plus per-edge flow caps.

    The input set is { u : u_lb <= u <= u_ub, 0 <= F^T q_c <= q_edge_ub },
    the state set the box [x_lb, x_ub].  All values are physical units.
    """

    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    q_edge_ub: np.ndarray
    F: np.ndarray  # chord-to-edge flow map, needed for the polyhedral rows

    def __post_init__(self):
        for name in ("x_lb", "x_ub", "u_lb", "u_ub", "q_edge_ub"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.x_lb >= self.x_ub) or np.any(self.u_lb >= self.u_ub):
            raise ValueError("lower bounds must lie strictly below upper bounds")

    @property
    def n_q(self) -> int:
        return self.F.shape[0]

    def flow_map(self) -> np.ndarray:
        """Map from the full input vector to the per-edge flows."""
        n_u = len(self.u_lb)
        T = np.zeros((self.F.shape[1], n_u))
        T[:, : self.n_q] = self.F.T
        return T

    def input_halfspaces(self) -> tuple[np.ndarray, np.ndarray]:
        """All input constraints as rows of G u <= h."""
        n_u = len(self.u_lb)
        eye = np.eye(n_u)
        T = self.flow_map()
        G = np.vstack([eye, -eye, T, -T])
        h = np.concatenate([self.u_ub, -self.u_lb, self.q_edge_ub, np.zeros(T.shape[0])])
        return G, h

    def input_margin(self, u: np.ndarray) -> float:
        """Smallest slack of u against all input constraints (negative: violated)."""
        G, h = self.input_halfspaces()
        return float(np.min(h - G @ u))

    def state_margin(self, x: np.ndarray) -> float:
        return float(min(np.min(self.x_ub - x), np.min(x - self.x_lb)))


@dataclass(frozen=True)
class UnitScaling:
    """Diagonal state/input scalings used by the controller and cost terms.

    Masses are expressed in tonnes and heat flows in MW on the scaled side;
    temperatures and mass flows keep their physical units.
    """

    x_scale: np.ndarray
    u_scale: np.ndarray

    def scale_x(self, x: np.ndarray) -> np.ndarray:
        return x / self.x_scale

    def unscale_x(self, xs: np.ndarray) -> np.ndarray:
        return xs * self.x_scale

    def scale_u(self, u: np.ndarray) -> np.ndarray:
        return u / self.u_scale

    def unscale_u(self, us: np.ndarray) -> np.ndarray:
        return us * self.u_scale


def default_scaling(n_tes: int, n_vertices: int, n_edges: int, n_q: int, n_pr: int) -> UnitScaling:
    x_scale = np.concatenate([
        1e3 * np.ones(n_tes),             # storage masses: kg -> t
        np.ones(n_vertices + n_edges),    # temperatures stay in deg C
    ])
    u_scale = np.concatenate([
        np.ones(n_q),                     # chord flows stay in kg/s
        1e3 * np.ones(n_pr),              # heat flows: kW -> MW
    ])
    return UnitScaling(x_scale, u_scale)
