"""Scenario files: a single TOML document defines grid, parameters, operating
points and controller settings, and everything downstream is derived from it.

``load_scenario``/``save_scenario`` round-trip the document; ``prepare_case``
runs the model-building pipeline (structure checks, steady states, pipe
sizing, constraint envelope) and returns a ready-to-use bundle.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import tomli

from .constraints import OperatingLimits, UnitScaling, default_scaling
from .equilibrium import SteadyState, SteadyStateSpec, solve_steady_state
from .plant import DhgPlant, PlantParameters, with_sized_pipes
from .topology import (CycleBasis, DhgGraph, Edge, Vertex, build_incidence,
                       check_stabilizability_structure, cycle_basis)


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


@dataclass(frozen=True)
class SetpointSection:
    demands_kw: tuple
    ambient_c: float
    pinned_temps_c: tuple   # ((vertex id, deg C), ...)
    return_temps_c: tuple   # ((edge id, deg C), ...)
    fills: tuple            # ((tes index, fraction), ...)


@dataclass(frozen=True)
class MpcSection:
    horizon: int
    dt_s: float
    n_sim: int
    k_step: int
    q_mass: float = 1.0
    q_temp: float = 1.0
    r_flow: float = 0.1
    r_power: float = 1.0
    velocity_cap_m_per_s: float = 3.0
    temp_bounds_c: tuple = (5.0, 110.0)
    p_pr_ub_kw: tuple = ()
    initial_temp_offset_c: float = -2.0
    initial_mass_factor: float = 0.95


@dataclass(frozen=True)
class ParamSection:
    edge_length_m: tuple
    tes_mass_kg: tuple
    kappa_vertex_kj_per_k_s: tuple
    kappa_edge_kj_per_k_s: tuple
    junction_mass_kg: float = 3000.0
    hx_volume_m3: float = 2.0
    hx_diameter_m: float = 0.15
    rho_kg_per_m3: float = 988.05
    cp_kj_per_kg_k: float = 4.18
    friction_factor: float = 0.02
    design_pressure_gradient_pa_per_m: float = 300.0


@dataclass(frozen=True)
class Scenario:
    name: str
    vertices: tuple           # (id, class, tes-or-None) triples
    edges: tuple              # (id, class, source, target) quadruples
    params: ParamSection
    setpoint_first: SetpointSection
    setpoint_second: SetpointSection
    mpc: MpcSection
    seed: int

    def graph(self) -> DhgGraph:
        return DhgGraph(
            tuple(Vertex(i, c, t) for i, c, t in self.vertices),
            tuple(Edge(i, c, s, t) for i, c, s, t in self.edges))


# ---- parsing ----------------------------------------------------------------

_TOP_KEYS = {"meta", "graph", "params", "setpoint", "mpc", "seed"}


def _require_keys(table: dict, allowed: dict, where: str) -> dict:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ScenarioError(f"unknown key(s) {sorted(unknown)} in [{where}]")
    missing = {k for k, required in allowed.items() if required and k not in table}
    if missing:
        raise ScenarioError(f"missing key(s) {sorted(missing)} in [{where}]")
    return table


def _pairs(table: dict, caster=float) -> tuple:
    return tuple((key, caster(value)) for key, value in table.items())


def _as_tuple(value, n: int, what: str) -> tuple:
    if isinstance(value, (int, float)):
        return tuple(float(value) for _ in range(n))
    if len(value) != n:
        raise ScenarioError(f"{what} needs 1 or {n} entries, got {len(value)}")
    return tuple(float(v) for v in value)


def _parse_setpoint(table: dict, where: str) -> SetpointSection:
    _require_keys(table, {"demands_kw": True, "ambient_c": True, "pinned_temps_c": True,
                          "return_temps_c": True, "fills": False}, where)
    fills = tuple((int(k), float(v)) for k, v in table.get("fills", {}).items())
    return SetpointSection(
        demands_kw=tuple(float(v) for v in table["demands_kw"]),
        ambient_c=float(table["ambient_c"]),
        pinned_temps_c=_pairs(table["pinned_temps_c"]),
        return_temps_c=_pairs(table["return_temps_c"]),
        fills=fills)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"TOML parse error: {exc}") from exc
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown top-level section(s) {sorted(unknown)}")
    for section in ("graph", "params", "setpoint", "mpc"):
        if section not in doc:
            raise ScenarioError(f"missing [{section}] section")

    meta = _require_keys(doc.get("meta", {}), {"name": False}, "meta")
    name = str(meta.get("name", "unnamed"))

    gtab = _require_keys(doc["graph"], {"vertices": True, "edges": True}, "graph")
    vertices = []
    for row in gtab["vertices"]:
        _require_keys(row, {"id": True, "class": True, "tes": False}, "graph.vertices")
        vertices.append((str(row["id"]), str(row["class"]),
                         int(row["tes"]) if "tes" in row else None))
    edges = []
    for row in gtab["edges"]:
        _require_keys(row, {"id": True, "class": True, "source": True, "target": True},
                      "graph.edges")
        edges.append((str(row["id"]), str(row["class"]), str(row["source"]), str(row["target"])))
    n_v, n_e = len(vertices), len(edges)

    ptab = _require_keys(doc["params"], {
        "edge_length_m": True, "tes_mass_kg": True, "kappa_kj_per_k_s": True,
        "junction_mass_kg": False, "hx_volume_m3": False, "hx_diameter_m": False,
        "rho_kg_per_m3": False, "cp_kj_per_kg_k": False, "friction_factor": False,
        "design_pressure_gradient_pa_per_m": False}, "params")
    kappa = float(ptab["kappa_kj_per_k_s"])
    extra = {k: float(ptab[k]) for k in ("junction_mass_kg", "hx_volume_m3", "hx_diameter_m",
                                         "rho_kg_per_m3", "cp_kj_per_kg_k", "friction_factor",
                                         "design_pressure_gradient_pa_per_m") if k in ptab}
    params = ParamSection(
        edge_length_m=_as_tuple(ptab["edge_length_m"], n_e, "edge_length_m"),
        tes_mass_kg=tuple(float(v) for v in ptab["tes_mass_kg"]),
        kappa_vertex_kj_per_k_s=tuple(kappa for _ in range(n_v)),
        kappa_edge_kj_per_k_s=tuple(kappa for _ in range(n_e)),
        **extra)

    stab = doc["setpoint"]
    if set(stab) != {"I", "II"}:
        raise ScenarioError("expected exactly [setpoint.I] and [setpoint.II]")
    sp1 = _parse_setpoint(stab["I"], "setpoint.I")
    sp2 = _parse_setpoint(stab["II"], "setpoint.II")

    mtab = _require_keys(doc["mpc"], {
        "horizon": True, "dt_s": True, "n_sim": True, "k_step": True,
        "q_mass": False, "q_temp": False, "r_flow": False, "r_power": False,
        "velocity_cap_m_per_s": False, "temp_bounds_c": False, "p_pr_ub_kw": False,
        "initial_temp_offset_c": False, "initial_mass_factor": False}, "mpc")
    mpc_kwargs = dict(horizon=int(mtab["horizon"]), dt_s=float(mtab["dt_s"]),
                      n_sim=int(mtab["n_sim"]), k_step=int(mtab["k_step"]))
    for key in ("q_mass", "q_temp", "r_flow", "r_power", "velocity_cap_m_per_s",
                "initial_temp_offset_c", "initial_mass_factor"):
        if key in mtab:
            mpc_kwargs[key] = float(mtab[key])
    if "temp_bounds_c" in mtab:
        mpc_kwargs["temp_bounds_c"] = tuple(float(v) for v in mtab["temp_bounds_c"])
    if "p_pr_ub_kw" in mtab:
        mpc_kwargs["p_pr_ub_kw"] = tuple(float(v) for v in mtab["p_pr_ub_kw"])
    mpc = MpcSection(**mpc_kwargs)
    if mpc.k_step <= mpc.horizon:
        raise ScenarioError("k_step must exceed the horizon")
    if mpc.n_sim <= mpc.k_step:
        raise ScenarioError("n_sim must exceed k_step")
    if mpc.dt_s <= 0:
        raise ScenarioError("dt_s must be positive")

    seed_tab = _require_keys(doc.get("seed", {}), {"value": False}, "seed")
    seed = int(seed_tab.get("value", 0))

    scenario = Scenario(name=name, vertices=tuple(vertices), edges=tuple(edges),
                        params=params, setpoint_first=sp1, setpoint_second=sp2,
                        mpc=mpc, seed=seed)
    scenario.graph()  # validates the topology invariants eagerly
    return scenario


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text())


# ---- serialization -----------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def serialize_scenario(sc: Scenario) -> str:
    out = []
    out.append("[meta]")
    out.append(f'name = "{sc.name}"')
    out.append("")
    out.append("[graph]")
    out.append("vertices = [")
    for vid, cls, tes in sc.vertices:
        tes_part = f", tes = {tes}" if tes is not None else ""
        out.append(f'    {{ id = "{vid}", class = "{cls}"{tes_part} }},')
    out.append("]")
    out.append("edges = [")
    for eid, cls, src, tgt in sc.edges:
        out.append(f'    {{ id = "{eid}", class = "{cls}", source = "{src}", target = "{tgt}" }},')
    out.append("]")
    out.append("")
    out.append("[params]")
    p = sc.params
    out.append(f"edge_length_m = {_fmt(p.edge_length_m)}")
    out.append(f"tes_mass_kg = {_fmt(p.tes_mass_kg)}")
    out.append(f"kappa_kj_per_k_s = {_fmt(p.kappa_vertex_kj_per_k_s[0])}")
    out.append(f"junction_mass_kg = {_fmt(p.junction_mass_kg)}")
    out.append(f"hx_volume_m3 = {_fmt(p.hx_volume_m3)}")
    out.append(f"hx_diameter_m = {_fmt(p.hx_diameter_m)}")
    out.append(f"rho_kg_per_m3 = {_fmt(p.rho_kg_per_m3)}")
    out.append(f"cp_kj_per_kg_k = {_fmt(p.cp_kj_per_kg_k)}")
    out.append(f"friction_factor = {_fmt(p.friction_factor)}")
    out.append(f"design_pressure_gradient_pa_per_m = {_fmt(p.design_pressure_gradient_pa_per_m)}")
    for label, sp in (("I", sc.setpoint_first), ("II", sc.setpoint_second)):
        out.append("")
        out.append(f"[setpoint.{label}]")
        out.append(f"demands_kw = {_fmt(sp.demands_kw)}")
        out.append(f"ambient_c = {_fmt(sp.ambient_c)}")
        pins = ", ".join(f"{k} = {_fmt(v)}" for k, v in sp.pinned_temps_c)
        out.append(f"pinned_temps_c = {{ {pins} }}")
        rets = ", ".join(f"{k} = {_fmt(v)}" for k, v in sp.return_temps_c)
        out.append(f"return_temps_c = {{ {rets} }}")
        if sp.fills:
            fills = ", ".join(f"{k} = {_fmt(v)}" for k, v in sp.fills)
            out.append(f"fills = {{ {fills} }}")
    out.append("")
    out.append("[mpc]")
    m = sc.mpc
    out.append(f"horizon = {m.horizon}")
    out.append(f"dt_s = {_fmt(m.dt_s)}")
    out.append(f"n_sim = {m.n_sim}")
    out.append(f"k_step = {m.k_step}")
    out.append(f"q_mass = {_fmt(m.q_mass)}")
    out.append(f"q_temp = {_fmt(m.q_temp)}")
    out.append(f"r_flow = {_fmt(m.r_flow)}")
    out.append(f"r_power = {_fmt(m.r_power)}")
    out.append(f"velocity_cap_m_per_s = {_fmt(m.velocity_cap_m_per_s)}")
    out.append(f"temp_bounds_c = {_fmt(m.temp_bounds_c)}")
    if m.p_pr_ub_kw:
        out.append(f"p_pr_ub_kw = {_fmt(m.p_pr_ub_kw)}")
    out.append(f"initial_temp_offset_c = {_fmt(m.initial_temp_offset_c)}")
    out.append(f"initial_mass_factor = {_fmt(m.initial_mass_factor)}")
    out.append("")
    out.append("[seed]")
    out.append(f"value = {sc.seed}")
    out.append("")
    return "\n".join(out)


def save_scenario(path, sc: Scenario) -> None:
    Path(path).write_text(serialize_scenario(sc))


# ---- pipeline -----------------------------------------------------------------

@dataclass
class CaseStudy:
    """Everything the controllers and the simulator need, fully assembled."""

    scenario: Scenario
    graph: DhgGraph
    basis: CycleBasis
    B: np.ndarray
    W: np.ndarray
    plant: DhgPlant
    steady_states: dict        # "I"/"II" -> SteadyState
    limits: OperatingLimits
    scaling: UnitScaling
    Q: np.ndarray
    R: np.ndarray

    @property
    def dt(self) -> float:
        return self.scenario.mpc.dt_s

    @property
    def horizon(self) -> int:
        return self.scenario.mpc.horizon

    def initial_state(self) -> np.ndarray:
        """Set point I perturbed per the scenario's initial-state fields."""
        mpc = self.scenario.mpc
        x0 = self.steady_states["I"].x.copy()
        n_tes = self.plant.layout.n_tes
        x0[:n_tes] *= mpc.initial_mass_factor
        x0[n_tes:] += mpc.initial_temp_offset_c
        return x0


def _build_spec(sp: SetpointSection) -> SteadyStateSpec:
    return SteadyStateSpec(demands=sp.demands_kw, t_ambient=sp.ambient_c,
                           pinned_temps=sp.pinned_temps_c, return_temps=sp.return_temps_c,
                           fills=dict(sp.fills))


def prepare_case(sc: Scenario) -> CaseStudy:
    """Structure checks, steady states, pipe sizing and constraint envelope.

    Pipe diameters are sized from the first operating point's flows at the
    configured design pressure gradient; the steady states themselves do
    not depend on component masses, so they remain valid afterwards.
    """
    graph = sc.graph()
    basis = cycle_basis(graph)
    B = build_incidence(graph)
    ok, W = check_stabilizability_structure(B, basis.F, graph.hot_rows)
    if not ok:
        from .stabilization import StabilizabilityError

        coupling = B[graph.hot_rows, :] @ basis.F.T
        dead = [graph.vertices[row].id
                for i, row in enumerate(graph.hot_rows)
                if basis.F.shape[0] == 0 or not np.any(coupling[i])]
        detail = (f"hot layer(s) {', '.join(dead)} lie on no chord cycle"
                  if dead else "the hot-layer/chord coupling matrix is rank deficient")
        raise StabilizabilityError(
            f"storage masses are not controllable through the chord flows: {detail}")

    p = sc.params
    n_e = graph.n_edges
    raw = PlantParameters(
        edge_length=np.array(p.edge_length_m),
        edge_diameter=np.full(n_e, p.hx_diameter_m),
        kappa_vertex=np.array(p.kappa_vertex_kj_per_k_s),
        kappa_edge=np.array(p.kappa_edge_kj_per_k_s),
        tes_mass=np.array(p.tes_mass_kg),
        junction_mass=p.junction_mass_kg, hx_volume=p.hx_volume_m3,
        rho=p.rho_kg_per_m3, cp=p.cp_kj_per_kg_k, friction=p.friction_factor)
    plant_raw = DhgPlant(graph, basis, raw)
    ss1 = solve_steady_state(plant_raw, _build_spec(sc.setpoint_first), "I")
    params = with_sized_pipes(graph, raw, plant_raw.F.T @ ss1.u[:plant_raw.n_q],
                              p.design_pressure_gradient_pa_per_m)
    plant = DhgPlant(graph, basis, params)
    ss2 = solve_steady_state(plant, _build_spec(sc.setpoint_second), "II")

    mpc = sc.mpc
    area = np.pi * params.edge_diameter ** 2 / 4.0
    q_edge_ub = params.rho * mpc.velocity_cap_m_per_s * area
    chord_cols = np.array([graph.edge_index(c) for c in basis.chords])
    if mpc.p_pr_ub_kw:
        if len(mpc.p_pr_ub_kw) != plant.n_u - plant.n_q:
            raise ScenarioError("p_pr_ub_kw needs one entry per producer HX")
        p_ub = np.array(mpc.p_pr_ub_kw)
    else:
        p_ub = 1.3 * np.maximum(ss1.u[plant.n_q:], ss2.u[plant.n_q:])
    n_tes = plant.layout.n_tes
    limits = OperatingLimits(
        x_lb=np.concatenate([np.zeros(n_tes), np.full(plant.n - n_tes, mpc.temp_bounds_c[0])]),
        x_ub=np.concatenate([params.tes_mass, np.full(plant.n - n_tes, mpc.temp_bounds_c[1])]),
        u_lb=np.zeros(plant.n_u),
        u_ub=np.concatenate([q_edge_ub[chord_cols], p_ub]),
        q_edge_ub=q_edge_ub, F=basis.F.astype(float))
    scaling = default_scaling(n_tes, graph.n_vertices, graph.n_edges,
                              plant.n_q, plant.n_u - plant.n_q)
    Q = np.diag(np.concatenate([np.full(n_tes, mpc.q_mass),
                                np.full(plant.n - n_tes, mpc.q_temp)]))
    R = np.diag(np.concatenate([np.full(plant.n_q, mpc.r_flow),
                                np.full(plant.n_u - plant.n_q, mpc.r_power)]))
    return CaseStudy(scenario=sc, graph=graph, basis=basis, B=B, W=W, plant=plant,
                     steady_states={"I": ss1, "II": ss2}, limits=limits,
                     scaling=scaling, Q=Q, R=R)


def scaled_step_jacobians(case: CaseStudy, ss: SteadyState):
    """Euler-step Jacobians at a steady state, in scaled coordinates."""
    from .stabilization import linearize

    lin = linearize(case.plant, ss, case.dt)
    sx, su = case.scaling.x_scale, case.scaling.u_scale
    return lin.A_d * (sx[None, :] / sx[:, None]), lin.B_d * (su[None, :] / sx[:, None])


def synthesize_terminal_pair(case: CaseStudy) -> dict:
    """Terminal ingredients for both operating points (seeded, reproducible)."""
    from .terminal import synthesize

    out = {}
    for label, ss in case.steady_states.items():
        out[label] = synthesize(case.plant, ss, scaled_step_jacobians(case, ss),
                                case.Q, case.R, case.limits, case.scaling, case.dt,
                                seed=case.scenario.seed, label=label)
    return out


def make_controller(case: CaseStudy, ingredients: dict, variant: str):
    from .controller import MpcController, OcpSolver

    solver = OcpSolver(case.plant, case.scaling, case.limits, case.Q, case.R,
                       case.horizon, case.dt)
    return MpcController(solver=solver, variant=variant, k_step=case.scenario.mpc.k_step,
                         steady_states=case.steady_states, ingredients=ingredients)
