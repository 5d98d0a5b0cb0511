"""Command-line entry point.

Subcommands: check (structure + stabilizability), steady (operating points),
terminal (terminal-ingredient synthesis), run (closed-loop simulation),
compare (both controller variants plus the smoothness report).

Exit codes: 0 success, 1 usage or scenario-file errors, 2 numerical failure.
Set DHGMPC_LOG=debug for verbose progress output.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .controller import OcpError
from .equilibrium import SteadyStateError, validate_steady_state
from .scenario import (CaseStudy, ScenarioError, load_scenario, make_controller,
                       prepare_case, scaled_step_jacobians, synthesize_terminal_pair)
from .simulation import compute_metrics, run_closed_loop
from .stabilization import StabilizabilityError, auto_select_epsilon, linearize
from .terminal import (TerminalSynthesisError, ellipsoid_box_projection,
                       load_ingredients, save_ingredients, synthesize)
from .topology import TopologyError

log = logging.getLogger("dhgmpc")

USAGE_EXIT = 1
NUMERICAL_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit with code 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _load_case(path: str) -> CaseStudy:
    scenario = load_scenario(path)
    return prepare_case(scenario)


def _storage_projection_lines(case: CaseStudy, ti) -> list[str]:
    half = ellipsoid_box_projection(ti.P, ti.alpha)
    lines = []
    for k, (tes, hrow, _) in enumerate(case.graph.tes_pairs()):
        hot_id = case.graph.vertices[hrow].id
        lines.append(f"dm_{hot_id} = {half[k]:.6g} t")
        lines.append(f"dT_{hot_id} = {half[case.plant.layout.n_tes + hrow]:.6g} C")
    return lines


def cmd_check(args) -> int:
    case = _load_case(args.scenario)
    plant, graph = case.plant, case.graph
    print(f"scenario: {case.scenario.name}")
    print(f"vertices: {graph.n_vertices} ({len(graph.hot_rows)} storages), "
          f"edges: {graph.n_edges}")
    print(f"incidence matrix: {case.B.shape[0]} x {case.B.shape[1]}")
    print(f"reduced graph: {case.basis.reduced.n_vertices} vertices, "
          f"{len(case.basis.chords)} chords")
    print(f"state/input/disturbance dimensions: n={plant.n}, m={plant.n_u}, p={plant.n_d}")
    print("mass-controllability structure check: PASS "
          f"(right inverse residual {np.max(np.abs(plant.Bh_Ft @ case.W - np.eye(len(graph.hot_rows)))):.2e})")
    ok_all = True
    for label, ss in case.steady_states.items():
        lin = linearize(plant, ss, case.dt)
        try:
            fb = auto_select_epsilon(lin, case.W, plant)
            print(f"set point {label}: epsilon={fb.epsilon:.6g}, "
                  f"spectral radius={fb.spectral_radius:.6f}, "
                  f"lyapunov max eig={fb.lyapunov_max_eig:.3e} -> STABILIZABLE")
        except StabilizabilityError as exc:
            ok_all = False
            print(f"set point {label}: FAIL ({exc})")
    return 0 if ok_all else NUMERICAL_EXIT


def cmd_steady(args) -> int:
    case = _load_case(args.scenario)
    out = Path(args.out) if args.out else None
    for label, ss in case.steady_states.items():
        report = validate_steady_state(case.plant, ss, case.limits)
        loss = case.plant.heat_loss_fraction(ss.u, ss.d)
        print(f"set point {label}: residual={ss.residual_norm:.3e}, "
              f"heat-loss fraction={loss * 100:.2f}%, "
              f"admissibility={'PASS' if report.ok else 'FAIL'}")
        for msg in report.messages:
            print(f"  warning: {msg}")
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            rows = list(zip(case.plant.state_labels(), ss.x)) \
                + list(zip(case.plant.input_labels(), ss.u))
            with open(out / f"steady_{label}.csv", "w") as fh:
                fh.write("name,value\n")
                for name, value in rows:
                    fh.write(f"{name},{float(value)!r}\n")
                fh.write(f"heat_loss_fraction,{float(loss)!r}\n")
    return 0


def cmd_terminal(args) -> int:
    case = _load_case(args.scenario)
    labels = ("I", "II") if args.setpoint == "both" else (args.setpoint,)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for label in labels:
        ss = case.steady_states[label]
        ti = synthesize(case.plant, ss, scaled_step_jacobians(case, ss),
                        case.Q, case.R, case.limits, case.scaling, case.dt,
                        seed=args.seed if args.seed is not None else case.scenario.seed,
                        label=label)
        save_ingredients(out, ti)
        lines = _storage_projection_lines(case, ti)
        (out / f"{label}_projections.txt").write_text("\n".join(lines) + "\n")
        print(f"set point {label}: alpha={ti.alpha:.6g}")
        for line in lines:
            print("  " + line)
    print(f"terminal ingredients written to {out}")
    return 0


def _obtain_ingredients(case: CaseStudy, args) -> dict:
    tdir = Path(args.terminal_dir) if args.terminal_dir else Path(args.out) / "terminal"
    have = all((tdir / f"{label}_meta.txt").exists() for label in ("I", "II"))
    if have:
        log.info("loading terminal ingredients from %s", tdir)
        return {label: load_ingredients(tdir, label) for label in ("I", "II")}
    if not args.auto:
        raise OcpError(f"no terminal ingredients in {tdir}; run the terminal "
                       "command first or pass --auto")
    log.info("synthesizing terminal ingredients")
    ingredients = synthesize_terminal_pair(case)
    tdir.mkdir(parents=True, exist_ok=True)
    for ti in ingredients.values():
        save_ingredients(tdir, ti)
    return ingredients


def _run_variant(case: CaseStudy, ingredients: dict, variant: str, out: Path):
    mpc = case.scenario.mpc
    controller = make_controller(case, ingredients, variant)
    result = run_closed_loop(case.plant, controller, case.initial_state(),
                             mpc.n_sim, mpc.k_step, mpc.dt_s,
                             case.steady_states["I"].d, case.steady_states["II"].d)
    (out / f"trajectory_{variant}.csv").write_text(result.to_csv())
    (out / f"timing_{variant}.csv").write_text(result.timing_csv())
    k1 = result.convergence_step(case.steady_states["I"].x, case.scaling.x_scale,
                                 end=mpc.k_step)
    k2 = result.convergence_step(case.steady_states["II"].x, case.scaling.x_scale,
                                 start=mpc.k_step)
    st = result.solve_times()
    lines = [
        f"variant = {variant}",
        f"steps = {result.n_steps}",
        f"converged to set point I at step = {k1}",
        f"converged to set point II at step = {k2}",
        f"solve time mean = {st.mean():.4f} s",
        f"solve time max = {st.max():.4f} s",
    ]
    (out / f"summary_{variant}.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return result


def cmd_run(args) -> int:
    case = _load_case(args.scenario)
    if args.seed is not None:
        case.scenario = replace(case.scenario, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ingredients = _obtain_ingredients(case, args)
    variants = ("mpc1", "mpc2") if args.variant == "both" else (args.variant,)
    results = {}
    for variant in variants:
        results[variant] = _run_variant(case, ingredients, variant, out)
    if len(results) == 2:
        _write_comparison(case, results, out)
    return 0


def _write_comparison(case: CaseStudy, results: dict, out: Path):
    mpc = case.scenario.mpc
    report = compute_metrics(results["mpc1"], results["mpc2"],
                             case.plant.n_u - case.plant.n_q, mpc.k_step, mpc.horizon)
    text = "\n".join(report.summary_lines()) + "\n"
    (out / "comparison.txt").write_text(text)
    print(text, end="")


def cmd_compare(args) -> int:
    args.variant = "both"
    return cmd_run(args)


def build_parser() -> _Parser:
    parser = _Parser(prog="dhgmpc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="structure and stabilizability checks")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("steady", help="solve and validate both operating points")
    p.add_argument("scenario")
    p.add_argument("--out", default=None, help="directory for steady-state CSVs")
    p.set_defaults(func=cmd_steady)

    p = sub.add_parser("terminal", help="synthesize terminal ingredients")
    p.add_argument("scenario")
    p.add_argument("--setpoint", choices=("I", "II", "both"), default="both")
    p.add_argument("--out", default="out/terminal")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p.set_defaults(func=cmd_terminal)

    p = sub.add_parser("run", help="closed-loop simulation")
    p.add_argument("scenario")
    p.add_argument("--variant", choices=("mpc1", "mpc2", "both"), default="mpc1")
    p.add_argument("--out", default="out")
    p.add_argument("--terminal-dir", default=None)
    p.add_argument("--auto", action="store_true",
                   help="synthesize terminal ingredients when files are missing")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run both variants and compare")
    p.add_argument("scenario")
    p.add_argument("--out", default="out")
    p.add_argument("--terminal-dir", default=None)
    p.add_argument("--auto", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DHGMPC_LOG", "warning").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ScenarioError, TopologyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (SteadyStateError, StabilizabilityError, TerminalSynthesisError,
            OcpError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT


if __name__ == "__main__":
    sys.exit(main())
