import numpy as np
import pytest

from dhgmpc.equilibrium import (SteadyStateError, SteadyStateSpec, solve_steady_state,
                                validate_steady_state)


def ambient_spec(t_ambient=10.0):
    return SteadyStateSpec(demands=(0.0, 0.0, 0.0), t_ambient=t_ambient,
                           pinned_temps=(("v1", t_ambient), ("v6", t_ambient)),
                           return_temps=(("e3", t_ambient), ("e4", t_ambient),
                                         ("e5", t_ambient)))


class TestSolve:
    def test_ambient_fixed_point(self, case):
        ss = solve_steady_state(case.plant, ambient_spec())
        assert np.allclose(ss.u, 0.0, atol=1e-9)
        assert np.allclose(ss.x[2:], 10.0, atol=1e-9)
        assert ss.residual_norm < 1e-10

    def test_canonical_setpoints(self, case):
        ss1 = case.steady_states["I"]
        ss2 = case.steady_states["II"]
        g = case.graph
        off = case.plant.layout.n_tes
        for ss, pins in ((ss1, (45.0, 75.0)), (ss2, (46.0, 77.0))):
            assert ss.residual_norm <= 1e-8
            assert abs(ss.x[off + g.vertex_index("v1")] - pins[0]) < 1e-8
            assert abs(ss.x[off + g.vertex_index("v6")] - pins[1]) < 1e-8
            loss = case.plant.heat_loss_fraction(ss.u, ss.d)
            assert 0.05 <= loss <= 0.12
            assert np.all(case.plant.F.T @ ss.u[:5] >= 0)

    def test_fill_fractions_fix_masses(self, case):
        ss = case.steady_states["I"]
        assert np.allclose(ss.x[:2], 0.5 * case.plant.params.tes_mass)

    def test_reproducible_bitwise(self, case):
        spec = SteadyStateSpec(demands=(1500.0, 2500.0, 1000.0), t_ambient=10.0,
                               pinned_temps=(("v1", 45.0), ("v6", 75.0)),
                               return_temps=(("e3", 30.0), ("e4", 30.0), ("e5", 30.0)))
        a = solve_steady_state(case.plant, spec)
        b = solve_steady_state(case.plant, spec)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.u, b.u)

    def test_demand_monotonicity(self, case):
        base = case.steady_states["I"]
        spec_up = SteadyStateSpec(demands=(1650.0, 2750.0, 1100.0), t_ambient=10.0,
                                  pinned_temps=(("v1", 45.0), ("v6", 75.0)),
                                  return_temps=(("e3", 30.0), ("e4", 30.0), ("e5", 30.0)))
        up = solve_steady_state(case.plant, spec_up)
        assert up.u[5:].sum() > base.u[5:].sum()

    def test_bad_pin_rejected(self, case):
        spec = SteadyStateSpec(demands=(1.0, 1.0, 1.0), t_ambient=10.0,
                               pinned_temps=(("v3", 45.0), ("v6", 75.0)),
                               return_temps=(("e3", 30.0), ("e4", 30.0), ("e5", 30.0)))
        with pytest.raises(ValueError, match="hot layer"):
            solve_steady_state(case.plant, spec)

    def test_pin_count_must_square_system(self, case):
        spec = SteadyStateSpec(demands=(1.0, 1.0, 1.0), t_ambient=10.0,
                               pinned_temps=(("v1", 45.0), ("v6", 75.0)),
                               return_temps=(("e3", 30.0),))
        with pytest.raises(SteadyStateError, match="square"):
            solve_steady_state(case.plant, spec)

    def test_bad_fill_rejected(self, case):
        spec = SteadyStateSpec(demands=(1.0, 1.0, 1.0), t_ambient=10.0,
                               pinned_temps=(("v1", 45.0), ("v6", 75.0)),
                               return_temps=(("e3", 30.0), ("e4", 30.0), ("e5", 30.0)),
                               fills={1: 1.2})
        with pytest.raises(ValueError, match="fill fraction"):
            solve_steady_state(case.plant, spec)


class TestValidate:
    def test_canonical_pass_with_margins(self, case):
        for ss in case.steady_states.values():
            report = validate_steady_state(case.plant, ss, case.limits)
            assert report.ok
            assert report.input_margin > 0
            assert report.state_margin > 0
            assert report.min_edge_flow > 0

    def test_boundary_mass_fails(self, case):
        ss = case.steady_states["I"]
        import dataclasses
        x = ss.x.copy()
        x[0] = case.plant.params.tes_mass[0]  # hot layer completely full
        bad = dataclasses.replace(ss, x=x)
        report = validate_steady_state(case.plant, bad, case.limits)
        assert not report.ok
        assert report.state_margin <= 0

    def test_input_on_bound_fails_interiority(self, case):
        ss = case.steady_states["I"]
        import dataclasses
        u = ss.u.copy()
        u[5] = case.limits.u_ub[5]  # producer at its limit
        bad = dataclasses.replace(ss, u=u)
        report = validate_steady_state(case.plant, bad, case.limits)
        assert not report.ok
        assert report.input_margin <= 0
