import numpy as np
import pytest

from dhgmpc.equilibrium import SteadyStateSpec, solve_steady_state
from dhgmpc.stabilization import (StabilizabilityError, auto_select_epsilon,
                                  construct_feedback, linearize)

from test_plant import finite_difference_jacobians


@pytest.fixture(scope="module")
def lin_pair(case):
    return {label: linearize(case.plant, ss, case.dt)
            for label, ss in case.steady_states.items()}


class TestLinearize:
    def test_matches_finite_differences_at_both_setpoints(self, case, lin_pair):
        for label, ss in case.steady_states.items():
            lin = lin_pair[label]
            A_fd, B_fd = finite_difference_jacobians(case.plant, ss.x, ss.u, ss.d, case.dt)
            assert np.abs(lin.A_d - A_fd).max() / np.abs(A_fd).max() < 1e-6
            assert np.abs(lin.B_d - B_fd).max() / np.abs(B_fd).max() < 1e-6

    def test_matches_general_jacobian_at_steady_state(self, case, lin_pair):
        # the frozen-mass form is exact there: the balance residual vanishes
        for label, ss in case.steady_states.items():
            A, B = case.plant.step_jacobians(ss.x, ss.u, ss.d, case.dt)
            assert np.abs(A - lin_pair[label].A_d).max() < 1e-12
            assert np.abs(B - lin_pair[label].B_d).max() < 1e-12

    def test_dimensions(self, lin_pair):
        lin = lin_pair["I"]
        assert lin.A_d.shape == (18, 18)
        assert lin.B_d.shape == (18, 7)

    def test_zero_input_decay_structure(self, case):
        # with no flows and no injections the temperature block is a pure
        # heat-loss decay and the mass rows are integrators
        ss0 = solve_steady_state(case.plant, SteadyStateSpec(
            demands=(0.0, 0.0, 0.0), t_ambient=10.0,
            pinned_temps=(("v1", 10.0), ("v6", 10.0)),
            return_temps=(("e3", 10.0), ("e4", 10.0), ("e5", 10.0))))
        lin = linearize(case.plant, ss0, case.dt)
        mdiag = case.plant.mass_diag(ss0.x)
        kappa = np.concatenate([case.plant.kv_norm, case.plant.ke_norm])
        expected = np.eye(16) - case.dt * np.diag(kappa / mdiag[2:])
        assert np.allclose(lin.A_d[2:, 2:], expected)
        assert np.allclose(lin.A_d[:2, :], np.eye(18)[:2])


class TestFeedback:
    def test_zero_epsilon_is_open_loop(self, case, lin_pair):
        fb = construct_feedback(lin_pair["I"], case.W, case.plant, 0.0)
        assert np.all(fb.G == 0.0)
        rho_open = np.max(np.abs(np.linalg.eigvals(lin_pair["I"].A_d)))
        assert abs(fb.spectral_radius - rho_open) < 1e-12

    def test_injection_rows_are_zero(self, case, lin_pair):
        fb = construct_feedback(lin_pair["I"], case.W, case.plant, 1e-3)
        assert np.all(fb.G[case.plant.n_q:, :] == 0.0)

    def test_auto_epsilon_stabilizes_both_setpoints(self, case, lin_pair):
        for label in ("I", "II"):
            fb = auto_select_epsilon(lin_pair[label], case.W, case.plant)
            assert fb.spectral_radius < 1.0
            assert fb.lyapunov_max_eig < 0.0
            assert fb.epsilon in [2.0 ** (-k) for k in range(41)]

    def test_huge_epsilon_breaks_the_construction(self, case, lin_pair):
        fb = construct_feedback(lin_pair["I"], case.W, case.plant, 1e6)
        assert fb.lyapunov_max_eig > 0.0

    def test_large_step_size_fails(self, case):
        lin = linearize(case.plant, case.steady_states["I"], 1e6)
        with pytest.raises(StabilizabilityError):
            auto_select_epsilon(lin, case.W, case.plant)

    def test_lyapunov_implies_spectral_radius(self, case, lin_pair):
        # whenever the mass-weighted difference is negative definite the
        # closed loop is a strict contraction
        for eps in (2.0 ** -k for k in range(0, 20, 3)):
            fb = construct_feedback(lin_pair["I"], case.W, case.plant, eps)
            if fb.lyapunov_max_eig < 0.0:
                assert fb.spectral_radius < 1.0

    def test_energy_decreases_along_closed_loop(self, case, lin_pair):
        lin = lin_pair["I"]
        fb = auto_select_epsilon(lin, case.W, case.plant)
        A_cl = lin.A_d + lin.B_d @ fb.G
        M = np.diag(lin.mass_diag)
        rng = np.random.default_rng(29)
        scale = np.concatenate([np.full(2, 1000.0), np.full(16, 2.0)])
        for _ in range(100):
            x = rng.normal(size=18) * scale
            v = x @ M @ x
            for _ in range(50):
                x = A_cl @ x
                v_next = x @ M @ x
                assert v_next <= v + 1e-12 * max(v, 1.0)
                v = v_next
