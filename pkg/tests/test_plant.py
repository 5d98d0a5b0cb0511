import numpy as np
import pytest

from dhgmpc.plant import (DhgPlant, PlantParameters, SingularMassError,
                          edge_masses, size_pipes)


def darcy_gradient(d, q, rho, friction):
    v = q / (rho * np.pi * d * d / 4.0)
    return friction / d * rho * v * v / 2.0


class TestPipeSizing:
    def test_zero_flow_rejected(self, case):
        flows = np.ones(9)
        flows[0] = 0.0
        with pytest.raises(ValueError, match="no steady flow"):
            size_pipes(case.graph, case.plant.params, flows)

    def test_back_substitution(self, case):
        params = case.plant.params
        flows = np.full(9, 10.0)
        d = size_pipes(case.graph, params, flows, target_gradient=300.0)
        for j, e in enumerate(case.graph.edges):
            if e.cls == "pipe":
                grad = darcy_gradient(d[j], 10.0, params.rho, params.friction)
                assert abs(grad - 300.0) < 1e-8 * 300.0

    def test_hx_edges_untouched(self, case):
        params = case.plant.params
        d = size_pipes(case.graph, params, np.full(9, 10.0))
        for j, e in enumerate(case.graph.edges):
            if e.cls != "pipe":
                assert d[j] == params.edge_diameter[j]

    def test_monotone_in_flow(self, case):
        params = case.plant.params
        rng = np.random.default_rng(3)
        qs = np.sort(rng.uniform(1.0, 60.0, size=12))
        ds = [size_pipes(case.graph, params, np.full(9, q))[0] for q in qs]
        assert np.all(np.diff(ds) > 0)


class TestEdgeMasses:
    def test_cylinder_formula(self, case):
        from dataclasses import replace
        params = replace(case.plant.params,
                         edge_length=np.ones(9), edge_diameter=np.ones(9), rho=1000.0)
        m = edge_masses(case.graph, params)
        pipe_cols = case.graph.edge_cols("pipe")
        assert np.allclose(m[pipe_cols], 250.0 * np.pi)
        hx_cols = [j for j in range(9) if j not in pipe_cols]
        assert np.allclose(m[hx_cols], 1000.0 * params.hx_volume)

    def test_zero_length_rejected(self, case):
        from dataclasses import replace
        with pytest.raises(ValueError, match="positive"):
            replace(case.plant.params, edge_length=np.zeros(9))


class TestAssembly:
    def test_zero_flow_coupling_vanishes(self, case):
        plant = case.plant
        At = plant.temperature_coupling(np.zeros(plant.n_q))
        assert np.all(At == 0.0)
        x = case.steady_states["I"].x
        u = np.zeros(plant.n_u)
        _, A, _, _ = plant.assemble(x, u)
        tt = plant.layout.temps
        expected = -np.diag(np.concatenate([plant.kv_norm, plant.ke_norm]))
        assert np.allclose(A[tt, tt], expected)
        assert np.all(A[plant.layout.mass, :] == 0.0)

    def test_coupling_negative_semidefinite_on_steady_flows(self, case):
        # charge-neutral flows: consumer draws free, producer loops balance
        plant = case.plant
        rng = np.random.default_rng(11)
        worst = -np.inf
        for _ in range(1000):
            q = np.zeros(5)
            q[:3] = rng.uniform(0.0, 60.0, 3)
            q[3] = q[0] + q[2]
            q[4] = q[1]
            assert np.allclose(plant.Bh_Ft @ q, 0.0)
            At = plant.temperature_coupling(q)
            worst = max(worst, float(np.linalg.eigvalsh(At + At.T).max()))
        assert worst <= 1e-9

    def test_coupling_indefinite_off_the_steady_manifold(self, case):
        # a pure charging flow moves mass between layers and breaks the bound
        q = np.array([1.0, 0.0, 0.0, 0.0, 0.0])
        At = case.plant.temperature_coupling(q)
        assert np.linalg.eigvalsh(At + At.T).max() > 1e-3

    def test_mass_matrix_positive_definite(self, case):
        ss = case.steady_states["I"]
        mdiag = case.plant.mass_diag(ss.x)
        assert np.all(mdiag > 0)
        assert np.isfinite(mdiag.max() / mdiag.min())

    def test_empty_layer_raises(self, case):
        ss = case.steady_states["I"]
        x = ss.x.copy()
        x[0] = 0.5  # below the 1 kg usable minimum
        with pytest.raises(SingularMassError):
            case.plant.mass_diag(x)

    def test_layer_masses_sum_to_total(self, case):
        rng = np.random.default_rng(5)
        plant = case.plant
        for _ in range(20):
            x = case.steady_states["I"].x.copy()
            x[:2] = rng.uniform(0.1, 0.9, 2) * plant.params.tes_mass
            mdiag = plant.mass_diag(x)
            off = plant.layout.n_tes
            for i, (_, h, c) in enumerate(case.graph.tes_pairs()):
                assert mdiag[off + h] + mdiag[off + c] == plant.params.tes_mass[i]


class TestDynamics:
    def test_ambient_equilibrium(self, case):
        plant = case.plant
        x = case.steady_states["I"].x.copy()
        x[2:] = 10.0  # all temperatures at ambient
        u = np.zeros(plant.n_u)
        d = np.array([0.0, 0.0, 0.0, 10.0])
        assert np.linalg.norm(plant.f(x, u, d), np.inf) < 1e-14

    def test_mass_rows_equal_flow_balance(self, case):
        plant = case.plant
        rng = np.random.default_rng(1)
        x = case.steady_states["I"].x
        for _ in range(10):
            u = np.abs(rng.normal(10.0, 3.0, plant.n_u))
            f = plant.f(x, u, case.steady_states["I"].d)
            assert np.allclose(f[:2], plant.Bh_Ft @ u[:5])

    def test_steady_state_is_fixed_point(self, case):
        for ss in case.steady_states.values():
            assert np.linalg.norm(plant_f := case.plant.f(ss.x, ss.u, ss.d), np.inf) < 1e-8
            x1 = case.plant.step(ss.x, ss.u, ss.d, 60.0)
            assert np.linalg.norm(x1 - ss.x, np.inf) < 1e-8

    def test_euler_zero_derivative(self, case):
        ss = case.steady_states["I"]
        assert np.allclose(case.plant.step(ss.x, ss.u, ss.d, 123.0), ss.x)

    def test_euler_linear_in_dt(self, case):
        ss = case.steady_states["I"]
        x = ss.x + np.concatenate([np.full(2, 100.0), np.full(16, 1.5)])
        d1 = case.plant.step(x, ss.u, ss.d, 60.0) - x
        d2 = case.plant.step(x, ss.u, ss.d, 30.0) - x
        assert np.allclose(d1, 2.0 * d2)

    def test_nonpositive_dt_rejected(self, case):
        ss = case.steady_states["I"]
        with pytest.raises(ValueError):
            case.plant.step(ss.x, ss.u, ss.d, 0.0)

    def test_normalization_invariance(self, case):
        # dividing heat flows and loss coefficients by cp and setting cp = 1
        # leaves the dynamics unchanged
        from dataclasses import replace
        ss = case.steady_states["I"]
        cp = case.plant.params.cp
        params2 = replace(case.plant.params,
                          kappa_vertex=case.plant.params.kappa_vertex / cp,
                          kappa_edge=case.plant.params.kappa_edge / cp, cp=1.0)
        plant2 = DhgPlant(case.graph, case.basis, params2)
        u2 = ss.u.copy(); u2[5:] /= cp
        d2 = ss.d.copy(); d2[:-1] /= cp
        f1 = case.plant.f(ss.x, ss.u, ss.d)
        f2 = plant2.f(ss.x, u2, d2)
        assert np.allclose(f1, f2, rtol=1e-12, atol=1e-14)

    def test_heat_loss_fraction(self, case):
        plant = case.plant
        u = np.concatenate([np.ones(5), [2000.0, 2500.0]])
        d = np.array([1500.0, 2000.0, 1000.0, 10.0])
        assert plant.heat_loss_fraction(u, d) == 0.0
        with pytest.raises(ValueError, match="injected"):
            plant.heat_loss_fraction(np.zeros(7), d)
        for label, expect in (("I", 0.081), ("II", 0.090)):
            ss = case.steady_states[label]
            assert abs(plant.heat_loss_fraction(ss.u, ss.d) - expect) < 5e-3


def finite_difference_jacobians(plant, x, u, d, dt):
    n, m = plant.n, plant.n_u
    A = np.zeros((n, n)); B = np.zeros((n, m))
    for j in range(n):
        h = 1e-6 * max(abs(x[j]), 1.0)
        xp, xm = x.copy(), x.copy(); xp[j] += h; xm[j] -= h
        A[:, j] = (plant.step(xp, u, d, dt) - plant.step(xm, u, d, dt)) / (2 * h)
    for j in range(m):
        h = 1e-6 * max(abs(u[j]), 1.0)
        up, um = u.copy(), u.copy(); up[j] += h; um[j] -= h
        B[:, j] = (plant.step(x, up, d, dt) - plant.step(x, um, d, dt)) / (2 * h)
    return A, B


class TestJacobians:
    def test_match_finite_differences_off_steady_state(self, case):
        plant = case.plant
        ss = case.steady_states["I"]
        rng = np.random.default_rng(17)
        for _ in range(20):
            x = ss.x.copy()
            x[:2] += rng.normal(0.0, 500.0, 2)
            x[2:] += rng.normal(0.0, 2.0, 16)
            u = ss.u * rng.uniform(0.8, 1.2, plant.n_u)
            A, B = plant.step_jacobians(x, u, ss.d, 60.0)
            A_fd, B_fd = finite_difference_jacobians(plant, x, u, ss.d, 60.0)
            assert np.abs(A - A_fd).max() / np.abs(A_fd).max() < 1e-6
            assert np.abs(B - B_fd).max() / np.abs(B_fd).max() < 1e-6

    def test_batch_matches_single(self, case):
        plant = case.plant
        ss = case.steady_states["I"]
        rng = np.random.default_rng(23)
        X = ss.x[None, :] + rng.normal(0, 1.0, (6, plant.n)) * np.concatenate(
            [np.full(2, 300.0), np.full(16, 1.0)])
        U = ss.u[None, :] * rng.uniform(0.9, 1.1, (6, plant.n_u))
        F = plant.step_batch(X, U, ss.d, 60.0)
        A, B = plant.step_jacobians_batch(X, U, ss.d, 60.0)
        for i in range(6):
            assert np.allclose(F[i], plant.step(X[i], U[i], ss.d, 60.0))
            Ai, Bi = plant.step_jacobians(X[i], U[i], ss.d, 60.0)
            assert np.allclose(A[i], Ai) and np.allclose(B[i], Bi)
