import numpy as np
import pytest
from scipy.linalg import expm

import hamflow as hf
from hamflow.errors import NoConvergence
from hamflow.hamiltonian import Trajectory
from hamflow.ocp import FiniteHorizonProblem


def linear_bvp_oracle(sym, x0, xf, T, ts):
    """Closed-form linear BVP through the matrix exponential of Ham."""
    n = len(x0)
    E = expm(sym.Ham * T)
    p0 = np.linalg.solve(E[:n, n:], xf - E[:n, :n] @ x0)
    z0 = np.concatenate([x0, p0])
    return np.array([expm(sym.Ham * t) @ z0 for t in ts])


@pytest.fixture(scope="module")
def scalar_lqr():
    sys = hf.linear_system([[0.0]], [[1.0]], [[1.0]])
    return hf.build_hamiltonian(sys)


class TestFiniteBvp:
    def test_trivial_stays_put(self, scalar_lqr):
        traj = hf.solve_finite_bvp(scalar_lqr, [0.0], [0.0], 4.0, tol=1e-10)
        assert np.abs(traj.z).max() <= 1e-9
        assert traj.final_cost == pytest.approx(0.0, abs=1e-12)

    def test_scalar_lqr_matches_oracle(self, scalar_lqr):
        T = 5.0
        traj = hf.solve_finite_bvp(scalar_lqr, [1.0], [0.0], T, tol=1e-9)
        ts = np.linspace(0.0, T, 101)
        oracle = linear_bvp_oracle(scalar_lqr.sym, np.array([1.0]),
                                   np.array([0.0]), T, ts)
        err = max(np.abs(traj(t) - oracle[i]).max() for i, t in enumerate(ts))
        assert err <= 1e-6
        assert traj.stats["segments"] == 1  # single shooting on p(0)

    def test_random_linear_suite(self):
        rng = np.random.default_rng(12)
        for k in range(5):
            n = 1 + k % 4
            A, B, C = hf.random_stabilizable_triple(n, 1, rng=rng)
            hsys = hf.build_hamiltonian(hf.linear_system(A, B, C))
            mu = -np.min(np.linalg.eigvals(hsys.sym.F).real)
            T = min(4.0, 6.0 / mu)
            x0 = rng.standard_normal(n)
            x0 /= np.linalg.norm(x0)
            xf = 0.3 * rng.standard_normal(n)
            traj = hf.solve_finite_bvp(hsys, x0, xf, T, tol=1e-8)
            ts = np.linspace(0.0, T, 41)
            oracle = linear_bvp_oracle(hsys.sym, x0, xf, T, ts)
            err = max(np.abs(traj(t) - oracle[i]).max()
                      for i, t in enumerate(ts))
            assert err <= 1e-6

    def test_energy_constant_along_solution(self, scalar_lqr):
        traj = hf.solve_finite_bvp(scalar_lqr, [1.0], [0.0], 5.0, tol=1e-9)
        assert np.abs(traj.H - traj.H[0]).max() <= 1e-6

    def test_backstepping_T20_turnpike_shape(self):
        hs = hf.build_hamiltonian(hf.example_system("backstepping"))
        traj = hf.solve_finite_bvp(hs, [1.0, 1.0], [0.5, 0.0], 20.0, tol=1e-6)
        assert traj.stats["terminal_mismatch"] <= 1e-6
        assert np.abs(traj.H - traj.H[0]).max() <= 1e-5
        # interior segment rides the turnpike
        mid = np.abs(traj.t - 10.0) <= 3.0
        assert np.linalg.norm(traj.z[mid, :2], axis=1).max() <= 0.1

    def test_boundary_satisfaction(self, scalar_lqr):
        traj = hf.solve_finite_bvp(scalar_lqr, [0.7], [0.2], 3.0, tol=1e-9)
        assert traj.z[0, 0] == pytest.approx(0.7, abs=1e-12)
        assert traj.stats["terminal_mismatch"] <= 1e-9

    def test_problem_type_validation(self):
        sys = hf.example_system("backstepping")
        with pytest.raises(ValueError):
            FiniteHorizonProblem(sys, [1.0, 1.0], [0.0, 0.0], T=-1.0)
        with pytest.raises(ValueError):
            FiniteHorizonProblem(sys, [1.0], [0.0, 0.0], T=1.0)


class TestTurnpikeMetric:
    def _synthetic(self, fn, T=10.0, samples=201):
        ts = np.linspace(0.0, T, samples)
        return Trajectory(t=ts, z=np.atleast_2d(fn(ts)).T,
                          dense=lambda t: np.atleast_1d(fn(t)))

    def test_never_above_threshold(self):
        traj = self._synthetic(lambda t: 0.05 * np.ones_like(np.asarray(t)))
        m = hf.turnpike_metric(traj, 0.1)
        assert m.measure == 0.0
        assert m.first_exit is None and m.last_entry is None

    def test_always_above_threshold(self):
        traj = self._synthetic(lambda t: 0.2 * np.ones_like(np.asarray(t)))
        m = hf.turnpike_metric(traj, 0.1)
        assert m.measure == pytest.approx(10.0, abs=1e-9)

    def test_two_excursions_exact(self):
        # |x| crosses 0.1 exactly at t = 1 and t = 9
        def sig(t):
            t = np.asarray(t, dtype=float)
            up = np.clip((1.2 - t) / 0.4, 0.0, 1.0)
            dn = np.clip((t - 8.8) / 0.4, 0.0, 1.0)
            return 0.2 * np.maximum(up, dn)

        m = hf.turnpike_metric(self._synthetic(sig), 0.1)
        assert m.measure == pytest.approx(2.0, abs=1e-6)
        assert m.first_exit == pytest.approx(1.0, abs=1e-6)
        assert m.last_entry == pytest.approx(9.0, abs=1e-6)


class TestTurnpikeReport:
    def test_lqr_residences_agree(self, scalar_lqr):
        rep = hf.turnpike_report(scalar_lqr, [1.0], [0.0], [5.0, 10.0, 20.0],
                                 epsilon=0.1, tol=1e-8)
        assert all(e.converged for e in rep.entries)
        measures = [e.residence for e in rep.entries]
        assert max(measures) / min(measures) <= 1.2
        assert rep.uniformity == pytest.approx(max(measures) / min(measures))

    def test_backstepping_uniformity(self):
        hs = hf.build_hamiltonian(hf.example_system("backstepping"))
        rep = hf.turnpike_report(hs, [1.0, 1.0], [0.5, 0.0],
                                 [10.0, 20.0, 40.0], epsilon=0.1, tol=1e-6)
        assert all(e.converged for e in rep.entries)
        assert rep.uniformity <= 1.5

    def test_sufficient_condition_flag(self):
        hs = hf.build_hamiltonian(hf.example_system("scalar"))
        stable = hf.globalize(hf.local_stable_manifold(hs, tol=1e-9), hs,
                              extend_time=10.0,
                              bounds={"x_min": [-3.0], "x_max": [0.99]})
        unstable = hf.globalize(hf.unstable_manifold(hs, seed_radius=0.2), hs,
                                extend_time=2.0,
                                bounds={"x_min": [-2.0], "x_max": [0.95]})
        rep = hf.turnpike_report(hs, [1.2], [0.0], [4.0], epsilon=0.1,
                                 tol=1e-6, stable_chart=stable,
                                 unstable_chart=unstable)
        assert rep.condition["satisfied"] is False
        assert rep.condition["x0_in_stable_projection"] is False
        rep2 = hf.turnpike_report(hs, [0.5], [0.3], [4.0], epsilon=0.1,
                                  tol=1e-6, stable_chart=stable,
                                  unstable_chart=unstable)
        assert rep2.condition["satisfied"] is True

    def test_failures_recorded_not_fatal(self):
        hs = hf.build_hamiltonian(hf.example_system("scalar"))
        # terminal state beyond the reachable boundary x < 1 for the exit leg
        rep = hf.turnpike_report(hs, [0.5], [3.0], [3.0], epsilon=0.1,
                                 tol=1e-8)
        assert len(rep.entries) == 1
        assert rep.entries[0].converged in (False, True)


class TestInfiniteCost:
    def test_zero_start(self):
        sys = hf.linear_system([[0.0]], [[1.0]], [[1.0]])
        est = hf.infinite_cost(sys, lambda x: -x, [0.0])
        assert est.value == pytest.approx(0.0, abs=1e-12)

    def test_lqr_value(self):
        sys = hf.linear_system([[0.0]], [[1.0]], [[1.0]])
        est = hf.infinite_cost(sys, lambda x: -x, [1.0], tail_tol=1e-10)
        assert est.value == pytest.approx(0.5, abs=1e-6)
        assert est.tail_bound <= 1e-9

    def test_scalar_zero_control(self):
        sys = hf.example_system("scalar")
        est = hf.infinite_cost(sys, lambda x: np.zeros(1), [0.5],
                               tail_tol=1e-10)
        assert est.value == pytest.approx(0.0, abs=1e-10)

    def test_no_convergence(self):
        sys = hf.example_system("scalar")
        # zero feedback from beyond the basin of the free dynamics
        with pytest.raises((NoConvergence, hf.errors.IntegrationError)):
            hf.infinite_cost(sys, lambda x: np.zeros(1), [1.5], t_max=20.0)
