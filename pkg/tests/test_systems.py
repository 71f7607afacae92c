import numpy as np
import pytest

import hamflow as hf
from hamflow.errors import (
    BadPartition,
    InsufficientSamples,
    NonPSDHessian,
    UnknownExample,
)
from hamflow.systems import CutoffSpec, cascade_lyapunov, smoothstep, smoothstep_d

ALL_EXAMPLES = ["scalar", "generator", "pendulum", "zero_dynamics", "backstepping"]


class TestLinearize:
    def test_scalar_example(self):
        lin = hf.linearize(hf.example_system("scalar"))
        assert lin.A[0, 0] == pytest.approx(-1.0)
        assert lin.B[0, 0] == pytest.approx(1.0)
        assert lin.C.shape == (0, 1)

    def test_exact_linear_quadratic(self):
        A = np.array([[0.0, 1.0], [-2.0, -3.0]])
        B = np.array([[0.0], [1.0]])
        C = np.array([[1.0, 0.5]])
        lin = hf.linearize(hf.linear_system(A, B, C))
        assert np.allclose(lin.A, A)
        assert np.allclose(lin.B, B)
        # C recovered up to an orthogonal left factor: compare gram matrices
        assert np.allclose(lin.C.T @ lin.C, C.T @ C, atol=1e-12)

    def test_pendulum_linear_part(self):
        # hand differentiation at the origin
        lin = hf.linearize(hf.example_system("pendulum", epsilon=0.1))
        assert np.allclose(lin.A, [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)
        assert np.allclose(lin.B.ravel(), [0.0, -1.0])

    def test_non_psd_hessian_rejected(self):
        sys = hf.example_system("backstepping")
        bad = hf.ControlAffineSystem(
            n=2, m=1, f=sys.f, g=sys.g, h=sys.h, Df=sys.Df, Dg=sys.Dg,
            Dh=sys.Dh, D2h0=np.diag([1.0, -1.0]))
        with pytest.raises(NonPSDHessian):
            hf.linearize(bad)

    def test_factorization_residual(self):
        rng = np.random.default_rng(3)
        M = rng.standard_normal((4, 4))
        W = M @ M.T
        sys = hf.linear_system(np.eye(4) * -1, np.ones((4, 1)), np.eye(4))
        sys = hf.ControlAffineSystem(
            n=4, m=1, f=sys.f, g=sys.g, h=lambda x: 0.5 * x @ W @ x,
            Df=sys.Df, Dg=sys.Dg, Dh=lambda x: W @ x, D2h0=W)
        lin = hf.linearize(sys)
        err = np.linalg.norm(lin.C.T @ lin.C - W)
        assert err <= 1e-10 * (1 + np.linalg.norm(W))


class TestExamples:
    def test_scalar_value(self):
        sys = hf.example_system("scalar")
        assert sys.f(np.array([0.5]))[0] == pytest.approx(-0.25)

    def test_backstepping_equilibrium(self):
        sys = hf.example_system("backstepping")
        assert np.allclose(sys.f(np.zeros(2)), 0.0)

    def test_zero_dynamics_constant_input_channel(self):
        sys = hf.example_system("zero_dynamics")
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = rng.standard_normal(3)
            assert np.allclose(sys.g(x).ravel(), [0.0, 0.0, 1.0])

    def test_unknown_example(self):
        with pytest.raises(UnknownExample):
            hf.example_system("vanished")

    @pytest.mark.parametrize("name", ALL_EXAMPLES)
    def test_origin_is_equilibrium(self, name):
        sys = hf.example_system(name)
        assert np.linalg.norm(sys.f(np.zeros(sys.n))) < 1e-14

    @pytest.mark.parametrize("name", ALL_EXAMPLES)
    def test_jacobians_match_finite_differences(self, name):
        sys = hf.example_system(name)
        hf.check_derivatives(sys, points=20, radius=1.0, rtol=1e-5)

    @pytest.mark.parametrize("name", ALL_EXAMPLES)
    def test_penalty_conventions(self, name):
        sys = hf.example_system(name)
        zero = np.zeros(sys.n)
        assert sys.h(zero) == pytest.approx(0.0, abs=1e-14)
        assert np.linalg.norm(sys.Dh(zero)) < 1e-12
        rng = np.random.default_rng(1)
        assert all(sys.h(rng.standard_normal(sys.n)) >= 0 for _ in range(20))

    def test_pendulum_epsilon_scaling(self):
        sys = hf.example_system("pendulum", epsilon=0.25)
        x = np.array([0.3, -0.4])
        assert sys.h(x) == pytest.approx(0.25 * (0.09 + 0.16))


class TestBackstepping:
    def test_feedback_vanishes_at_origin(self):
        fb = hf.backstepping_feedback(hf.example_cascade())
        assert np.allclose(fb(np.zeros(2)), 0.0, atol=1e-14)

    def test_virtual_input_value(self):
        # alpha(x1) = -(x1^2 + x1) / (1 + x1^2), so alpha(1) = -1
        alpha = hf.virtual_input(hf.example_cascade(), np.array([1.0]))
        assert alpha[0] == pytest.approx(-1.0)

    def test_lyapunov_decrease_along_closed_loop(self):
        blocks = hf.example_cascade()
        fb = hf.backstepping_feedback(blocks)
        sys = hf.example_system("backstepping")
        traj = hf.simulate_controlled(sys, [1.0, 1.0], fb, 30.0, tol=1e-10)
        V = np.array([cascade_lyapunov(blocks, x) for x in traj.z])
        assert np.all(np.diff(V) <= 1e-9)
        assert np.linalg.norm(traj.z[-1]) < 1e-6

    def test_lyapunov_rate_matches_quadrature(self):
        # d/dt (|x1|^2/2 + |z|^2/2) = -|x1|^2 - |z|^2 along the closed loop
        blocks = hf.example_cascade()
        fb = hf.backstepping_feedback(blocks)
        sys = hf.example_system("backstepping")
        traj = hf.simulate_controlled(sys, [1.0, 1.0], fb, 2.0, tol=1e-11)
        from scipy.integrate import quad

        def dissipation(t):
            x = traj(t)[:2]
            z = x[1:] - hf.virtual_input(blocks, x[:1])
            return float(x[0] ** 2 + z @ z)

        integral, _ = quad(dissipation, 0.0, 2.0, limit=200)
        dV = (cascade_lyapunov(blocks, traj(2.0)[:2])
              - cascade_lyapunov(blocks, traj(0.0)[:2]))
        assert dV == pytest.approx(-integral, abs=1e-6)

    def test_many_starts_converge(self):
        blocks = hf.example_cascade()
        fb = hf.backstepping_feedback(blocks)
        sys = hf.example_system("backstepping")
        rng = np.random.default_rng(11)
        for _ in range(10):
            v = rng.standard_normal(2)
            v *= 2.0 * np.sqrt(rng.random()) / np.linalg.norm(v)
            traj = hf.simulate_controlled(sys, v, fb, 50.0, tol=1e-9,
                                          samples=101)
            assert np.linalg.norm(traj.z[-1]) < 1e-4


class TestCutoff:
    def test_smoothstep_profile(self):
        assert smoothstep(-1.0) == 1.0
        assert smoothstep(0.0) == 1.0
        assert smoothstep(1.0) == 0.0
        assert smoothstep(2.0) == 0.0
        ts = np.linspace(0, 1, 101)
        vals = smoothstep(ts)
        assert np.all(np.diff(vals) <= 0)
        # derivative consistency in the transition band
        for t in (0.2, 0.5, 0.8):
            fd = (smoothstep(t + 1e-6) - smoothstep(t - 1e-6)) / 2e-6
            assert smoothstep_d(t) == pytest.approx(fd, abs=1e-6)

    def test_identity_inside_radius(self):
        sys = hf.example_system("zero_dynamics")
        spec = CutoffSpec(R=2.0, split=(1, 2))
        cut = hf.cutoff_system(sys, spec)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.standard_normal(3)
            x[1:] *= 1.9 / max(np.linalg.norm(x[1:]), 1.0)
            assert np.allclose(cut.f(x), sys.f(x))
            assert np.allclose(cut.g(x), sys.g(x))
            assert np.allclose(cut.Df(x), sys.Df(x))
            assert np.allclose(np.asarray(cut.Dg(x)), np.asarray(sys.Dg(x)))

    def test_frozen_outside_radius(self):
        sys = hf.example_system("zero_dynamics")
        spec = CutoffSpec(R=2.0, split=(1, 2))
        cut = hf.cutoff_system(sys, spec)
        x = np.array([1.0, 3.0, 0.0])   # |x2 block| = 3 >= R + 1
        frozen = sys.f(np.array([1.0, 0.0, 0.0]))
        assert np.allclose(cut.f(x), frozen)

    def test_transition_band_matches_direct_evaluation(self):
        sys = hf.example_system("zero_dynamics")
        spec = CutoffSpec(R=2.0, split=(1, 2))
        cut = hf.cutoff_system(sys, spec)
        x = np.array([0.7, 2.3, 0.4])
        r = np.linalg.norm(x[1:])
        phi = smoothstep(r - 2.0)
        direct = sys.f(np.array([0.7, phi * 2.3, phi * 0.4]))
        assert np.allclose(cut.f(x), direct)

    def test_chain_rule_jacobians(self):
        sys = hf.example_system("zero_dynamics")
        cut = hf.cutoff_system(sys, CutoffSpec(R=0.8, split=(1, 2)))
        hf.check_derivatives(cut, points=20, radius=1.5, rtol=1e-4)

    def test_bad_partition(self):
        sys = hf.example_system("backstepping")
        with pytest.raises(BadPartition):
            hf.cutoff_system(sys, CutoffSpec(R=1.0, split=(2, 2)))


class TestGrowthCertificate:
    def _cubic(self):
        return hf.ControlAffineSystem(
            n=1, m=1,
            f=lambda x: np.array([x[0] ** 3]),
            g=lambda x: np.array([[1.0]]),
            h=lambda x: 0.0,
            Df=lambda x: np.array([[3 * x[0] ** 2]]),
            Dg=lambda x: np.zeros((1, 1, 1)),
            Dh=lambda x: np.zeros(1),
            D2h0=np.zeros((1, 1)),
            name="cubic")

    def test_monomial_exponent(self):
        cert = hf.growth_certificate(self._cubic(), np.geomspace(1, 100, 7))
        assert cert.f_exponent == pytest.approx(3.0, abs=0.05)

    def test_constant_input_exponent(self):
        cert = hf.growth_certificate(self._cubic(), np.geomspace(1, 100, 7))
        assert cert.g_exponent == pytest.approx(0.0, abs=0.05)

    def test_generator_growth(self):
        # bounded-slope nonlinearities give linear shell growth
        cert = hf.growth_certificate(hf.example_system("generator"),
                                     np.geomspace(1, 100, 7))
        assert 0.8 <= cert.f_exponent <= 1.2
        assert cert.coercive
        assert not cert.theta_violation
        assert cert.c_f > 0 and cert.c_g > 0 and cert.c_h > 0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamples):
            hf.growth_certificate(self._cubic(), [1.0])
        with pytest.raises(InsufficientSamples):
            hf.growth_certificate(self._cubic(), [1.0, 2.0],
                                  samples_per_shell=1)


class TestErrorPaths:
    def test_singular_g_reported(self):
        from hamflow.errors import SingularG
        from hamflow.systems import CascadeBlocks
        blocks = CascadeBlocks(
            d=1,
            f1=lambda x1: np.array([0.0]),
            g1=lambda x1: np.array([[x1[0]]]),  # singular at the origin
            f2=lambda x1, x2: np.array([0.0]),
            g2=lambda x1, x2: np.array([[1.0]]),
        )
        with pytest.raises(SingularG):
            hf.virtual_input(blocks, np.array([0.0]))
        fb = hf.backstepping_feedback(blocks)
        with pytest.raises(SingularG):
            fb(np.array([0.0, 1.0]))
