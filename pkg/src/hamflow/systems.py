"""Control-affine systems, costs, linearization data and stabilizer constructions.

A system is the triple (f, g, h) for dynamics ``dx/dt = f(x) + g(x) u`` with
running cost ``|u|^2/2 + h(x)``.  Everything downstream (Hamiltonian flow,
Riccati data, manifold charts) consumes the callables and Jacobians bundled
here.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    BadPartition,
    InsufficientSamples,
    NonPSDHessian,
    SingularG,
    UnknownExample,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlAffineSystem:
    """Dynamics dx/dt = f(x) + g(x) u with state penalty h.

    ``Dg(x)`` stacks the per-column Jacobians: ``Dg(x)[j][i, k]`` is the
    derivative of ``g[i, j]`` with respect to ``x[k]``.
    """

    n: int
    m: int
    f: Callable[[Array], Array]
    g: Callable[[Array], Array]            # (n, m)
    h: Callable[[Array], float]
    Df: Callable[[Array], Array]           # (n, n)
    Dg: Callable[[Array], Array]           # (m, n, n)
    Dh: Callable[[Array], Array]           # (n,)
    D2h0: Array                            # (n, n) Hessian of h at the origin
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "D2h0", np.atleast_2d(np.asarray(self.D2h0, dtype=float)))
        if self.D2h0.shape != (self.n, self.n):
            raise ValueError(f"D2h0 must be {self.n}x{self.n}")


@dataclass(frozen=True)
class LinearData:
    """Linear part (A, B, C) of a system: f = Ax + higher order, g = B + ...,
    h = |Cx|^2/2 + higher order."""

    A: Array
    B: Array
    C: Array  # (r, n); r may be zero when h has no quadratic part

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def remainders(sys: ControlAffineSystem, lin: LinearData):
    """Higher-order parts (f - Ax, g - B, h - |Cx|^2/2) as callables."""
    CtC = lin.C.T @ lin.C

    def phi(x):
        return sys.f(x) - lin.A @ x

    def g_tilde(x):
        return sys.g(x) - lin.B

    def h_tilde(x):
        return sys.h(x) - 0.5 * float(x @ CtC @ x)

    return phi, g_tilde, h_tilde


@dataclass(frozen=True)
class GrowthCertificate:
    """Empirical shell-growth data for the stabilizable-case hypotheses.

    The bounds being certified are |f(x)| <= c_f |x|^(p+theta),
    ||g(x)|| <= c_g |x|^(p/2+theta) and h(x) >= c_h |x|^p for |x| > rho.
    """

    exponent_p: float
    growth_theta: float
    c_f: float
    c_g: float
    c_h: float
    rho: float
    sample_radii: tuple
    fit_residual: float
    f_exponent: float
    g_exponent: float
    h_exponent: Optional[float]
    coercive: bool
    theta_violation: bool
    decay_rate: Optional[float] = None
    decay_gain: Optional[float] = None


@dataclass(frozen=True)
class FeedbackLaw:
    """State feedback u = k(x) with k(0) = 0, valid on |x| < domain_radius."""

    k: Callable[[Array], Array]
    domain_radius: float = np.inf

    def __call__(self, x: Array) -> Array:
        return self.k(np.asarray(x, dtype=float))


def _bump(t):
    """exp(-1/t) for t > 0, zero otherwise (underflow-guarded)."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    mask = t > 1e-8
    out[mask] = np.exp(-1.0 / t[mask])
    return out


def _bump_d(t):
    """Derivative of _bump."""
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    mask = t > 1e-8
    out[mask] = np.exp(-1.0 / t[mask]) / t[mask] ** 2
    return out


def smoothstep(t):
    """C-infinity monotone step: 1 at t <= 0, 0 at t >= 1."""
    t = np.asarray(t, dtype=float)
    a = _bump(1.0 - t)
    b = _bump(t)
    return a / (a + b + (a + b == 0.0))


def smoothstep_d(t):
    t = np.asarray(t, dtype=float)
    a = _bump(1.0 - t)
    b = _bump(t)
    da = -_bump_d(1.0 - t)
    db = _bump_d(t)
    denom = (a + b) ** 2
    denom = denom + (denom == 0.0)
    return (da * b - a * db) / denom


@dataclass(frozen=True)
class CutoffSpec:
    """Radius and state split for the cutoff transform on the second block.

    The profile is 1 for |x2| < R, 0 for |x2| >= R + 1 and C-infinity
    monotone in between.
    """

    R: float
    split: tuple  # (n1, n2)
    profile: Callable[[Array], Array] = field(default=smoothstep)
    profile_d: Callable[[Array], Array] = field(default=smoothstep_d)

    def phi(self, x2: Array) -> float:
        r = float(np.linalg.norm(x2))
        return float(self.profile(r - self.R))

    def phi_grad(self, x2: Array) -> Array:
        """Gradient of phi_R with respect to x2."""
        x2 = np.asarray(x2, dtype=float)
        r = float(np.linalg.norm(x2))
        if r == 0.0:
            return np.zeros_like(x2)
        return float(self.profile_d(r - self.R)) * x2 / r


# ---------------------------------------------------------------------------
# linearization
# ---------------------------------------------------------------------------

def factor_psd(M: Array, tol: float = 1e-12) -> Array:
    """Symmetric factor C with C^T C = M for PSD M, keeping rank(M) rows.

    Raises NonPSDHessian when M has an eigenvalue below -tol * scale.
    """
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    scale = max(1.0, float(np.abs(w).max(initial=0.0)))
    if w.min(initial=0.0) < -tol * scale:
        raise NonPSDHessian(
            f"penalty Hessian has negative eigenvalue {w.min():.3e}"
        )
    keep = w > tol * scale
    return (np.sqrt(w[keep])[:, None] * V[:, keep].T)


def linearize(sys: ControlAffineSystem) -> LinearData:
    """Extract (A, B, C): A = Df(0), B = g(0), C^T C = Hessian of h at 0."""
    zero = np.zeros(sys.n)
    A = np.atleast_2d(np.asarray(sys.Df(zero), dtype=float))
    B = np.asarray(sys.g(zero), dtype=float).reshape(sys.n, sys.m)
    C = factor_psd(sys.D2h0)
    if C.size == 0:
        C = C.reshape(0, sys.n)
    err = np.linalg.norm(C.T @ C - 0.5 * (sys.D2h0 + sys.D2h0.T))
    if err > 1e-10 * (1.0 + np.linalg.norm(sys.D2h0)):
        raise NonPSDHessian("factorization residual too large")
    return LinearData(A=A, B=B, C=C)


# ---------------------------------------------------------------------------
# built-in example systems
# ---------------------------------------------------------------------------

def _quad_penalty(W: Array):
    """h(x) = x^T W x / 2 with gradient and Hessian."""
    W = np.atleast_2d(np.asarray(W, dtype=float))

    def h(x):
        return 0.5 * float(x @ W @ x)

    def Dh(x):
        return W @ x

    return h, Dh, W


def _scalar_example() -> ControlAffineSystem:
    def f(x):
        return np.array([-x[0] + x[0] ** 2])

    def g(x):
        return np.array([[1.0]])

    def Df(x):
        return np.array([[-1.0 + 2.0 * x[0]]])

    def Dg(x):
        return np.zeros((1, 1, 1))

    return ControlAffineSystem(
        n=1, m=1, f=f, g=g,
        h=lambda x: 0.0,
        Df=Df, Dg=Dg,
        Dh=lambda x: np.zeros(1),
        D2h0=np.zeros((1, 1)),
        name="scalar",
    )


def _generator_example(a=1.0, b=1.0, c=1.0, d=1.0, delta=np.pi / 4,
                       penalty_weight=None) -> ControlAffineSystem:
    """Synchronous generator connected to an infinite bus (feedback linearizable
    on -delta < x1 < pi - delta)."""
    if min(a, b, c, d, delta) <= 0:
        raise ValueError("generator parameters must be positive")
    W = np.eye(3) if penalty_weight is None else np.asarray(penalty_weight, float)
    h, Dh, W = _quad_penalty(W)

    def f(x):
        x1, x2, x3 = x
        return np.array([
            x2,
            -a * ((1.0 + x3) * np.sin(x1 + delta) - np.sin(delta)) - b * x2,
            -c * x3 + d * (np.cos(x1 + delta) - np.cos(delta)),
        ])

    def g(x):
        return np.array([[0.0], [0.0], [1.0]])

    def Df(x):
        x1, x2, x3 = x
        return np.array([
            [0.0, 1.0, 0.0],
            [-a * (1.0 + x3) * np.cos(x1 + delta), -b, -a * np.sin(x1 + delta)],
            [-d * np.sin(x1 + delta), 0.0, -c],
        ])

    def Dg(x):
        return np.zeros((1, 3, 3))

    return ControlAffineSystem(n=3, m=1, f=f, g=g, h=h, Df=Df, Dg=Dg,
                               Dh=Dh, D2h0=W, name="generator")


def _pendulum_example(epsilon=0.1) -> ControlAffineSystem:
    """Pendulum on a cart with the cart position neglected; x1 is the angle
    from the upright position."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    W = 2.0 * epsilon * np.eye(2)
    h, Dh, W = _quad_penalty(W)

    def f(x):
        x1, x2 = x
        den = 1.0 + np.sin(x1) ** 2
        return np.array([
            x2,
            (np.sin(x1) - x2 ** 2 * np.sin(x1) * np.cos(x1)) / den,
        ])

    def g(x):
        x1 = x[0]
        den = 1.0 + np.sin(x1) ** 2
        return np.array([[0.0], [-np.cos(x1) / den]])

    def Df(x):
        x1, x2 = x
        s, cth = np.sin(x1), np.cos(x1)
        den = 1.0 + s ** 2
        num = s - x2 ** 2 * s * cth
        dnum = cth - x2 ** 2 * np.cos(2.0 * x1)
        dden = np.sin(2.0 * x1)
        return np.array([
            [0.0, 1.0],
            [(dnum * den - num * dden) / den ** 2,
             -x2 * np.sin(2.0 * x1) / den],
        ])

    def Dg(x):
        x1 = x[0]
        s, cth = np.sin(x1), np.cos(x1)
        den = 1.0 + s ** 2
        d_dx1 = (s * den + cth * np.sin(2.0 * x1)) / den ** 2
        out = np.zeros((1, 2, 2))
        out[0, 1, 0] = d_dx1
        return out

    return ControlAffineSystem(n=2, m=1, f=f, g=g, h=h, Df=Df, Dg=Dg,
                               Dh=Dh, D2h0=W, name="pendulum")


def _zero_dynamics_example() -> ControlAffineSystem:
    """Three-state normal form with globally exponentially stable zero dynamics."""
    h, Dh, W = _quad_penalty(np.eye(3))

    def f(x):
        x1, x2, x3 = x
        return np.array([-x1 + x1 ** 2 * x2, x3, 0.0])

    def g(x):
        return np.array([[0.0], [0.0], [1.0]])

    def Df(x):
        x1, x2, x3 = x
        return np.array([
            [-1.0 + 2.0 * x1 * x2, x1 ** 2, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0],
        ])

    def Dg(x):
        return np.zeros((1, 3, 3))

    return ControlAffineSystem(n=3, m=1, f=f, g=g, h=h, Df=Df, Dg=Dg,
                               Dh=Dh, D2h0=W, name="zero_dynamics")


def _backstepping_example() -> ControlAffineSystem:
    """Planar cascade stabilizable by backstepping; turnpike benchmark system."""
    h, Dh, W = _quad_penalty(np.eye(2))

    def f(x):
        x1, x2 = x
        return np.array([x1 ** 2 + (1.0 + x1 ** 2) * x2, x2 ** 2])

    def g(x):
        return np.array([[0.0], [1.0]])

    def Df(x):
        x1, x2 = x
        return np.array([
            [2.0 * x1 + 2.0 * x1 * x2, 1.0 + x1 ** 2],
            [0.0, 2.0 * x2],
        ])

    def Dg(x):
        return np.zeros((1, 2, 2))

    return ControlAffineSystem(n=2, m=1, f=f, g=g, h=h, Df=Df, Dg=Dg,
                               Dh=Dh, D2h0=W, name="backstepping")


_EXAMPLES = {
    "scalar": _scalar_example,
    "generator": _generator_example,
    "pendulum": _pendulum_example,
    "zero_dynamics": _zero_dynamics_example,
    "backstepping": _backstepping_example,
}


def example_system(name: str, **params) -> ControlAffineSystem:
    """Build a named example system with exact symbolic Jacobians.

    Defaults: scalar has h = 0; pendulum takes ``epsilon`` (default 0.1) for
    h = eps(x1^2 + x2^2); the generator takes (a, b, c, d, delta) and an
    optional ``penalty_weight`` matrix (default identity, h = |x|^2/2).
    """
    try:
        builder = _EXAMPLES[name]
    except KeyError:
        raise UnknownExample(
            f"unknown example {name!r}; choose from {sorted(_EXAMPLES)}"
        ) from None
    return builder(**params)


def linear_system(A: Array, B: Array, C: Array, name: str = "linear") -> ControlAffineSystem:
    """Exact linear-quadratic system f = Ax, g = B, h = |Cx|^2/2."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)
    m = B.shape[1]
    CtC = C.T @ C

    return ControlAffineSystem(
        n=n, m=m,
        f=lambda x: A @ x,
        g=lambda x: B,
        h=lambda x: 0.5 * float(x @ CtC @ x),
        Df=lambda x: A,
        Dg=lambda x: np.zeros((m, n, n)),
        Dh=lambda x: CtC @ x,
        D2h0=CtC,
        name=name,
    )


# ---------------------------------------------------------------------------
# backstepping stabilizer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CascadeBlocks:
    """Two-block cascade dx1 = f1(x1) + g1(x1) x2, dx2 = f2(x1,x2) + g2(x1,x2) u
    with x1, x2, u all of dimension d and g1, g2 everywhere invertible."""

    d: int
    f1: Callable[[Array], Array]
    g1: Callable[[Array], Array]           # (d, d)
    f2: Callable[[Array, Array], Array]
    g2: Callable[[Array, Array], Array]    # (d, d)
    Df1: Optional[Callable[[Array], Array]] = None
    Dg1: Optional[Callable[[Array], Array]] = None  # (d, d, d): [i,j,k]=d g1[i,j]/d x1[k]


def example_cascade(name: str = "backstepping") -> CascadeBlocks:
    """Cascade blocks for the shipped backstepping example."""
    if name != "backstepping":
        raise UnknownExample(f"no cascade decomposition shipped for {name!r}")

    return CascadeBlocks(
        d=1,
        f1=lambda x1: np.array([x1[0] ** 2]),
        g1=lambda x1: np.array([[1.0 + x1[0] ** 2]]),
        f2=lambda x1, x2: np.array([x2[0] ** 2]),
        g2=lambda x1, x2: np.array([[1.0]]),
        Df1=lambda x1: np.array([[2.0 * x1[0]]]),
        Dg1=lambda x1: np.array([[[2.0 * x1[0]]]]),
    )


def _solve_invertible(M: Array, v: Array, what: str) -> Array:
    M = np.atleast_2d(M)
    if np.linalg.cond(M) > 1e12:
        raise SingularG(f"{what} is singular (cond > 1e12)")
    return np.linalg.solve(M, v)


def virtual_input(blocks: CascadeBlocks, x1: Array) -> Array:
    """Stabilizing virtual input alpha(x1) = g1(x1)^(-1) [-f1(x1) - x1]."""
    x1 = np.asarray(x1, dtype=float)
    return _solve_invertible(blocks.g1(x1), -blocks.f1(x1) - x1, "g1")


def _d_alpha(blocks: CascadeBlocks, x1: Array, fd_step: float = 1e-6) -> Array:
    """Jacobian of the virtual input, analytic when Df1/Dg1 are provided."""
    x1 = np.asarray(x1, dtype=float)
    d = blocks.d
    if blocks.Df1 is not None and blocks.Dg1 is not None:
        alpha = virtual_input(blocks, x1)
        G = np.atleast_2d(blocks.g1(x1))
        Dv = -np.atleast_2d(blocks.Df1(x1)) - np.eye(d)
        DG = np.asarray(blocks.Dg1(x1)).reshape(d, d, d)
        # d/dx_k (G^-1 v) = G^-1 (dv/dx_k - dG/dx_k alpha)
        rhs = Dv - np.einsum("ijk,j->ik", DG, alpha)
        return _solve_invertible(G, rhs, "g1")
    J = np.zeros((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = fd_step
        J[:, k] = (virtual_input(blocks, x1 + e) - virtual_input(blocks, x1 - e)) / (2 * fd_step)
    return J


def backstepping_feedback(blocks: CascadeBlocks) -> FeedbackLaw:
    """Exponentially stabilizing cascade feedback.

    With z = x2 - alpha(x1) and V = |x1|^2/2 + |z|^2/2 the closed loop
    satisfies dV/dt = -|x1|^2 - |z|^2.
    """
    d = blocks.d

    def k(x):
        x = np.asarray(x, dtype=float)
        x1, x2 = x[:d], x[d:]
        alpha = virtual_input(blocks, x1)
        z = x2 - alpha
        G1 = np.atleast_2d(blocks.g1(x1))
        x1dot = blocks.f1(x1) + G1 @ x2
        alpha_dot = _d_alpha(blocks, x1) @ x1dot
        rhs = -blocks.f2(x1, x2) + alpha_dot - G1.T @ x1 - z
        return _solve_invertible(blocks.g2(x1, x2), rhs, "g2")

    return FeedbackLaw(k=k, domain_radius=np.inf)


def cascade_lyapunov(blocks: CascadeBlocks, x: Array) -> float:
    """V(x1, z) = |x1|^2/2 + |x2 - alpha(x1)|^2/2 for the closed loop."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[:blocks.d], x[blocks.d:]
    z = x2 - virtual_input(blocks, x1)
    return 0.5 * float(x1 @ x1) + 0.5 * float(z @ z)


# ---------------------------------------------------------------------------
# cutoff transform
# ---------------------------------------------------------------------------

def cutoff_system(sys: ControlAffineSystem, spec: CutoffSpec) -> ControlAffineSystem:
    """Freeze the second state block outside |x2| >= R + 1.

    Returns the system with f~(x1, x2) = f(x1, phi_R(x2) x2) and the same for
    g, with chain-rule Jacobians.  Identity on |x2| < R.
    """
    n1, n2 = spec.split
    if n1 + n2 != sys.n or n1 < 0 or n2 <= 0:
        raise BadPartition(f"split {spec.split} inconsistent with n = {sys.n}")

    def clamp(x):
        x = np.asarray(x, dtype=float)
        y = x.copy()
        y[n1:] = spec.phi(x[n1:]) * x[n1:]
        return y

    def inner_jac(x):
        """Jacobian of x -> clamp(x), block structure [[I, 0], [0, J2]]."""
        x2 = np.asarray(x, dtype=float)[n1:]
        J = np.eye(sys.n)
        J2 = spec.phi(x2) * np.eye(n2) + np.outer(x2, spec.phi_grad(x2))
        J[n1:, n1:] = J2
        return J

    def f(x):
        return sys.f(clamp(x))

    def g(x):
        return sys.g(clamp(x))

    def Df(x):
        return sys.Df(clamp(x)) @ inner_jac(x)

    def Dg(x):
        J = inner_jac(x)
        return np.einsum("jik,kl->jil", np.asarray(sys.Dg(clamp(x))), J)

    return ControlAffineSystem(
        n=sys.n, m=sys.m, f=f, g=g, h=sys.h, Df=Df, Dg=Dg,
        Dh=sys.Dh, D2h0=sys.D2h0, name=f"{sys.name}_cutoff",
    )


# ---------------------------------------------------------------------------
# growth certificate
# ---------------------------------------------------------------------------

def _sphere_samples(n: int, count: int, rng: np.random.Generator) -> Array:
    v = rng.standard_normal((count, n))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return v / norms


def growth_certificate(sys: ControlAffineSystem,
                       radii: Sequence[float],
                       samples_per_shell: int = 64,
                       seed: int = 0) -> GrowthCertificate:
    """Fit shell-growth exponents of |f|, ||g|| and a coercivity floor for h.

    Max-over-shell norms are fitted because the certified inequalities are
    uniform bounds; h uses min-over-shell.  The exponent pair (p, theta) is
    chosen as p = h-exponent when h is coercive (else the f-exponent with
    theta = 0), and theta then takes up any excess growth of f or g.
    """
    radii = np.asarray(sorted(float(r) for r in radii))
    if len(radii) < 2:
        raise InsufficientSamples("need at least two shell radii")
    if samples_per_shell < max(2, sys.n):
        raise InsufficientSamples("too few samples per shell")
    if np.any(radii <= 0):
        raise InsufficientSamples("radii must be positive")

    rng = np.random.default_rng(seed)
    dirs = _sphere_samples(sys.n, samples_per_shell, rng)

    f_max = np.zeros(len(radii))
    g_max = np.zeros(len(radii))
    h_min = np.zeros(len(radii))
    for i, r in enumerate(radii):
        pts = r * dirs
        f_max[i] = max(np.linalg.norm(sys.f(x)) for x in pts)
        g_max[i] = max(np.linalg.norm(sys.g(x), 2) for x in pts)
        h_min[i] = min(sys.h(x) for x in pts)

    logr = np.log(radii)

    def fit(vals, mask=None):
        sel = np.ones(len(radii), dtype=bool) if mask is None else mask
        v = np.log(np.clip(vals[sel], 1e-300, None))
        M = np.vstack([logr[sel], np.ones_like(logr[sel])]).T
        coef, res, *_ = np.linalg.lstsq(M, v, rcond=None)
        resid = float(np.sqrt(res[0])) if res.size else 0.0
        return float(coef[0]), float(np.exp(coef[1])), resid

    e_f, _, res_f = fit(f_max)
    e_g, _, res_g = fit(g_max)

    pos = h_min > 0
    coercive = bool(pos.sum() >= 2 and np.all(h_min[-2:] > 0)
                    and h_min[-1] > h_min[len(h_min) // 2])
    if coercive:
        e_h, _, _ = fit(h_min, mask=pos)
        p = max(e_h, 1e-6)
    else:
        e_h = None
        p = max(e_f, 1e-6)

    theta = max(0.0, e_f - p, e_g - p / 2.0)
    theta_violation = bool(theta >= 0.98)

    c_f = float(np.max(f_max / radii ** (p + theta)))
    c_g = float(np.max(g_max / radii ** (p / 2.0 + theta)))

    if coercive:
        pos_idx = np.nonzero(h_min > 0)[0]
        first = pos_idx[0]
        rho = float(radii[first])
        c_h = float(np.min(h_min[first:] / radii[first:] ** p))
    else:
        rho = float("inf")
        c_h = 0.0

    return GrowthCertificate(
        exponent_p=float(p),
        growth_theta=float(theta),
        c_f=c_f, c_g=c_g, c_h=c_h, rho=rho,
        sample_radii=tuple(radii),
        fit_residual=float(max(res_f, res_g)),
        f_exponent=float(e_f),
        g_exponent=float(e_g),
        h_exponent=e_h,
        coercive=coercive,
        theta_violation=theta_violation,
    )


# ---------------------------------------------------------------------------
# derivative validation
# ---------------------------------------------------------------------------

def check_derivatives(sys: ControlAffineSystem, points: int = 20,
                      radius: float = 1.0, seed: int = 0,
                      step: float = 1e-6, rtol: float = 1e-5) -> float:
    """Central-difference check of Df, Dg, Dh at random points; returns the
    worst relative error and raises AssertionError beyond rtol."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        x = radius * _sphere_samples(sys.n, 1, rng)[0] * rng.random() ** (1.0 / sys.n)
        Df_fd = np.zeros((sys.n, sys.n))
        Dg_fd = np.zeros((sys.m, sys.n, sys.n))
        Dh_fd = np.zeros(sys.n)
        for k in range(sys.n):
            e = np.zeros(sys.n)
            e[k] = step
            Df_fd[:, k] = (sys.f(x + e) - sys.f(x - e)) / (2 * step)
            gp, gm = sys.g(x + e), sys.g(x - e)
            Dg_fd[:, :, k] = ((gp - gm) / (2 * step)).T
            Dh_fd[k] = (sys.h(x + e) - sys.h(x - e)) / (2 * step)
        scale = 1.0 + np.linalg.norm(sys.f(x)) + np.linalg.norm(sys.g(x))
        worst = max(
            worst,
            np.max(np.abs(Df_fd - sys.Df(x))) / scale,
            np.max(np.abs(Dg_fd - np.asarray(sys.Dg(x)))) / scale,
            np.max(np.abs(Dh_fd - sys.Dh(x))) / scale,
        )
    if worst > rtol:
        raise AssertionError(f"Jacobian mismatch {worst:.2e} exceeds {rtol:.0e}")
    return worst
