"""Hamiltonian system associated with a control-affine optimal control problem.

The state-costate dynamics are

    dx/dt = f(x) - g(x) g(x)^T p
    dp/dt = -[Df(x)^T + sum_j u*_j Dg_j(x)^T] p - Dh(x)^T,   u* = -g(x)^T p,

the characteristic field of H(x, p) = p^T f(x) - |g(x)^T p|^2 / 2 + h(x).
The costate drift uses the expanded form (linear in p) instead of
differentiating the quadratic form numerically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import IntegratorEscape, NonFiniteState, StepSizeUnderflow
from .linalg import SymplecticData, build_symplectic
from .systems import ControlAffineSystem, linearize

Array = np.ndarray

DEFAULT_TOL = 1e-9
ESCAPE_NORM = 1e8


@dataclass
class Trajectory:
    """Sampled solution with optional dense interpolant.

    ``z`` holds either x alone (state simulations, width n) or (x, p)
    stacked (Hamiltonian flow, width 2n).  ``stats`` records integrator
    effort and monitored quantities such as energy drift.
    """

    t: Array
    z: Array
    u: Optional[Array] = None
    cost: Optional[Array] = None
    H: Optional[Array] = None
    dense: Optional[Callable[[float], Array]] = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.z.shape[0] != self.t.shape[0]:
            raise ValueError("state samples and times disagree")

    @property
    def t0(self) -> float:
        return float(self.t[0])

    @property
    def tf(self) -> float:
        return float(self.t[-1])

    def __call__(self, t):
        if self.dense is None:
            raise ValueError("trajectory carries no dense interpolant")
        t = np.asarray(t, dtype=float)
        out = self.dense(t)
        return out.T if out.ndim == 2 else out

    @property
    def final_cost(self) -> float:
        if self.cost is None:
            raise ValueError("trajectory carries no accumulated cost")
        return float(self.cost[-1])


class HamiltonianSystem:
    """Bundle of a control-affine system with its Hamiltonian vector field."""

    def __init__(self, base: ControlAffineSystem, sym: Optional[SymplecticData] = None):
        self.base = base
        self.n = base.n
        self.m = base.m
        self._sym = sym

    @cached_property
    def sym(self) -> SymplecticData:
        if self._sym is not None:
            return self._sym
        lin = linearize(self.base)
        return build_symplectic(lin.A, lin.B, lin.C)

    def rhs(self, z: Array) -> Array:
        n = self.n
        x, p = z[:n], z[n:]
        sys = self.base
        gx = np.asarray(sys.g(x), dtype=float).reshape(n, self.m)
        u = -gx.T @ p
        dx = sys.f(x) + gx @ u
        Dgx = np.asarray(sys.Dg(x))
        dp = -(sys.Df(x).T @ p) - np.einsum("j,jik,i->k", u, Dgx, p) - sys.Dh(x)
        return np.concatenate([dx, dp])

    def hval(self, x: Array, p: Array) -> float:
        x = np.asarray(x, dtype=float)
        p = np.asarray(p, dtype=float)
        gx = np.asarray(self.base.g(x), dtype=float).reshape(self.n, self.m)
        v = gx.T @ p
        return float(p @ self.base.f(x) - 0.5 * v @ v + self.base.h(x))

    def hval_z(self, z: Array) -> float:
        return self.hval(z[: self.n], z[self.n:])

    def time_reversed(self) -> "ReversedHamiltonianSystem":
        return ReversedHamiltonianSystem(self)


class ReversedHamiltonianSystem(HamiltonianSystem):
    """Same system with the vector field negated (time reversal)."""

    def __init__(self, forward: HamiltonianSystem):
        super().__init__(forward.base, sym=forward._sym)
        self._forward = forward

    @cached_property
    def sym(self) -> SymplecticData:
        return self._forward.sym

    def rhs(self, z: Array) -> Array:
        return -self._forward.rhs(z)

    def hval(self, x, p):
        return self._forward.hval(x, p)

    def time_reversed(self) -> HamiltonianSystem:
        return self._forward


def build_hamiltonian(sys: ControlAffineSystem) -> HamiltonianSystem:
    """Wrap a system into its Hamiltonian state-costate dynamics."""
    return HamiltonianSystem(sys)


def optimal_feedback(hsys: HamiltonianSystem, x: Array, p: Array) -> Array:
    """Pointwise minimizer of the pre-Hamiltonian: u = -g(x)^T p."""
    gx = np.asarray(hsys.base.g(np.asarray(x, dtype=float)))
    return -gx.reshape(hsys.n, hsys.m).T @ np.asarray(p, dtype=float)


def _integrate(rhs_t, z0, t_span, tol, max_norm=ESCAPE_NORM, t_eval=None,
               max_step=np.inf):
    """solve_ivp wrapper with escape guard and failure classification.

    ``rhs_t`` has the (t, z) signature.
    """
    z0 = np.asarray(z0, dtype=float)
    if not np.all(np.isfinite(z0)):
        raise NonFiniteState("non-finite initial state")

    def wrapped(t, z):
        dz = rhs_t(t, z)
        if not np.all(np.isfinite(dz)):
            raise NonFiniteState(f"vector field non-finite at t={t:.6g}")
        return dz

    def escape(t, z):
        return max_norm - np.abs(z).max()

    escape.terminal = True
    sol = solve_ivp(wrapped, t_span, z0, method="RK45", rtol=tol, atol=tol,
                    dense_output=True, events=escape, t_eval=t_eval,
                    max_step=max_step)
    if sol.status == 1:
        raise IntegratorEscape(
            f"state norm exceeded {max_norm:.1e} at t={sol.t[-1]:.6g}"
        )
    if not sol.success:
        raise StepSizeUnderflow(sol.message)
    return sol


def flow(hsys: HamiltonianSystem, z0: Array, t_span, tol: float = DEFAULT_TOL,
         max_norm: float = ESCAPE_NORM, samples: int = 257) -> Trajectory:
    """Integrate the Hamiltonian field over t_span (backward spans allowed).

    The value of H along the returned samples is recorded and its drift
    relative to H(z0) stored in ``stats['energy_drift']``.
    """
    t0, tf = float(t_span[0]), float(t_span[1])
    sol = _integrate(lambda t, z: hsys.rhs(z), z0, (t0, tf), tol,
                     max_norm=max_norm)
    ts = np.linspace(t0, sol.t[-1], samples)
    Z = sol.sol(ts).T
    if tf < t0:  # store with increasing time
        ts, Z = ts[::-1], Z[::-1]
    H = np.array([hsys.hval_z(z) for z in Z])
    traj = Trajectory(
        t=ts, z=Z, H=H, dense=sol.sol,
        stats={
            "nfev": int(sol.nfev),
            "steps": len(sol.t) - 1,
            "tol": tol,
            "energy_drift": float(np.abs(H - hsys.hval_z(np.asarray(z0, float))).max()),
            "reached": float(sol.t[-1]),
        },
    )
    if hsys.m:
        n = hsys.n
        traj.u = np.array([optimal_feedback(hsys, z[:n], z[n:]) for z in Z])
    return traj


def to_xi_eta(sym: SymplecticData, x: Array, p: Array):
    """Transformed coordinates: eta = p - P1 x, xi = x - P2 eta."""
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    eta = p - x @ sym.P1.T
    xi = x - eta @ sym.P2.T
    return xi, eta


def from_xi_eta(sym: SymplecticData, xi: Array, eta: Array):
    """Inverse transform: x = xi + P2 eta, p = P1 x + eta."""
    xi = np.asarray(xi, dtype=float)
    eta = np.asarray(eta, dtype=float)
    x = xi + eta @ sym.P2.T
    p = x @ sym.P1.T + eta
    return x, p


class PiecewiseConstantInput:
    """Right-continuous piecewise-constant input signal on [t[0], t[-1]]."""

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if len(self.times) != self.values.shape[0] + 1:
            raise ValueError("need len(times) == len(values) + 1")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must increase")

    def __call__(self, t: float) -> Array:
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1,
                      0, self.values.shape[0] - 1)
        return self.values[int(idx)]


def simulate_controlled(sys: ControlAffineSystem, x0: Array, u_source, T: float,
                        tol: float = DEFAULT_TOL, samples: int = 257) -> Trajectory:
    """Closed- or open-loop simulation with the running cost accumulated.

    ``u_source`` is a feedback law (callable of x) or a
    PiecewiseConstantInput; the cost integral of |u|^2/2 + h(x) rides along
    as an extra state.
    """
    x0 = np.asarray(x0, dtype=float)
    n, m = sys.n, sys.m

    if isinstance(u_source, PiecewiseConstantInput):
        def u_of(t, x):
            return np.asarray(u_source(t), dtype=float).reshape(m)
        breaks = [bp for bp in u_source.times if 0.0 < bp < T]
    else:
        k = u_source.k if hasattr(u_source, "k") else u_source

        def u_of(t, x):
            return np.asarray(k(x), dtype=float).reshape(m)
        breaks = []

    def rhs(t, y):
        x = y[:n]
        u = u_of(t, x)
        dx = sys.f(x) + np.asarray(sys.g(x)).reshape(n, m) @ u
        dc = 0.5 * float(u @ u) + sys.h(x)
        return np.concatenate([dx, [dc]])

    edges = [0.0] + sorted(breaks) + [float(T)]
    sols = []
    y = np.concatenate([x0, [0.0]])
    for a, b in zip(edges[:-1], edges[1:]):
        sol = _integrate(rhs, y, (a, b), tol)
        sols.append(sol)
        y = sol.y[:, -1]

    ts = np.linspace(0.0, float(T), samples)
    Z = np.empty((samples, n + 1))
    for i, t in enumerate(ts):
        for sol in sols:
            if sol.t[0] <= t <= sol.t[-1] + 1e-12:
                Z[i] = sol.sol(min(t, sol.t[-1]))
                break
    U = np.array([u_of(t, Z[i, :n]) for i, t in enumerate(ts)])
    return Trajectory(
        t=ts, z=Z[:, :n], u=U, cost=Z[:, n],
        dense=_PiecewiseDense(sols),
        stats={"nfev": int(sum(s.nfev for s in sols)), "tol": tol},
    )


class _PiecewiseDense:
    def __init__(self, sols):
        self.sols = sols

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if t.ndim == 0:
            return self._one(float(t))
        return np.stack([self._one(float(tv)) for tv in t], axis=1)

    def _one(self, t):
        for sol in self.sols:
            if t <= sol.t[-1] + 1e-12:
                return sol.sol(min(max(t, sol.t[0]), sol.t[-1]))
        return self.sols[-1].sol(self.sols[-1].t[-1])


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def trajectory_to_csv(traj: Trajectory, path, n: Optional[int] = None):
    """Write the plotting interchange format.

    Columns: t, x1..xn, then p1..pn when the trajectory is a state-costate
    flow, then u1..um, H and cost when present.  The header declares the
    layout; ``read_trajectory_csv`` inverts it.
    """
    width = traj.z.shape[1]
    if n is None:
        n = width // 2 if (traj.H is not None and width % 2 == 0) else width
    cols = ["t"] + [f"x{i+1}" for i in range(n)]
    if width == 2 * n:
        cols += [f"p{i+1}" for i in range(n)]
    if traj.u is not None:
        cols += [f"u{i+1}" for i in range(traj.u.shape[1])]
    if traj.H is not None:
        cols.append("H")
    if traj.cost is not None:
        cols.append("cost")

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for i, t in enumerate(traj.t):
            row = [t] + list(traj.z[i])
            if traj.u is not None:
                row += list(traj.u[i])
            if traj.H is not None:
                row.append(traj.H[i])
            if traj.cost is not None:
                row.append(traj.cost[i])
            w.writerow(f"{v:.12e}" for v in row)


def read_trajectory_csv(path) -> Trajectory:
    """Load a trajectory written by trajectory_to_csv (no dense interpolant)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array([[float(v) for v in r] for r in rows[1:]])
    nx = sum(1 for c in header if c.startswith("x"))
    np_ = sum(1 for c in header if c.startswith("p"))
    nu = sum(1 for c in header if c.startswith("u"))
    i = 1 + nx + np_
    z = data[:, 1:i]
    u = data[:, i:i + nu] if nu else None
    i += nu
    H = data[:, i] if "H" in header else None
    if H is not None:
        i += 1
    cost = data[:, i] if "cost" in header else None
    return Trajectory(t=data[:, 0], z=z, u=u, cost=cost, H=H)
