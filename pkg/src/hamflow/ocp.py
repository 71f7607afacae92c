"""Finite-horizon two-point BVPs on the Hamiltonian system and turnpike metrics.

The necessary conditions for the problem with fixed endpoints x(0) = x0,
x(T) = xf are a Hamiltonian orbit joining the two fibers.  Short horizons are
solved by single shooting on p(0).  On long horizons the time-T flow map
amplifies perturbations by e^{mu T} (mu the unstable rate), which makes the
single-shooting map unevaluable in double precision, so the solver switches
to multiple shooting on a horizon grid clustered at both ends, with the last
segment parametrized backward from (xf, pT) and the middle nodes riding the
turnpike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq

from .errors import IntegrationError, NoConvergence, ShootingDiverged
from .hamiltonian import (
    HamiltonianSystem,
    Trajectory,
    _integrate,
    _PiecewiseDense,
    optimal_feedback,
    simulate_controlled,
)
from .systems import ControlAffineSystem, linearize
from .linalg import solve_care

Array = np.ndarray

_SEG_CAP_EXPONENT = 8.0     # max e^{mu * segment length} during shooting
_ESCAPE_CAP = 1e6


@dataclass(frozen=True)
class FiniteHorizonProblem:
    sys: ControlAffineSystem
    x0: Array
    xf: Array
    T: float
    epsilon: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "xf", np.asarray(self.xf, dtype=float))
        if self.T <= 0:
            raise ValueError("horizon must be positive")
        if self.x0.shape != (self.sys.n,) or self.xf.shape != (self.sys.n,):
            raise ValueError("endpoint dimensions inconsistent with system")


# ---------------------------------------------------------------------------
# shooting machinery
# ---------------------------------------------------------------------------

def _unstable_rate(hsys: HamiltonianSystem) -> float:
    """Fastest expansion rate of the linearized flow (governs shooting
    conditioning per unit time)."""
    return float(-np.min(np.linalg.eigvals(hsys.sym.F).real))


def _seg_flow(hsys, z0, t0, t1, tol):
    """Endpoint of the Hamiltonian flow over [t0, t1]; None on escape."""
    try:
        sol = _integrate(lambda t, z: hsys.rhs(z), z0, (t0, t1), tol,
                         max_norm=_ESCAPE_CAP)
    except IntegrationError:
        return None
    return sol.y[:, -1]


def _seg_flow_soft(hsys, z0, t0, t1, tol, cap=1e3):
    """Endpoint of the flow with a soft escape penalty.

    When the trajectory hits the norm cap before t1 the capped state is
    scaled up by the missing time, so the shooting residual keeps pointing
    away from escape instead of flattening at a constant."""
    from scipy.integrate import solve_ivp

    def escape(t, z):
        return cap - np.abs(z).max()

    escape.terminal = True
    sol = solve_ivp(lambda t, z: hsys.rhs(z), (t0, t1), z0, method="RK45",
                    rtol=tol, atol=tol, events=escape)
    if not sol.success:
        return np.full(len(z0), _ESCAPE_CAP)
    zend = sol.y[:, -1]
    if sol.status == 1:
        deficit = abs(t1 - sol.t[-1])
        return zend * (1.0 + 10.0 * deficit)
    return zend


def _segment_nodes(T: float, mu: float) -> Array:
    """Horizon grid for multiple shooting.

    Short horizons get near-uniform segments short enough that strongly
    nonlinear guesses survive one segment; long horizons cluster
    geometrically at both ends and ride the turnpike in the middle.
    """
    mu = max(mu, 1e-3)
    first = 0.3 / mu
    cap = _SEG_CAP_EXPONENT / mu
    if T <= 12.0 / mu:
        nseg = int(np.ceil(T / (1.5 * first)))
        return np.linspace(0.0, T, max(nseg, 2) + 1)

    def ladder(limit):
        out = [0.0]
        step = first
        while out[-1] + 1e-9 < limit:
            out.append(min(out[-1] + step, limit))
            step = min(2.0 * step, cap)
        return out

    half = T / 2.0
    fwd = ladder(half)
    bwd = [T - t for t in ladder(half)]
    nodes = np.unique(np.round(np.concatenate([fwd, bwd]), 12))
    # merge nodes closer than a quarter of the first rung
    keep = [nodes[0]]
    for t in nodes[1:]:
        if t - keep[-1] >= 0.25 * first or t == nodes[-1]:
            keep.append(t)
    return np.asarray(keep)


def _tangent_guess(hsys: HamiltonianSystem, x0, xf, T):
    """Initial trajectory guess from the linear manifold tangents.

    Decay phase rides the stable tangent p = P1 x; the terminal approach
    rides the unstable tangent p = (I + P1 P2) P2^{-1} x.
    """
    sym = hsys.sym
    n = hsys.n
    P1, P2, F = sym.P1, sym.P2, sym.F
    try:
        P2inv = np.linalg.inv(P2)
        MU = (np.eye(n) + P1 @ P2) @ P2inv
        FU = P2 @ (-F.T) @ P2inv
    except np.linalg.LinAlgError:
        MU = None

    def guess(t):
        xd = expm(F * t) @ x0
        z = np.concatenate([xd, P1 @ xd])
        if MU is not None:
            xt = expm(FU * (t - T)) @ xf
            z = z + np.concatenate([xt, MU @ xt])
        return z

    return guess


def _solve_single_shooting(hsys, x0, xf, T, tol, p0, tol_int, max_iter):
    """Damped Newton on p0 -> x(T; x0, p0) - xf with FD sensitivities."""
    n = hsys.n

    def resid(p):
        zT = _seg_flow(hsys, np.concatenate([x0, p]), 0.0, T, tol_int)
        if zT is None:
            return None
        return zT[:n] - xf

    r = resid(p0)
    if r is None:
        raise ShootingDiverged("initial costate guess escapes before T",
                               best_residual=np.inf, best_iterate=p0)
    best = (np.linalg.norm(r), p0.copy())
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol:
            return p0, float(np.linalg.norm(r))
        J = np.zeros((n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1e-7 * (1.0 + abs(p0[k]))
            r2 = resid(p0 + e)
            if r2 is None:
                r2 = resid(p0 - e)
                if r2 is None:
                    raise ShootingDiverged("sensitivity probe escaped",
                                           best_residual=best[0],
                                           best_iterate=best[1])
                J[:, k] = (r - r2) / e[k]
            else:
                J[:, k] = (r2 - r) / e[k]
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        while lam > 1e-10:
            r2 = resid(p0 + lam * step)
            if r2 is not None and np.linalg.norm(r2) < np.linalg.norm(r):
                break
            lam *= 0.5
        else:
            raise ShootingDiverged("line search stalled",
                                   best_residual=best[0], best_iterate=best[1])
        p0 = p0 + lam * step
        r = r2
        if np.linalg.norm(r) < best[0]:
            best = (np.linalg.norm(r), p0.copy())
    if np.linalg.norm(r) <= tol:
        return p0, float(np.linalg.norm(r))
    raise ShootingDiverged(f"no convergence in {max_iter} iterations",
                           best_residual=best[0], best_iterate=best[1])


def _solve_multiple_shooting(hsys, x0, xf, T, tol, nodes, guess, tol_int,
                             max_iter):
    """Gauss-Newton on [p0, z_1..z_{K-1}, pT] with block-sparse FD Jacobian.

    Forward segments start at each node; the final segment is integrated
    backward from (xf, pT) so the terminal condition is built in.
    """
    n = hsys.n
    d = 2 * n
    K = len(nodes) - 1
    t = nodes

    def unpack(y):
        p0 = y[:n]
        zs = [np.concatenate([x0, p0])]
        for j in range(1, K):
            zs.append(y[n + (j - 1) * d: n + j * d])
        pT = y[n + (K - 1) * d:]
        return zs, pT

    def seg_out(zs, pT):
        """Per-segment flow endpoints (soft-capped on escape)."""
        ends = [_seg_flow_soft(hsys, zs[j], t[j], t[j + 1], tol_int)
                for j in range(K - 1)]
        back = _seg_flow_soft(hsys, np.concatenate([xf, pT]), t[K], t[K - 1],
                              tol_int)
        return ends, back

    def residual_from(ends, back, zs):
        r = [ends[j] - zs[j + 1] for j in range(K - 1)]
        r.append(back - zs[K - 1])
        return np.concatenate(r)

    def residual(y):
        zs, pT = unpack(y)
        ends, back = seg_out(zs, pT)
        return residual_from(ends, back, zs), ends, back

    y = np.concatenate([guess(0.0)[n:]]
                       + [guess(t[j]) for j in range(1, K)]
                       + [guess(T)[n:]])
    r, ends, back = residual(y)
    best = (np.linalg.norm(r), y.copy())

    for _ in range(max_iter):
        if np.abs(r).max() <= tol:
            break
        zs, pT = unpack(y)
        m = len(y)
        J = np.zeros((len(r), m))
        # matching j: depends on z_j (via segment j) and identity in z_{j+1}
        for j in range(K - 1):
            rows = slice(j * d, (j + 1) * d)
            if j + 1 < K:
                cols = slice(n + j * d, n + (j + 1) * d)
                J[rows, cols] = -np.eye(d)
        J[(K - 1) * d:, n + (K - 2) * d: n + (K - 1) * d] = -np.eye(d) \
            if K > 1 else 0.0
        # flow sensitivities by FD, one segment integration per column
        for j in range(K - 1):
            rows = slice(j * d, (j + 1) * d)
            base = ends[j]
            width = n if j == 0 else d
            for k in range(width):
                zpert = zs[j].copy()
                idx = n + k if j == 0 else k
                h = 1e-7 * (1.0 + abs(zpert[idx]))
                zpert[idx] += h
                e2 = _seg_flow_soft(hsys, zpert, t[j], t[j + 1], tol_int)
                ycol = k if j == 0 else n + (j - 1) * d + k
                J[rows, ycol] += (e2 - base) / h
        rows = slice((K - 1) * d, K * d)
        for k in range(n):
            pTp = pT.copy()
            h = 1e-7 * (1.0 + abs(pTp[k]))
            pTp[k] += h
            e2 = _seg_flow_soft(hsys, np.concatenate([xf, pTp]), t[K],
                                t[K - 1], tol_int)
            J[rows, n + (K - 1) * d + k] = (e2 - back) / h

        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        lam = 1.0
        improved = False
        while lam > 1e-10:
            r2, ends2, back2 = residual(y + lam * step)
            if np.linalg.norm(r2) < np.linalg.norm(r):
                improved = True
                break
            lam *= 0.5
        if not improved:
            break
        y = y + lam * step
        r, ends, back = r2, ends2, back2
        if np.linalg.norm(r) < best[0]:
            best = (np.linalg.norm(r), y.copy())

    if np.abs(r).max() > tol:
        raise ShootingDiverged(
            f"multiple shooting stalled at residual {np.abs(r).max():.3e}",
            best_residual=best[0], best_iterate=best[1])
    zs, pT = unpack(y)
    return zs, pT, float(np.abs(r).max())


def _stitch_trajectory(hsys, zs, nodes, tol_int, samples=601):
    """Re-integrate each segment densely from its node and assemble outputs."""
    n = hsys.n
    sols = []
    cost = 0.0
    costs0 = [0.0]
    for j in range(len(nodes) - 1):
        z_aug = np.concatenate([zs[j], [0.0]])

        def rhs(t, za):
            dz = hsys.rhs(za[:-1])
            x, p = za[:n], za[n:2 * n]
            u = optimal_feedback(hsys, x, p)
            dc = 0.5 * float(u @ u) + hsys.base.h(x)
            return np.concatenate([dz, [dc]])

        sol = _integrate(rhs, z_aug, (nodes[j], nodes[j + 1]), tol_int,
                         max_norm=_ESCAPE_CAP)
        sols.append(sol)
        cost += float(sol.y[-1, -1])
        costs0.append(cost)

    dense = _PiecewiseDense(sols)
    ts = np.linspace(nodes[0], nodes[-1], samples)
    Z = np.empty((samples, 2 * n))
    C = np.empty(samples)
    for i, tv in enumerate(ts):
        j = min(np.searchsorted(nodes, tv, side="right") - 1, len(sols) - 1)
        za = sols[j].sol(np.clip(tv, sols[j].t[0], sols[j].t[-1]))
        Z[i] = za[:-1]
        C[i] = costs0[j] + za[-1]
    U = np.array([optimal_feedback(hsys, z[:n], z[n:]) for z in Z])
    H = np.array([hsys.hval_z(z) for z in Z])

    def dense_z(tq):
        out = dense(tq)
        return out[:-1] if out.ndim == 1 else out[:-1, :]

    return Trajectory(t=ts, z=Z, u=U, cost=C, H=H, dense=dense_z,
                      stats={"nfev": int(sum(s.nfev for s in sols))})


def solve_finite_bvp(hsys: HamiltonianSystem, x0, xf, T: float,
                     tol: float = 1e-8, p0_guess=None,
                     segments: Optional[int] = None,
                     tol_int: float = 1e-11, max_iter: int = 30,
                     warm: Optional[Callable[[float], Array]] = None) -> Trajectory:
    """Solve x(0) = x0, x(T) = xf on the Hamiltonian system.

    Single shooting on p(0) when mu*T is modest, multiple shooting on an
    end-clustered grid otherwise (``segments`` forces a count).  ``warm``
    optionally supplies an initial trajectory guess t -> (x, p).

    The returned trajectory carries states, costates, u = -g^T p, H and the
    running cost; ``stats['terminal_mismatch']`` records |x(T) - xf|.
    """
    x0 = np.asarray(x0, dtype=float).reshape(hsys.n)
    xf = np.asarray(xf, dtype=float).reshape(hsys.n)
    if T <= 0:
        raise ValueError("horizon must be positive")
    mu = _unstable_rate(hsys)
    single = segments == 1 or (segments is None and mu * T <= _SEG_CAP_EXPONENT)

    guess = warm if warm is not None else _tangent_guess(hsys, x0, xf, T)
    if p0_guess is not None:
        p0_init = np.asarray(p0_guess, dtype=float).reshape(hsys.n)
    else:
        p0_init = guess(0.0)[hsys.n:]

    zs = None
    if single:
        try:
            p0, resid = _solve_single_shooting(hsys, x0, xf, T, tol, p0_init,
                                               tol_int, max_iter)
            zs = [np.concatenate([x0, p0])]
            nodes = np.array([0.0, T])
        except ShootingDiverged:
            if segments == 1:
                raise
    if zs is None:
        if warm is None and T > 12.0 / mu:
            # anchor on a short-horizon solve, then splice it around a
            # widened turnpike middle
            anchor = solve_finite_bvp(hsys, x0, xf, 12.0 / mu, tol=tol,
                                      p0_guess=p0_guess, tol_int=tol_int,
                                      max_iter=max_iter)
            guess = _splice_guess(anchor, T)
        if segments is None or segments == 1:
            nodes = _segment_nodes(T, mu)
        else:
            nodes = np.linspace(0.0, T, segments + 1)
        zs, pT, resid = _solve_multiple_shooting(hsys, x0, xf, T, tol, nodes,
                                                 guess, tol_int, max_iter)

    traj = _stitch_trajectory(hsys, zs, nodes, tol_int)
    traj.stats["shooting_residual"] = resid
    traj.stats["terminal_mismatch"] = float(
        np.linalg.norm(traj.z[-1, : hsys.n] - xf))
    traj.stats["segments"] = len(nodes) - 1
    return traj


# ---------------------------------------------------------------------------
# turnpike metric
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResidenceMetric:
    measure: float
    first_exit: Optional[float]
    last_entry: Optional[float]


def turnpike_metric(traj: Trajectory, epsilon: float,
                    hsys: Optional[HamiltonianSystem] = None,
                    samples: int = 4001) -> ResidenceMetric:
    """Lebesgue measure of {t : |u(t)| + |x(t)| > epsilon}.

    Crossings of the threshold are refined by bisection on the dense output;
    ``first_exit`` is the first crossing out of the super-level set and
    ``last_entry`` the last crossing into it.
    """
    if traj.dense is None:
        raise ValueError("turnpike metric needs a dense trajectory")
    n = hsys.n if hsys is not None else traj.z.shape[1]

    def signal(tv):
        z = traj.dense(np.asarray(tv, dtype=float))
        z = np.asarray(z, dtype=float).reshape(-1)
        x = z[:n]
        if hsys is not None:
            u = optimal_feedback(hsys, x, z[n:2 * n])
        else:
            u = 0.0
        return float(np.linalg.norm(x) + np.linalg.norm(u)) - epsilon

    t0, tf = traj.t0, traj.tf
    ts = np.linspace(t0, tf, samples)
    vals = np.array([signal(tv) for tv in ts])

    crossings = []
    for i in range(len(ts) - 1):
        if vals[i] * vals[i + 1] < 0:
            crossings.append(float(brentq(signal, ts[i], ts[i + 1],
                                          xtol=1e-12, rtol=1e-14)))
    crossings = sorted(crossings)
    edges = [t0] + crossings + [tf]

    measure = 0.0
    first_exit = None   # first crossing out of the super-level set
    last_entry = None   # last crossing into it
    for a, b in zip(edges[:-1], edges[1:]):
        if b <= a:
            continue
        if signal(0.5 * (a + b)) > 0:
            measure += b - a
            if a in crossings:
                last_entry = a
        else:
            if first_exit is None and a in crossings:
                first_exit = a
    return ResidenceMetric(measure=float(measure), first_exit=first_exit,
                           last_entry=last_entry)


# ---------------------------------------------------------------------------
# multi-horizon report
# ---------------------------------------------------------------------------

@dataclass
class TurnpikeEntry:
    T: float
    converged: bool
    residence: float
    first_exit: Optional[float]
    last_entry: Optional[float]
    cost: float
    residual: float
    error: Optional[str] = None


@dataclass
class TurnpikeReport:
    epsilon: float
    x0: Array
    xf: Array
    entries: list
    uniformity: Optional[float]
    condition: dict = field(default_factory=dict)

    def converged_entries(self):
        return [e for e in self.entries if e.converged]


def turnpike_report(hsys: HamiltonianSystem, x0, xf,
                    horizons: Sequence[float], epsilon: float = 0.1,
                    warm_start: bool = True, tol: float = 1e-6,
                    stable_chart=None, unstable_chart=None,
                    coverage_tol: float = 1e-6,
                    keep_trajectories: bool = False) -> TurnpikeReport:
    """Solve the BVP across horizons and report residence measures.

    Horizons are processed in increasing order; with ``warm_start`` each
    solution seeds the next by splicing its decay and approach phases around
    a widened middle.  The sufficient condition for the turnpike (x0 inside
    the projected stable manifold, xf inside the unstable one) is evaluated
    when charts are supplied.
    """
    x0 = np.asarray(x0, dtype=float).reshape(hsys.n)
    xf = np.asarray(xf, dtype=float).reshape(hsys.n)
    horizons = sorted(float(T) for T in horizons)
    if not horizons:
        raise ValueError("need at least one horizon")

    entries = []
    trajectories = {}
    prev: Optional[Trajectory] = None
    for T in horizons:
        warm = None
        if warm_start and prev is not None:
            warm = _splice_guess(prev, T)
        try:
            traj = solve_finite_bvp(hsys, x0, xf, T, tol=tol, warm=warm)
            metric = turnpike_metric(traj, epsilon, hsys=hsys)
            entries.append(TurnpikeEntry(
                T=T, converged=True, residence=metric.measure,
                first_exit=metric.first_exit, last_entry=metric.last_entry,
                cost=traj.final_cost,
                residual=traj.stats["shooting_residual"]))
            trajectories[T] = traj
            prev = traj
        except (ShootingDiverged, IntegrationError) as exc:
            entries.append(TurnpikeEntry(
                T=T, converged=False, residence=np.nan, first_exit=None,
                last_entry=None, cost=np.nan,
                residual=getattr(exc, "best_residual", np.nan) or np.nan,
                error=str(exc)))

    conv = [e for e in entries if e.converged]
    uniformity = None
    if len(conv) >= 2:
        measures = [e.residence for e in conv]
        lo = min(measures)
        uniformity = float(max(measures) / lo) if lo > 0 else np.inf

    condition = {}
    if stable_chart is not None and unstable_chart is not None:
        from .manifold import coverage
        cs = coverage(stable_chart, hsys, [x0], newton_tol=coverage_tol,
                      attempt_all=True)
        cu = coverage(unstable_chart, hsys, [xf], newton_tol=coverage_tol,
                      attempt_all=True)
        s_ok = cs.entries[0].status == "covered"
        u_ok = cu.entries[0].status == "covered"
        condition = {
            "x0_in_stable_projection": s_ok,
            "xf_in_unstable_projection": u_ok,
            "satisfied": bool(s_ok and u_ok),
        }

    report = TurnpikeReport(epsilon=float(epsilon), x0=x0, xf=xf,
                            entries=entries, uniformity=uniformity,
                            condition=condition)
    if keep_trajectories:
        report.trajectories = trajectories
    return report


def _splice_guess(prev: Trajectory, T: float):
    """Initial guess for a longer horizon from a shorter converged solution:
    keep its first and last halves, fill the widened middle with zeros."""
    Tp = prev.tf - prev.t0
    half = 0.5 * Tp
    width = prev.z.shape[1]

    def guess(t):
        if t <= half:
            return np.asarray(prev.dense(prev.t0 + t), dtype=float).reshape(width)
        if t >= T - half:
            return np.asarray(prev.dense(prev.t0 + Tp - (T - t)),
                              dtype=float).reshape(width)
        return np.zeros(width)

    return guess


# ---------------------------------------------------------------------------
# infinite-horizon cost
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InfiniteCostEstimate:
    value: float
    tail_bound: float
    switch_time: float
    switch_state: Array


def infinite_cost(sys: ControlAffineSystem, feedback, x0,
                  tail_tol: float = 1e-9, t_max: float = 200.0,
                  tol: float = 1e-10, P1: Optional[Array] = None) -> InfiniteCostEstimate:
    """Estimate J = int_0^inf |u|^2/2 + h(x) dt under a stabilizing feedback.

    Integrates until |x| enters a switch radius derived from ``tail_tol``,
    then closes with the local quadratic model x^T P1 x / 2; the reported
    tail bound is kappa |x|^2 with kappa = ||P1||.
    """
    x0 = np.asarray(x0, dtype=float).reshape(sys.n)
    if P1 is None:
        lin = linearize(sys)
        P1 = solve_care(lin.A, lin.B, lin.C)
    kappa = float(np.linalg.norm(P1, 2))
    r_switch = float(np.sqrt(tail_tol / max(kappa, 1.0)))
    if np.linalg.norm(x0) <= r_switch:
        return InfiniteCostEstimate(
            value=0.5 * float(x0 @ P1 @ x0), tail_bound=kappa * float(x0 @ x0),
            switch_time=0.0, switch_state=x0)

    k = feedback.k if hasattr(feedback, "k") else feedback

    def rhs(t, y):
        x = y[:-1]
        u = np.asarray(k(x), dtype=float).reshape(sys.m)
        dx = sys.f(x) + np.asarray(sys.g(x)).reshape(sys.n, sys.m) @ u
        return np.concatenate([dx, [0.5 * float(u @ u) + sys.h(x)]])

    def inside(t, y):
        return float(np.linalg.norm(y[:-1]) - r_switch)

    inside.terminal = True
    from scipy.integrate import solve_ivp
    sol = solve_ivp(rhs, (0.0, t_max), np.concatenate([x0, [0.0]]),
                    method="RK45", rtol=tol, atol=tol, events=inside,
                    dense_output=False)
    if not sol.success:
        raise NoConvergence(sol.message)
    if sol.status != 1:
        raise NoConvergence(
            f"|x| did not reach the switch radius {r_switch:.2e} by t = {t_max}")
    x_sw = sol.y[:-1, -1]
    value = float(sol.y[-1, -1]) + 0.5 * float(x_sw @ P1 @ x_sw)
    return InfiniteCostEstimate(value=value,
                                tail_bound=kappa * float(x_sw @ x_sw),
                                switch_time=float(sol.t[-1]),
                                switch_state=x_sw)
