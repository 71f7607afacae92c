"""Stable and unstable manifold charts of the Hamiltonian flow.

In the transformed coordinates (xi, eta) the dynamics split as

    xi'  = F xi  + nu1(xi, eta)
    eta' = -F^T eta + nu2(xi, eta)

with F Hurwitz and nu quadratic at the origin.  The local stable manifold is
the graph eta = theta(xi) of the Lyapunov-Perron fixed point

    xi(t)  = e^{Ft} xi0 + int_0^t e^{F(t-s)} nu1(xi(s), eta(s)) ds
    eta(t) = -int_t^T e^{-F^T(t-s)} nu2(xi(s), eta(s)) ds,

iterated from (e^{Ft} xi0, 0) on a fixed composite Gauss-Legendre grid.  The
unstable manifold runs the identical iteration on the time-reversed field
with the roles of xi and eta exchanged.  Charts are globalized by flowing
local points backward (stable) or forward (unstable), and every stored point
must pass an energy check |H| <= energy_tol and a flow-convergence check.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.spatial import cKDTree
from scipy.stats import qmc

from .errors import IntegrationError, NoConvergence, Uncovered
from .hamiltonian import (
    HamiltonianSystem,
    Trajectory,
    _integrate,
    from_xi_eta,
    optimal_feedback,
    to_xi_eta,
)

Array = np.ndarray


# ---------------------------------------------------------------------------
# transformed vector field
# ---------------------------------------------------------------------------

def _base_is_xi(hsys: HamiltonianSystem, kind: str) -> bool:
    """Which transformed coordinate carries the graph base for this chart.

    The Lyapunov-Perron construction always builds the stable manifold of the
    chart's convergence flow: the given field for stable charts, its reversal
    for unstable ones.  When that effective field is the canonical forward
    Hamiltonian field the contracting block is xi (matrix F); when it is the
    reversed field the contracting block is eta (matrix F^T).
    """
    from .hamiltonian import ReversedHamiltonianSystem
    reversed_field = isinstance(hsys, ReversedHamiltonianSystem)
    return reversed_field == (kind == "unstable")


class _TransformedField:
    """Effective chart field in (xi, eta) coordinates: linear block pair
    (S contracting, U expanding) plus the quadratic remainder in the chart's
    (base, fiber) ordering."""

    def __init__(self, hsys: HamiltonianSystem, kind: str):
        if kind not in ("stable", "unstable"):
            raise ValueError("kind must be 'stable' or 'unstable'")
        self.hsys = hsys
        self.kind = kind
        self.negate = kind == "unstable"
        sym = hsys.sym
        self.sym = sym
        self.n = hsys.n
        self.base_is_xi = _base_is_xi(hsys, kind)
        if self.base_is_xi:
            self.S, self.U = sym.F, -sym.F.T
            self.lin_sign = 1.0
        else:
            self.S, self.U = sym.F.T, -sym.F
            self.lin_sign = -1.0

    def _rhs_eff(self, w: Array) -> Array:
        r = self.hsys.rhs(w)
        return -r if self.negate else r

    def nu_split(self, s: Array, u: Array):
        """Quadratic remainder of the effective field, (base, fiber) ordered."""
        s = np.atleast_2d(s)
        u = np.atleast_2d(u)
        xi, eta = (s, u) if self.base_is_xi else (u, s)
        x, p = from_xi_eta(self.sym, xi, eta)
        W = np.hstack([np.atleast_2d(x), np.atleast_2d(p)])
        R = np.array([self._rhs_eff(w) for w in W])
        G = R - self.lin_sign * (W @ self.sym.Ham.T)
        nu = G @ self.sym.Linv.T
        nu_xi, nu_eta = nu[:, : self.n], nu[:, self.n:]
        return (nu_xi, nu_eta) if self.base_is_xi else (nu_eta, nu_xi)

    def to_state(self, s: Array, u: Array):
        """(base, fiber) -> (x, p)."""
        if self.base_is_xi:
            return from_xi_eta(self.sym, s, u)
        return from_xi_eta(self.sym, u, s)


# ---------------------------------------------------------------------------
# Lyapunov-Perron grid
# ---------------------------------------------------------------------------

def _gauss_legendre(a: float, b: float, q: int):
    x, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def _lagrange_eval_matrix(nodes: Array, at: Array) -> Array:
    """B[i, r] = ell_r(at[i]) for the Lagrange basis through ``nodes``."""
    q = len(nodes)
    B = np.ones((len(at), q))
    for r in range(q):
        for k in range(q):
            if k != r:
                B[:, r] *= (at - nodes[k]) / (nodes[r] - nodes[k])
    return B


class _LPGrid:
    """Precomputed propagators and quadrature weights for one (S, U, T, M, q).

    All weight matrices depend only on the panel layout, so one instance is
    shared across seeds and iterations.
    """

    def __init__(self, S: Array, U: Array, T: float, panels: int, q: int):
        n = S.shape[0]
        self.n, self.T, self.M, self.q = n, float(T), int(panels), int(q)
        self.delta = self.T / self.M
        d = self.delta
        tau, w = _gauss_legendre(0.0, d, q)
        self.tau, self.w = tau, w

        self.E_S = expm(S * d)
        self.E_U = expm(-U * d)
        self.P_s = np.stack([expm(S * tl) for tl in tau])
        self.P_u = np.stack([expm(-U * (d - tl)) for tl in tau])
        self.WE_s = np.stack([w[r] * expm(S * (d - tau[r])) for r in range(q)])
        self.WE_u = np.stack([w[r] * expm(-U * tau[r]) for r in range(q)])

        # partial-panel weights: forward integral over [0, tau_l], backward
        # over [tau_l, delta], with the integrand interpolated from the
        # panel's own Gauss nodes
        self.W_s = np.zeros((q, q, n, n))
        self.W_u = np.zeros((q, q, n, n))
        for l in range(q):
            sub, v = _gauss_legendre(0.0, tau[l], q)
            Bmat = _lagrange_eval_matrix(tau, sub)
            for i in range(q):
                K = v[i] * expm(S * (tau[l] - sub[i]))
                for r in range(q):
                    self.W_s[l, r] += Bmat[i, r] * K
            sub, v = _gauss_legendre(tau[l], d, q)
            Bmat = _lagrange_eval_matrix(tau, sub)
            for i in range(q):
                K = v[i] * expm(-U * (sub[i] - tau[l]))
                for r in range(q):
                    self.W_u[l, r] += Bmat[i, r] * K

        # e^{S t} at panel edges and nodes, chained from the panel propagator
        E_edges = [np.eye(n)]
        for _ in range(self.M):
            E_edges.append(self.E_S @ E_edges[-1])
        self.E_edges = np.stack(E_edges)
        self.E_nodes = np.einsum("lab,jbc->jlac", self.P_s, self.E_edges[:-1])

        self.node_times = (np.arange(self.M)[:, None] * d + tau[None, :])


def _lp_iterate(grid: _LPGrid, nu_fn, s0: Array, tol: float, max_iter: int):
    """Run the fixed-point iteration for one base seed.

    Returns (theta, S_nodes, U_nodes, residual_history, converged).
    """
    M, q, n = grid.M, grid.q, grid.n
    S_lin = np.einsum("jlab,b->jla", grid.E_nodes, s0)
    S_nodes = S_lin.copy()
    U_nodes = np.zeros_like(S_nodes)
    history = []
    converged = False
    theta = np.zeros(n)

    for _ in range(max_iter):
        ns, nu = nu_fn(S_nodes.reshape(-1, n), U_nodes.reshape(-1, n))
        ns = ns.reshape(M, q, n)
        nu = nu.reshape(M, q, n)

        # forward sweep for the base component
        I_edge = np.zeros(n)
        S_new = np.empty_like(S_nodes)
        panel_part = np.einsum("lrab,jrb->jla", grid.W_s, ns)
        panel_full = np.einsum("rab,jrb->ja", grid.WE_s, ns)
        for j in range(M):
            S_new[j] = S_lin[j] + np.einsum("lab,b->la", grid.P_s, I_edge) + panel_part[j]
            I_edge = grid.E_S @ I_edge + panel_full[j]

        # backward sweep for the fiber component
        Iu_edge = np.zeros(n)
        U_new = np.empty_like(U_nodes)
        panel_part_u = np.einsum("lrab,jrb->jla", grid.W_u, nu)
        panel_full_u = np.einsum("rab,jrb->ja", grid.WE_u, nu)
        for j in range(M - 1, -1, -1):
            U_new[j] = -(np.einsum("lab,b->la", grid.P_u, Iu_edge) + panel_part_u[j])
            Iu_edge = grid.E_U @ Iu_edge + panel_full_u[j]
        theta = -Iu_edge  # value of the fiber integral at t = 0

        diff = max(np.abs(S_new - S_nodes).max(), np.abs(U_new - U_nodes).max())
        history.append(float(diff))
        S_nodes, U_nodes = S_new, U_new
        if diff <= tol:
            converged = True
            break
        if len(history) >= 3 and history[-1] > history[-2] >= history[-3] \
                and history[-1] > 10 * tol:
            break
        if not np.isfinite(diff) or diff > 1e6:
            break

    return theta, S_nodes, U_nodes, history, converged


# ---------------------------------------------------------------------------
# chart data
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    xi: Array
    eta: Array
    residuals: list
    converged: bool


@dataclass
class ManifoldChart:
    """Sampled manifold graph plus globalized points in the original coordinates."""

    kind: str
    tol: float
    seeds: list
    xs: Array                 # (K, n) accepted point states
    ps: Array                 # (K, n) accepted point costates
    H: Array                  # (K,) Hamiltonian values (all within energy_tol)
    flow_check: Array         # (K,) |z(T_check)| under the convergence flow
    local_radius: float
    energy_tol: float
    check_tol: float
    t_check: float
    dtheta0_norm: float = np.nan
    rejected: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.xs.shape[1]

    def points(self) -> Array:
        return np.hstack([self.xs, self.ps])

    def nn_spacing(self) -> float:
        """Median spacing of the x-projection, measured to the 2n-th
        neighbor so chains of points along flow orbits do not hide the
        transverse gaps."""
        if len(self.xs) < 2:
            return np.inf
        k = int(min(2 * self.n + 1, len(self.xs)))
        tree = cKDTree(self.xs)
        d, _ = tree.query(self.xs, k=k)
        return float(np.median(d[:, -1]))


def _canonical_sort(xs, ps, H, fc):
    order = np.lexsort(tuple(ps[:, i] for i in range(ps.shape[1] - 1, -1, -1))
                       + tuple(xs[:, i] for i in range(xs.shape[1] - 1, -1, -1)))
    return xs[order], ps[order], H[order], fc[order]


def default_seeds(n: int, radius: float = 0.3, per_radius: int = None,
                  n_radii: int = 3, seed: int = 0) -> list:
    """Low-discrepancy directions on spheres of geometrically spaced radii."""
    per_radius = per_radius if per_radius is not None else max(4, 2 * n * n)
    radii = [radius * 0.5 ** k for k in range(n_radii)]
    out = []
    if n == 1:
        for r in radii:
            out.extend([np.array([r]), np.array([-r])])
        return out
    sob = qmc.Sobol(d=n, scramble=False, seed=seed)
    count = 1 << int(np.ceil(np.log2(4 * per_radius + 4)))
    raw = sob.random(count) - 0.5
    norms = np.linalg.norm(raw, axis=1)
    dirs = raw[norms > 1e-6][:per_radius]
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    for r in radii:
        for d in dirs:
            out.append(r * d)
    return out


# ---------------------------------------------------------------------------
# point checks
# ---------------------------------------------------------------------------

def _check_plan(hsys: HamiltonianSystem, kind: str, check_tol: float,
                z0max: float, t_check, tol_int: float):
    """Window and mode for the per-point convergence certificate.

    Plain mode asserts |z(T)| <= check_tol under the convergence flow.  That
    needs T long enough for the slowest mode to decay, yet integration error
    feeds the expanding fiber and grows like e^{mu_fast T}, so for systems
    with a wide rate spread no window satisfies both in double precision.
    There the certificate switches to the fiber deviation |fiber(z(T))| at
    the error-safe window, which bounds the point's distance from the
    manifold graph instead of its remaining transit time.
    """
    if t_check is not None:
        return "state", float(t_check)
    rates = -np.linalg.eigvals(hsys.sym.F).real
    mu_slow, mu_fast = float(rates.min()), float(rates.max())
    T_dec = np.log(50.0 * (1.0 + z0max) / check_tol) / mu_slow
    T_safe = max(np.log(check_tol / (50.0 * tol_int)) / mu_fast,
                 2.0 / mu_fast)
    if T_dec <= T_safe:
        return "state", float(T_dec)
    return "fiber", float(T_safe)


def _flow_check_value(hsys: HamiltonianSystem, z: Array, t_check: float,
                      tol: float, forward: bool) -> float:
    """|z(T_check)| under the convergence flow; inf when integration fails."""
    span = (0.0, t_check) if forward else (0.0, -t_check)
    try:
        sol = _integrate(lambda t, w: hsys.rhs(w), z, span, tol, max_norm=1e6)
    except IntegrationError:
        return np.inf
    return float(np.linalg.norm(sol.y[:, -1]))


def _batch_flow_check(hsys: HamiltonianSystem, Z0: Array, window: float,
                      mode: str, kind: str, tol: float) -> Array:
    """Certificate values for a stack of decoupled starts, integrated jointly.

    The candidates are near-manifold points whose convergence flow decays, so
    one stacked adaptive solve replaces thousands of small ones.  Blocks that
    blow up are marked infinite and the remainder re-run.
    """
    from scipy.integrate import solve_ivp

    K, d = Z0.shape
    n = d // 2
    sym = hsys.sym
    base_xi = _base_is_xi(hsys, kind)
    out = np.full(K, np.inf)
    active = np.arange(K)
    forward = kind == "stable"
    span = (0.0, window) if forward else (0.0, -window)

    def values(Yend):
        if mode == "state":
            return np.linalg.norm(Yend, axis=1)
        xi, eta = to_xi_eta(sym, Yend[:, :n], Yend[:, n:])
        fib = eta if base_xi else xi
        return np.linalg.norm(np.atleast_2d(fib), axis=1)

    for _ in range(K + 1):
        if len(active) == 0:
            return out
        cap = 50.0 * (1.0 + float(np.abs(Z0[active]).max()))
        y0 = Z0[active].reshape(-1)

        def rhs(t, y):
            Y = y.reshape(-1, d)
            return np.concatenate([hsys.rhs(z) for z in Y])

        def escape(t, y):
            return cap - np.abs(y).max()

        escape.terminal = True
        sol = solve_ivp(rhs, span, y0, method="RK45", rtol=tol, atol=tol,
                        events=escape)
        if sol.status == 0 and sol.success:
            out[active] = values(sol.y[:, -1].reshape(-1, d))
            return out
        if not sol.success:
            out[active] = np.inf
            return out
        # drop every block that has grown rather than decayed, then retry
        Yend = sol.y[:, -1].reshape(-1, d)
        norms = np.abs(Yend).max(axis=1)
        start = np.abs(Z0[active]).max(axis=1)
        bad = norms >= np.maximum(2.0 * start, 1.0)
        if not bad.any():
            bad = norms == norms.max()
        out[active[bad]] = np.inf
        active = active[~bad]
    return out


def _accept_points(hsys, candidates, kind, energy_tol, check_tol, t_check,
                   check_tol_int: float = 1e-8):
    """Filter candidate (x, p) rows through the chart invariants.

    Returns (xs, ps, H, fc, rejected, window, mode).
    """
    n = hsys.n
    if not len(candidates):
        return (np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0),
                0, 0.0, "state")
    Z = np.atleast_2d(np.asarray(candidates, dtype=float))
    mode, window = _check_plan(hsys, kind, check_tol,
                               float(np.abs(Z).max()), t_check, check_tol_int)
    Hv = np.array([hsys.hval(z[:n], z[n:]) for z in Z])
    mask = np.abs(Hv) <= energy_tol
    rejected = int((~mask).sum())
    Z, Hv = Z[mask], Hv[mask]
    if len(Z) == 0:
        return (np.zeros((0, n)), np.zeros((0, n)), np.zeros(0), np.zeros(0),
                rejected, window, mode)
    fc = _batch_flow_check(hsys, Z, window, mode, kind, check_tol_int)
    ok = fc <= check_tol
    rejected += int((~ok).sum())
    Z, Hv, fc = Z[ok], Hv[ok], fc[ok]
    return Z[:, :n], Z[:, n:], Hv, fc, rejected, window, mode


# ---------------------------------------------------------------------------
# chart construction
# ---------------------------------------------------------------------------

def _auto_horizon(F: Array, tol: float) -> float:
    mu = float(-np.max(np.linalg.eigvals(F).real))
    span = np.log(10.0 / tol) / mu
    return float(np.clip(span, 5.0 / mu, 80.0 / mu))


def local_stable_manifold(hsys: HamiltonianSystem,
                          seeds: Optional[Sequence[Array]] = None,
                          horizon: Optional[float] = None,
                          tol: float = 1e-9,
                          max_iter: int = 60,
                          nodes: int = 200,
                          kind: str = "stable",
                          energy_tol: float = 1e-6,
                          check_tol: float = 1e-3,
                          t_check: Optional[float] = None,
                          flow_tol: float = 1e-10,
                          seed_radius: float = 0.3,
                          harvest: bool = True,
                          workers: int = 1) -> ManifoldChart:
    """Compute the local invariant-manifold graph by Lyapunov-Perron iteration.

    Every converged seed contributes its manifold point (and, when
    ``harvest`` is set, points sampled along the converged orbit).  Points
    failing the energy or flow-convergence invariants are dropped and
    counted in ``chart.rejected``.  ``t_check`` defaults to ten slow-mode
    time constants; longer windows expose the checks to double-precision
    blow-up of off-manifold error, shorter ones may not let far points decay.
    """
    fieldT = _TransformedField(hsys, kind)
    n = hsys.n
    if seeds is None:
        seeds = default_seeds(n, radius=seed_radius)
    seeds = [np.asarray(s, dtype=float).reshape(n) for s in seeds]

    T = _auto_horizon(fieldT.S, tol) if horizon is None else float(horizon)
    q = 5
    panels = max(4, int(np.ceil(nodes / q)))
    grid = _LPGrid(fieldT.S, fieldT.U, T, panels, q)

    if workers > 1 and len(seeds) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            lp_out = list(pool.map(
                lambda s0: _lp_iterate(grid, fieldT.nu_split, s0, tol, max_iter),
                seeds))
    else:
        lp_out = [_lp_iterate(grid, fieldT.nu_split, s0, tol, max_iter)
                  for s0 in seeds]

    seed_results = []
    candidates = []
    local_radius = 0.0
    for s0, (theta, S_nodes, U_nodes, hist, ok) in zip(seeds, lp_out):
        seed_results.append(SeedResult(xi=s0, eta=theta, residuals=hist,
                                       converged=ok))
        if not ok:
            continue
        local_radius = max(local_radius, float(np.linalg.norm(s0)))
        x0, p0 = fieldT.to_state(s0, theta)
        candidates.append(np.concatenate([np.ravel(x0), np.ravel(p0)]))
        if harvest:
            r0 = np.linalg.norm(s0)
            flat_s = S_nodes.reshape(-1, n)
            flat_u = U_nodes.reshape(-1, n)
            keep = np.linalg.norm(flat_s, axis=1) >= 0.25 * r0
            idx = np.nonzero(keep)[0][::q][:6]  # at most one node per panel
            for i in idx:
                xh, ph = fieldT.to_state(flat_s[i], flat_u[i])
                candidates.append(np.concatenate([np.ravel(xh), np.ravel(ph)]))

    if seeds and not any(s.converged for s in seed_results):
        raise NoConvergence(
            "no seed converged: all lie outside the contraction region")

    xs, ps, Hs, fcs, rejected, window, mode = _accept_points(
        hsys, candidates, kind, energy_tol, check_tol, t_check)
    xs, ps, Hs, fcs = _canonical_sort(xs, ps, Hs, fcs)

    chart = ManifoldChart(kind=kind, tol=tol, seeds=seed_results,
                          xs=xs, ps=ps, H=Hs, flow_check=fcs,
                          local_radius=local_radius,
                          energy_tol=energy_tol, check_tol=check_tol,
                          t_check=window, rejected=rejected,
                          meta={"horizon": T, "nodes": panels * q,
                                "check_mode": mode,
                                "t_check_config": t_check})
    chart.dtheta0_norm = _dtheta0_estimate(grid, fieldT, tol, max_iter)
    return chart


def _dtheta0_estimate(grid: _LPGrid, fieldT: _TransformedField, tol: float,
                      max_iter: int) -> float:
    """Finite-difference norm of D(theta)(0) from probe seeds at radius
    sqrt(tol), iterated to a tighter internal tolerance so the quotient
    stays at the chart tolerance scale."""
    n = grid.n
    delta = np.sqrt(tol)
    probe_tol = max(tol * delta, 1e-13)
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = delta
        tp, *_rest, okp = _lp_iterate(grid, fieldT.nu_split, e, probe_tol, max_iter)
        tm, *_rest, okm = _lp_iterate(grid, fieldT.nu_split, -e, probe_tol, max_iter)
        if not (okp and okm):
            return np.nan
        cols.append((tp - tm) / (2.0 * delta))
    return float(np.linalg.norm(np.stack(cols, axis=1)))


def unstable_manifold(hsys: HamiltonianSystem, **kwargs) -> ManifoldChart:
    """Unstable chart: the stable construction applied to the reversed flow."""
    kwargs.setdefault("kind", "unstable")
    return local_stable_manifold(hsys, **kwargs)


# ---------------------------------------------------------------------------
# globalization
# ---------------------------------------------------------------------------

def globalize(chart: ManifoldChart, hsys: HamiltonianSystem,
              extend_time: float, bounds=None,
              samples_per_orbit: int = 24,
              max_orbits: int = 64,
              flow_tol: float = 1e-10) -> ManifoldChart:
    """Extend the chart by flowing local points outward.

    Stable charts flow backward in time, unstable ones forward.  ``bounds``
    is a dict with optional ``x_min``/``x_max`` arrays and ``z_max`` norm cap;
    integration stops at the boundary and per-point failures are recorded,
    not raised.
    """
    bounds = bounds or {}
    n = hsys.n
    x_min = np.asarray(bounds.get("x_min", -np.inf * np.ones(n)), dtype=float)
    x_max = np.asarray(bounds.get("x_max", np.inf * np.ones(n)), dtype=float)
    z_max = float(bounds.get("z_max", 1e3))
    backward = chart.kind == "stable"

    def boundary(t, z):
        margin = z_max - np.abs(z).max()
        margin = min(margin, np.min(x_max - z[:n]), np.min(z[:n] - x_min))
        return margin

    boundary.terminal = True

    # orbit starts: the outer half of the local points, thinned evenly
    norms = np.linalg.norm(np.hstack([chart.xs, chart.ps]), axis=1)
    if len(norms) == 0:
        return chart
    cut = np.quantile(norms, 0.5)
    starts = np.hstack([chart.xs, chart.ps])[norms >= cut]
    if len(starts) > max_orbits:
        stride = int(np.ceil(len(starts) / max_orbits))
        starts = starts[::stride]

    candidates = []
    span = -float(extend_time) if backward else float(extend_time)
    from scipy.integrate import solve_ivp
    for z0 in starts:
        sol = solve_ivp(lambda t, z: hsys.rhs(z), (0.0, span), z0,
                        method="RK45", rtol=flow_tol, atol=flow_tol,
                        dense_output=True, events=boundary)
        t_end = sol.t[-1]
        if abs(t_end) < 1e-12:
            continue
        ts = np.linspace(0.0, t_end, samples_per_orbit + 1)[1:]
        for t in ts:
            candidates.append(sol.sol(t))

    xs, ps, Hs, fcs, rejected, window, mode = _accept_points(
        hsys, candidates, chart.kind, chart.energy_tol, chart.check_tol,
        chart.meta.get("t_check_config"))

    xs = np.vstack([chart.xs, xs])
    ps = np.vstack([chart.ps, ps])
    Hs = np.concatenate([chart.H, Hs])
    fcs = np.concatenate([chart.flow_check, fcs])
    xs, ps, Hs, fcs = _canonical_sort(xs, ps, Hs, fcs)

    return ManifoldChart(kind=chart.kind, tol=chart.tol, seeds=chart.seeds,
                         xs=xs, ps=ps, H=Hs, flow_check=fcs,
                         local_radius=chart.local_radius,
                         energy_tol=chart.energy_tol,
                         check_tol=chart.check_tol,
                         t_check=max(chart.t_check, window),
                         dtheta0_norm=chart.dtheta0_norm,
                         rejected=chart.rejected + rejected,
                         meta={**chart.meta, "check_mode": mode,
                               "extend_time": float(extend_time)})


# ---------------------------------------------------------------------------
# coverage of the base space
# ---------------------------------------------------------------------------

@dataclass
class CoverageEntry:
    x0: Array
    status: str               # "covered" | "uncovered" | "boundary"
    witness_x: Optional[Array]
    witness_p: Optional[Array]
    distance: float           # distance from x0 to the chart's x-projection


@dataclass
class CoverageEstimate:
    entries: list
    snap_radius: float
    meta: dict = field(default_factory=dict)

    def status_of(self, x0) -> str:
        x0 = np.asarray(x0, dtype=float)
        for e in self.entries:
            if np.allclose(e.x0, x0):
                return e.status
        raise KeyError("query point not in estimate")


def _fiber_newton(hsys: HamiltonianSystem, kind: str, x0: Array, p_init: Array,
                  newton_tol: float, flow_tol: float = 1e-10,
                  max_stage_time: Optional[float] = None):
    """Solve for the costate putting (x0, p) on the manifold.

    Shoots the convergence flow and drives the chart's fiber coordinate at
    the horizon to zero.  The horizon is extended in stages: a Newton zero at
    horizon T sits within O(e^{-3 mu T}) of the true fiber, so a few stages
    suffice and the target never becomes astronomically scaled.
    """
    sym = hsys.sym
    n = hsys.n
    forward = kind == "stable"
    base_xi = _base_is_xi(hsys, kind)
    rates = -np.linalg.eigvals(sym.F).real
    mu_fast, mu_slow = float(rates.max()), float(rates.min())
    if max_stage_time is None:
        max_stage_time = 14.0 / mu_fast   # past this, noise drowns the fiber
    stage = 6.0 / mu_fast                 # escape-safe horizon bite
    T_req = min(max_stage_time,
                max(stage, np.log(10.0 / newton_tol) / (3.0 * mu_slow)))
    p = np.asarray(p_init, dtype=float).copy()

    def residual_batch(ps, T):
        """Fiber coordinates at the horizon for a stack of costate guesses;
        rows of None-equivalent (inf) when a block escapes."""
        from scipy.integrate import solve_ivp

        P = np.atleast_2d(ps)
        Z0 = np.hstack([np.broadcast_to(x0, (len(P), n)), P])
        span = (0.0, T) if forward else (0.0, -T)
        d = 2 * n

        def rhs(t, y):
            return np.concatenate([hsys.rhs(z) for z in y.reshape(-1, d)])

        def escape(t, y):
            return 1e4 - np.abs(y).max()

        escape.terminal = True
        sol = solve_ivp(rhs, span, Z0.reshape(-1), method="RK45",
                        rtol=flow_tol, atol=flow_tol, events=escape)
        if not sol.success or sol.status == 1:
            return None
        ZT = sol.y[:, -1].reshape(-1, d)
        xi, eta = to_xi_eta(sym, ZT[:, :n], ZT[:, n:])
        out = eta if base_xi else xi
        return np.atleast_2d(out)

    def residual(pv, T):
        out = residual_batch(pv[None, :], T)
        return None if out is None else out[0]

    T = stage
    T_floor = 0.2 / mu_fast
    budget = [45]  # residual-evaluation allowance across all stages

    def spend(k=1):
        budget[0] -= k
        return budget[0] > 0

    for _outer in range(14):
        if not spend():
            return None
        r = residual(p, T)
        if r is None:
            # flow escapes before the stage horizon: take a shorter bite
            T *= 0.5
            if T < T_floor:
                return None
            continue
        converged = False
        shrink = False
        for _ in range(12):
            if np.linalg.norm(r) < 1e-13:
                converged = True
                break
            steps = 1e-7 * (1.0 + np.abs(p))
            probes = p[None, :] + np.diag(steps)
            if not spend():
                return None
            R = residual_batch(probes, T)
            if R is None:
                shrink = True
                break
            J = (R - r[None, :]).T / steps[None, :]
            try:
                step = np.linalg.solve(J, -r)
            except np.linalg.LinAlgError:
                return None
            if np.linalg.norm(step) <= newton_tol:
                # proposed correction below the target resolution: done
                converged = True
                break
            lam = 1.0
            while lam > 1e-6 and spend():
                r2 = residual(p + lam * step, T)
                if r2 is not None and np.linalg.norm(r2) < np.linalg.norm(r):
                    break
                lam *= 0.5
            else:
                break
            p = p + lam * step
            r = r2
        if shrink:
            T *= 0.5
            if T < T_floor:
                return None
            continue
        if T >= T_req:
            return p if converged else None
        if not converged:
            return None
        T = min(2.0 * T, T_req)
    return None


def _hull_tester(xs: Array):
    """Point-in-convex-hull test for the chart's x-projection; None when the
    cloud is degenerate."""
    n = xs.shape[1]
    if n == 1:
        lo, hi = float(xs.min()), float(xs.max())
        return lambda x: lo <= float(x[0]) <= hi
    try:
        from scipy.spatial import Delaunay
        tri = Delaunay(xs)
        return lambda x: bool(tri.find_simplex(np.asarray(x)[None, :])[0] >= 0)
    except Exception:
        return None


def _fiber_via_bvp(hsys: HamiltonianSystem, kind: str, x0: Array,
                   newton_tol: float, flow_tol: float):
    """Manifold fiber through a two-point solve against the origin.

    Strongly bent charts (multiple swings, large costates) put the target
    fiber outside the Newton basin of any stored witness, and a single
    forward flow from a wrong costate escapes violently.  The
    multiple-shooting boundary solver is immune to both; the costate of a
    long-horizon connection to the origin converges to the manifold fiber
    exponentially in the horizon, after which one warm Newton polish
    reaches the requested tolerance.
    """
    from .errors import ShootingDiverged
    from .ocp import solve_finite_bvp

    rates = -np.linalg.eigvals(hsys.sym.F).real
    T = 10.0 / float(rates.min())
    n = hsys.n
    try:
        if kind == "stable":
            traj = solve_finite_bvp(hsys, x0, np.zeros(n), T, tol=1e-6,
                                    tol_int=1e-11)
            p_rough = traj.z[0, n:]
        else:
            traj = solve_finite_bvp(hsys, np.zeros(n), x0, T, tol=1e-6,
                                    tol_int=1e-11)
            p_rough = traj.z[-1, n:]
    except (ShootingDiverged, IntegrationError):
        return None
    return _fiber_newton(hsys, kind, x0, p_rough, newton_tol,
                         flow_tol=min(flow_tol, 1e-10))


def coverage(chart: ManifoldChart, hsys: HamiltonianSystem,
             query_points: Sequence[Array], newton_tol: float = 1e-8,
             snap_factor: float = 10.0, boundary_factor: float = 3.0,
             flow_tol: float = 1e-9, attempt_all: bool = False,
             continuation: bool = True) -> CoverageEstimate:
    """Classify query states against the projected chart.

    A query is eligible for refinement when it lies inside the convex hull
    of the projected points or within ``snap_factor`` median spacings of
    them; eligible queries are refined by shooting onto the manifold fiber
    over x0.  Refinement failures within ``boundary_factor`` spacings are
    tagged boundary.  With ``attempt_all`` the proximity gate is skipped and
    every query gets a refinement attempt; the flow-convergence and energy
    certificates still decide coverage.
    """
    if len(chart.xs) == 0:
        raise ValueError("chart holds no accepted points")
    tree = cKDTree(chart.xs)
    spacing = chart.nn_spacing()
    snap = snap_factor * spacing
    in_hull = _hull_tester(chart.xs)
    entries = []
    for x0 in query_points:
        x0 = np.asarray(x0, dtype=float).reshape(chart.n)
        dist, idx = tree.query(x0)
        dist = float(dist)
        if (not attempt_all and dist > snap
                and not (in_hull is not None and in_hull(x0))):
            entries.append(CoverageEntry(x0, "uncovered", None, None, dist))
            continue
        p = _fiber_newton(hsys, chart.kind, x0, chart.ps[int(idx)],
                          newton_tol, flow_tol=flow_tol)
        if p is None and continuation:
            p = _fiber_via_bvp(hsys, chart.kind, x0, newton_tol, flow_tol)
        ok = p is not None
        if ok:
            wx, wp, *_ = _accept_points(
                hsys, [np.concatenate([x0, p])], chart.kind,
                chart.energy_tol, chart.check_tol,
                chart.meta.get("t_check_config"))
            ok = len(wx) == 1
        if ok:
            entries.append(CoverageEntry(x0, "covered", x0.copy(), p, dist))
        elif dist <= boundary_factor * spacing:
            entries.append(CoverageEntry(x0, "boundary", None, None, dist))
        else:
            entries.append(CoverageEntry(x0, "uncovered", None, None, dist))
    return CoverageEstimate(entries=entries, snap_radius=snap,
                            meta={"newton_tol": newton_tol,
                                  "spacing": spacing})


def manifold_feedback(chart: ManifoldChart, hsys: HamiltonianSystem, x: Array,
                      k: int = 8, snap_factor: float = 10.0) -> Array:
    """Optimal feedback from the chart at one state: u = -g(x)^T p with the
    costate interpolated by inverse-distance weights over nearby witnesses.

    When several manifold branches project near x, the branch with the
    smallest costate norm is used.  Raises Uncovered outside the chart.
    """
    return make_manifold_feedback(chart, hsys, k=k, snap_factor=snap_factor)(x)


def make_manifold_feedback(chart: ManifoldChart, hsys: HamiltonianSystem,
                           k: int = 8, snap_factor: float = 10.0):
    """Feedback-law closure over the chart; raises Uncovered outside it."""
    if len(chart.xs) == 0:
        raise ValueError("chart holds no accepted points")
    tree = cKDTree(chart.xs)
    spacing = chart.nn_spacing()
    snap = snap_factor * spacing if np.isfinite(spacing) else np.inf

    def p_hat(x):
        x = np.asarray(x, dtype=float).reshape(chart.n)
        kk = min(k, len(chart.xs))
        d, idx = tree.query(x, k=kk)
        d = np.atleast_1d(d)
        idx = np.atleast_1d(idx)
        if d[0] > snap:
            raise Uncovered(f"x is {d[0]:.3g} from the chart (snap {snap:.3g})")
        if d[0] < 1e-13:
            return chart.ps[int(idx[0])]
        ps = chart.ps[idx]
        # keep the branch with the smallest costate norm among neighbors
        ref = ps[np.argmin(np.linalg.norm(ps, axis=1))]
        scale = 1.0 + np.linalg.norm(ref)
        keep = np.linalg.norm(ps - ref, axis=1) <= 0.5 * scale
        w = 1.0 / d[keep]
        return (w[:, None] * ps[keep]).sum(axis=0) / w.sum()

    def u_of(x):
        x = np.asarray(x, dtype=float).reshape(chart.n)
        return optimal_feedback(hsys, x, p_hat(x))

    u_of.p_hat = p_hat
    return u_of


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def chart_to_jsonable(chart: ManifoldChart) -> dict:
    return {
        "kind": chart.kind,
        "tol": chart.tol,
        "local_radius": chart.local_radius,
        "energy_tol": chart.energy_tol,
        "check_tol": chart.check_tol,
        "t_check": chart.t_check,
        "dtheta0_norm": chart.dtheta0_norm,
        "rejected": chart.rejected,
        "seeds": [
            {
                "xi": list(map(float, s.xi)),
                "eta": list(map(float, s.eta)),
                "residuals": list(map(float, s.residuals)),
                "converged": bool(s.converged),
            }
            for s in chart.seeds
        ],
        "global_points": [
            {
                "x": list(map(float, chart.xs[i])),
                "p": list(map(float, chart.ps[i])),
                "H": float(chart.H[i]),
                "flow_check": float(chart.flow_check[i]),
            }
            for i in range(len(chart.xs))
        ],
    }


def chart_from_jsonable(data: dict) -> ManifoldChart:
    pts = data["global_points"]
    n = len(pts[0]["x"]) if pts else 1
    xs = np.array([p["x"] for p in pts]).reshape(-1, n)
    ps = np.array([p["p"] for p in pts]).reshape(-1, n)
    H = np.array([p["H"] for p in pts])
    fc = np.array([p["flow_check"] for p in pts])
    seeds = [SeedResult(xi=np.array(s["xi"]), eta=np.array(s["eta"]),
                        residuals=list(s["residuals"]),
                        converged=bool(s["converged"]))
             for s in data["seeds"]]
    return ManifoldChart(kind=data["kind"], tol=data["tol"], seeds=seeds,
                         xs=xs, ps=ps, H=H, flow_check=fc,
                         local_radius=data["local_radius"],
                         energy_tol=data["energy_tol"],
                         check_tol=data["check_tol"],
                         t_check=data["t_check"],
                         dtheta0_norm=data.get("dtheta0_norm", np.nan),
                         rejected=data.get("rejected", 0))


def save_chart(chart: ManifoldChart, path):
    from .serialize import dump_canonical
    with open(path, "w") as fh:
        fh.write(dump_canonical(chart_to_jsonable(chart)))


def load_chart(path) -> ManifoldChart:
    with open(path) as fh:
        return chart_from_jsonable(json.load(fh))
