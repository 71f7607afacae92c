#!/usr/bin/env python3
"""Scalar warm-up: a stable manifold blocked by a heteroclinic orbit.

The system dx/dt = -x + x^2 + u with cost int u^2/2 dt is globally
exponentially stabilizable (u = -x^2 works everywhere), yet the optimal
control u = 0 only drives states with x(0) < 1 to the origin.  The
state-costate dynamics

    dx/dt = -x + x^2 - p,      dp/dt = p - 2 x p

have equilibria at (0, 0) and (1, 0) joined by heteroclinic orbits, and the
stable manifold of the origin projects exactly onto x < 1.  This script
computes the manifold chart, watches the projection saturate at the
blocking equilibrium, and probes coverage on both sides of it.
"""

import os

import numpy as np

import hamflow as hf

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    sys = hf.example_system("scalar")
    hsys = hf.build_hamiltonian(sys)

    print("two equilibria of the Hamiltonian field:")
    for z in ([0.0, 0.0], [1.0, 0.0]):
        print(f"  rhs({z}) = {hsys.rhs(np.array(z))}")

    chart = hf.local_stable_manifold(hsys, tol=1e-9)
    chart = hf.globalize(chart, hsys, extend_time=12.0,
                         bounds={"x_min": [-3.0], "x_max": [0.99]})
    print(f"\nchart: {len(chart.xs)} points, "
          f"x in [{chart.xs.min():.3f}, {chart.xs.max():.3f}], "
          f"max |p| = {np.abs(chart.ps).max():.2e} (manifold is p = 0), "
          f"max |H| = {np.abs(chart.H).max():.2e}")

    queries = [[-2.0], [-1.0], [0.5], [0.9], [0.99], [1.1], [1.5]]
    cov = hf.coverage(chart, hsys, queries, newton_tol=1e-8)
    print("\ncoverage of the base space (the x < 1 boundary is sharp):")
    for e in cov.entries:
        print(f"  x0 = {e.x0[0]:5.2f}: {e.status}")

    # the unstable manifold traces the heteroclinic connection p = 2x(x - 1)
    un = hf.unstable_manifold(hsys, seed_radius=0.2)
    un = hf.globalize(un, hsys, extend_time=2.5,
                      bounds={"x_min": [-2.0], "x_max": [0.97]})
    branch_err = np.abs(un.ps[:, 0] - 2 * un.xs[:, 0] * (un.xs[:, 0] - 1)).max()
    print(f"\nunstable manifold vs closed form p = 2x(x-1): "
          f"max deviation {branch_err:.2e}")

    hf.save_chart(chart, os.path.join(OUT, "scalar_stable_chart.json"))
    traj = hf.flow(hsys, np.array([0.9, 0.0]), (0.0, 15.0), tol=1e-10)
    hf.trajectory_to_csv(traj, os.path.join(OUT, "scalar_orbit.csv"), n=1)
    print(f"\nwrote {OUT}/scalar_stable_chart.json and scalar_orbit.csv")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(chart.xs[:, 0], chart.ps[:, 0], ".", ms=3, label="stable")
        ax.plot(un.xs[:, 0], un.ps[:, 0], ".", ms=3, label="unstable")
        ax.plot([0, 1], [0, 0], "k*", ms=10)
        ax.set_xlabel("x")
        ax.set_ylabel("p")
        ax.legend()
        ax.set_title("invariant manifolds and the blocking equilibrium")
        fig.tight_layout()
        fig.savefig(os.path.join(OUT, "scalar_manifolds.png"), dpi=120)
        print(f"wrote {OUT}/scalar_manifolds.png")
    except ImportError:
        pass


if __name__ == "__main__":
    main()
