#!/usr/bin/env python3
"""Turnpike behavior on a backstepping-stabilizable cascade.

The planar cascade dx1 = x1^2 + (1 + x1^2) x2, dx2 = x2^2 + u admits a
global exponentially stabilizing backstepping feedback, and both invariant
manifolds of the associated Hamiltonian system project onto the whole
plane.  Consequently the fixed-endpoint problems from x0 = (1, 1) to
xf = (0.5, 0) spend all but a bounded amount of time near the origin no
matter how long the horizon: the residence measure of |u| + |x| > 0.1 is
essentially the same for T = 10, 20 and 40.
"""

import os

import numpy as np

import hamflow as hf
from hamflow.systems import cascade_lyapunov

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)


def main():
    sys = hf.example_system("backstepping")
    blocks = hf.example_cascade()
    fb = hf.backstepping_feedback(blocks)

    print("backstepping stabilizer sanity:")
    traj = hf.simulate_controlled(sys, [1.0, 1.0], fb, 30.0, tol=1e-10)
    V = [cascade_lyapunov(blocks, x) for x in traj.z]
    print(f"  V(0) = {V[0]:.3f} -> V(30) = {V[-1]:.2e}, "
          f"monotone: {bool(np.all(np.diff(V) <= 1e-9))}")

    hsys = hf.build_hamiltonian(sys)
    x0, xf = np.array([1.0, 1.0]), np.array([0.5, 0.0])

    # both manifolds cover the endpoints, the sufficient condition for a
    # horizon-uniform residence bound
    stable = hf.globalize(hf.local_stable_manifold(hsys, tol=1e-9), hsys,
                          extend_time=6.0, bounds={"z_max": 40.0})
    unstable = hf.globalize(hf.unstable_manifold(hsys, tol=1e-9), hsys,
                            extend_time=6.0, bounds={"z_max": 40.0})

    report = hf.turnpike_report(hsys, x0, xf, [10.0, 20.0, 40.0],
                                epsilon=0.1, tol=1e-6,
                                stable_chart=stable, unstable_chart=unstable,
                                keep_trajectories=True)
    print("\nper-horizon boundary value problems:")
    for e in report.entries:
        print(f"  T = {e.T:4.0f}: converged={e.converged}  "
              f"residence({report.epsilon}) = {e.residence:.4f}  "
              f"cost = {e.cost:.6f}  residual = {e.residual:.1e}")
    print(f"uniformity ratio (max/min residence): {report.uniformity:.6f}")
    print(f"sufficient condition: {report.condition}")

    for T, traj in report.trajectories.items():
        hf.trajectory_to_csv(
            traj, os.path.join(OUT, f"turnpike_T{T:g}.csv"), n=2)
    print(f"\nwrote per-horizon trajectories to {OUT}/turnpike_T*.csv")

    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(7, 4))
        for T, traj in sorted(report.trajectories.items()):
            s = np.linalg.norm(traj.z[:, :2], axis=1) \
                + np.linalg.norm(traj.u, axis=1)
            ax.semilogy(traj.t, np.maximum(s, 1e-12), label=f"T = {T:g}")
        ax.axhline(report.epsilon, color="k", ls="--", lw=1)
        ax.set_xlabel("t")
        ax.set_ylabel("|x| + |u|")
        ax.set_title("turnpike: excursions pinned to both ends")
        ax.legend()
        fig.tight_layout()
        fig.savefig(os.path.join(OUT, "turnpike.png"), dpi=120)
        print(f"wrote {OUT}/turnpike.png")
    except ImportError:
        pass


if __name__ == "__main__":
    main()
