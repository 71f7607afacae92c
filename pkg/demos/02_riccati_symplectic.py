#!/usr/bin/env python3
"""The linear backbone: Riccati, Lyapunov, and the symplectic split.

Every chart in this package starts from the same linear normalization.
Given the linear part (A, B, C) of a system and its cost, the matrix

    Ham = [[A, -B B^T], [-C^T C, -A^T]]

is similar, through the symplectic transform L built from the stabilizing
Riccati solution P1 and a Lyapunov solution P2, to diag(F, -F^T) with
F = A - B B^T P1 Hurwitz.  The (xi, eta) coordinates defined by L turn the
stable subspace into {eta = 0} and the unstable one into {xi = 0}.
"""

import numpy as np

import hamflow as hf


def show(name, M):
    print(f"{name} =\n{np.array_str(np.asarray(M), precision=6, suppress_small=True)}")


def main():
    rng = np.random.default_rng(3)
    A, B, C = hf.random_stabilizable_triple(3, 1, rng=rng)
    show("A", A)
    show("B", B.ravel())

    print("\nPBH tests:",
          "stabilizable" if hf.pbh_stabilizable(A, B) else "NOT stabilizable",
          "/",
          "detectable" if hf.pbh_detectable(C, A) else "NOT detectable")

    sd = hf.build_symplectic(A, B, C)
    show("\nP1 (stabilizing Riccati solution)", sd.P1)
    print("eig(P1) =", np.round(np.linalg.eigvalsh(sd.P1), 6), " (PSD)")
    show("P2 (Lyapunov solution)", sd.P2)
    print("eig(P2) =", np.round(np.linalg.eigvalsh(sd.P2), 6), " (NSD)")

    n = 3
    J = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    print("\nstructural identities:")
    print("  |L Linv - I|      =", f"{np.linalg.norm(sd.L @ sd.Linv - np.eye(2*n)):.2e}")
    print("  |L^T J L - J|     =", f"{np.linalg.norm(sd.L.T @ J @ sd.L - J):.2e}")
    D = sd.Linv @ sd.Ham @ sd.L
    print("  off-diagonal norm =", f"{max(np.linalg.norm(D[:n, n:]), np.linalg.norm(D[n:, :n])):.2e}")
    print("  eig(F) =", np.round(np.linalg.eigvals(sd.F), 4))

    lam = np.sort_complex(np.linalg.eigvals(sd.Ham))
    print("\nHam spectrum is symmetric about the imaginary axis:")
    print(" ", np.round(lam, 4))

    # round-trip through the transformed coordinates
    x = rng.standard_normal(n)
    p = rng.standard_normal(n)
    xi, eta = hf.to_xi_eta(sd, x, p)
    x2, p2 = hf.from_xi_eta(sd, xi, eta)
    print("\ncoordinate round trip error:",
          f"{max(np.abs(x2 - x).max(), np.abs(p2 - p).max()):.2e}")

    # the Riccati subspace p = P1 x is flow-invariant: flow a point and watch
    sys = hf.linear_system(A, B, C)
    hsys = hf.build_hamiltonian(sys)
    z0 = np.concatenate([x, sd.P1 @ x])
    traj = hf.flow(hsys, z0, (0.0, 8.0), tol=1e-11)
    dev = max(np.linalg.norm(z[n:] - sd.P1 @ z[:n]) for z in traj.z)
    print(f"max deviation from p = P1 x along the flow: {dev:.2e}")


if __name__ == "__main__":
    main()
