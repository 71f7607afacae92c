"""Dense matrix-equation kernels for the Hamiltonian analysis.

Covers the continuous algebraic Riccati equation

    P A + A^T P - P B B^T P + C^T C = 0,

the Lyapunov equation P F^T + F P = Q, PBH stabilizability/detectability
tests, and the symplectic change of variables

    L = [[I, P2], [P1, I + P1 P2]],   L^-1 = [[I + P2 P1, -P2], [-P1, I]]

that block-diagonalizes the linear Hamiltonian matrix

    Ham = [[A, -B B^T], [-C^T C, -A^T]]

into diag(F, -F^T) with F = A - B B^T P1.  Sizes here are small (n up to a
few tens), so everything is dense and direct.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import schur

from .errors import (
    HamflowError as HamflowErrorBase,
    IllConditionedSubspace,
    NotDetectable,
    NotHurwitz,
    NotStabilizable,
    SolverInvariantViolation,
)

Array = np.ndarray


def hamiltonian_matrix(A: Array, B: Array, C: Array) -> Array:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)
    return np.block([[A, -B @ B.T], [-C.T @ C, -A.T]])


def is_hurwitz(M: Array, margin: float = 0.0) -> bool:
    return bool(np.all(np.linalg.eigvals(M).real < -margin))


def _bad_eigenvalues(A: Array) -> Array:
    """Eigenvalues of A with nonnegative real part (up to roundoff)."""
    lam = np.linalg.eigvals(A)
    return lam[lam.real >= -1e-12]


def pbh_stabilizable(A: Array, B: Array) -> bool:
    """PBH test: rank [lambda I - A, B] = n at every non-Hurwitz eigenvalue."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    thresh = 1e-10 * max(np.linalg.norm(A, 2), 1e-300)
    for lam in _bad_eigenvalues(A):
        M = np.hstack([lam * np.eye(n) - A, B.astype(complex)])
        if np.linalg.svd(M, compute_uv=False)[-1] <= thresh:
            return False
    return True


def pbh_detectable(C: Array, A: Array) -> bool:
    """PBH test: rank [lambda I - A; C] = n at every non-Hurwitz eigenvalue."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    C = np.asarray(C, dtype=float).reshape(-1, n)
    thresh = 1e-10 * max(np.linalg.norm(A, 2), 1e-300)
    for lam in _bad_eigenvalues(A):
        M = np.vstack([lam * np.eye(n) - A, C.astype(complex)])
        if np.linalg.svd(M, compute_uv=False)[-1] <= thresh:
            return False
    return True


def solve_care(A: Array, B: Array, C: Array) -> Array:
    """Stabilizing solution of P A + A^T P - P B B^T P + C^T C = 0.

    Extracts the stable invariant subspace of the Hamiltonian matrix by an
    ordered real Schur decomposition and sets P = X2 X1^{-1} from the stacked
    basis [X1; X2].
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)

    if not pbh_stabilizable(A, B):
        raise NotStabilizable("(A, B) fails the PBH stabilizability test")
    if not pbh_detectable(C, A):
        raise NotDetectable("(C, A) fails the PBH detectability test")

    Ham = hamiltonian_matrix(A, B, C)
    _, Z, sdim = schur(Ham, output="real", sort=lambda re, im: re < 0.0)
    if sdim != n:
        raise SolverInvariantViolation(
            f"stable subspace has dimension {sdim}, expected {n}"
        )
    X1 = Z[:n, :n]
    X2 = Z[n:, :n]
    if np.linalg.cond(X1) > 1e12:
        raise IllConditionedSubspace(
            "stable-subspace basis X1 has condition number above 1e12"
        )
    P = X2 @ np.linalg.inv(X1)
    P = 0.5 * (P + P.T)

    CtC = C.T @ C
    resid = np.linalg.norm(P @ A + A.T @ P - P @ B @ B.T @ P + CtC)
    if resid > 1e-10 * (1.0 + np.linalg.norm(P) ** 2):
        raise SolverInvariantViolation(f"CARE residual {resid:.3e} too large")
    F = A - B @ B.T @ P
    if not is_hurwitz(F):
        raise SolverInvariantViolation("closed-loop matrix is not Hurwitz")
    return P


def solve_lyapunov(F: Array, Q: Array) -> Array:
    """Solve P F^T + F P = Q for Hurwitz F and symmetric PSD Q.

    Vectorizes to the dense n^2 system (I kron F + F kron I) vec(P) = vec(Q);
    the solution is symmetric negative semidefinite, which is checked a
    posteriori rather than imposed.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    n = F.shape[0]
    if not is_hurwitz(F):
        raise NotHurwitz("Lyapunov solve requires a Hurwitz matrix")
    if np.linalg.norm(Q - Q.T) > 1e-10 * (1.0 + np.linalg.norm(Q)):
        raise ValueError("Q must be symmetric")
    wq = np.linalg.eigvalsh(0.5 * (Q + Q.T))
    if wq.min(initial=0.0) < -1e-10 * (1.0 + abs(wq).max(initial=0.0)):
        raise ValueError("Q must be positive semidefinite")

    K = np.kron(np.eye(n), F) + np.kron(F, np.eye(n))
    vecP = np.linalg.solve(K, Q.reshape(-1, order="F"))
    P = vecP.reshape(n, n, order="F")
    P = 0.5 * (P + P.T)

    resid = np.linalg.norm(P @ F.T + F @ P - Q)
    if resid > 1e-10 * (1.0 + np.linalg.norm(P)):
        raise SolverInvariantViolation(f"Lyapunov residual {resid:.3e} too large")
    wp = np.linalg.eigvalsh(P)
    if wp.max(initial=0.0) > 1e-8 * (1.0 + abs(wp).max(initial=0.0)):
        raise SolverInvariantViolation(
            "Lyapunov solution is not negative semidefinite"
        )
    return P


@dataclass(frozen=True)
class SymplecticData:
    """Riccati/Lyapunov pair and the symplectic block-diagonalizing transform."""

    P1: Array      # stabilizing CARE solution, PSD
    P2: Array      # Lyapunov solution, NSD
    L: Array       # 2n x 2n, [x; p] = L [xi; eta]
    Linv: Array
    F: Array       # A - B B^T P1, Hurwitz
    Ham: Array     # 2n x 2n linear Hamiltonian matrix

    @property
    def n(self) -> int:
        return self.P1.shape[0]

    def validate(self, tol_identity: float = 1e-10, tol_offdiag: float = 1e-8):
        """Assert the structural identities; raises on violation."""
        n = self.n
        I2 = np.eye(2 * n)
        J = np.block([[np.zeros((n, n)), np.eye(n)],
                      [-np.eye(n), np.zeros((n, n))]])
        scale = 1.0 + np.linalg.norm(self.L) ** 2
        if np.linalg.norm(self.L @ self.Linv - I2) > tol_identity * scale:
            raise SolverInvariantViolation("L Linv != I")
        if np.linalg.norm(self.L.T @ J @ self.L - J) > tol_identity * scale:
            raise SolverInvariantViolation("L is not symplectic")
        D = self.Linv @ self.Ham @ self.L
        if (np.linalg.norm(D[:n, n:]) > tol_offdiag
                or np.linalg.norm(D[n:, :n]) > tol_offdiag):
            raise SolverInvariantViolation("transform does not block-diagonalize")
        if np.linalg.norm(D[:n, :n] - self.F) > tol_offdiag * (1 + np.linalg.norm(self.F)):
            raise SolverInvariantViolation("upper block is not F")
        if not is_hurwitz(self.F):
            raise SolverInvariantViolation("F is not Hurwitz")


def build_symplectic(A: Array, B: Array, C: Array) -> SymplecticData:
    """Assemble the full symplectic normalization for the linear part (A, B, C)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    B = np.asarray(B, dtype=float).reshape(n, -1)
    C = np.asarray(C, dtype=float).reshape(-1, n)

    P1 = solve_care(A, B, C)
    F = A - B @ B.T @ P1
    P2 = solve_lyapunov(F, B @ B.T)

    I = np.eye(n)
    L = np.block([[I, P2], [P1, I + P1 @ P2]])
    Linv = np.block([[I + P2 @ P1, -P2], [-P1, I]])
    data = SymplecticData(P1=P1, P2=P2, L=L, Linv=Linv, F=F,
                          Ham=hamiltonian_matrix(A, B, C))
    data.validate()
    return data


def _pbh_margin(A: Array, B: Array = None, C: Array = None) -> float:
    """Smallest PBH singular value over the non-Hurwitz eigenvalues."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    margin = np.inf
    for lam in _bad_eigenvalues(A):
        if B is not None:
            M = np.hstack([lam * np.eye(n) - A, np.asarray(B, complex)])
        else:
            M = np.vstack([lam * np.eye(n) - A, np.asarray(C, complex)])
        margin = min(margin, np.linalg.svd(M, compute_uv=False)[-1])
    return float(margin)


def random_stabilizable_triple(n: int, m: int = 1, r: int = None,
                               rng: np.random.Generator = None,
                               spectral_radius: float = 1.0,
                               margin: float = 0.05,
                               gain_bound: float = 50.0):
    """Random (A, B, C) with (A, B) stabilizable and (C, A) detectable.

    Generic dense draws are controllable and observable with probability one.
    Draws are retried until the PBH tests pass with the requested margin and
    the stabilizing Riccati solution stays below ``gain_bound``, so the
    returned problems are well scaled rather than borderline-degenerate.
    """
    rng = np.random.default_rng() if rng is None else rng
    r = n if r is None else r
    for _ in range(500):
        A = rng.standard_normal((n, n))
        A *= spectral_radius / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
        B = rng.standard_normal((n, m))
        C = rng.standard_normal((r, n))
        if not (pbh_stabilizable(A, B) and pbh_detectable(C, A)):
            continue
        if _pbh_margin(A, B=B) < margin or _pbh_margin(A, C=C) < margin:
            continue
        try:
            P1 = solve_care(A, B, C)
        except HamflowErrorBase:
            continue
        if np.linalg.norm(P1) <= gain_bound:
            return A, B, C
    raise RuntimeError("failed to draw a stabilizable/detectable triple")
