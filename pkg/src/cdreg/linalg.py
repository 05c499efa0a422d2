"""Deterministic dense matrix kernels in 64-bit floats.

Everything in here is pure and single-threaded: matrix products accumulate
in a fixed (row, k) loop order, and the SVD is a one-sided Jacobi with a
fixed sweep schedule, so repeated calls on the same inputs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


class SvdConvergenceError(RuntimeError):
    """Raised when Jacobi sweeps hit the iteration cap without converging."""

    def __init__(self, residual: float, sweeps: int):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(
            f"one-sided Jacobi did not converge after {sweeps} sweeps "
            f"(max relative off-diagonal {residual:.3e})"
        )


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a 2-D float64 array.

    Raises ValueError for non-2-D input or non-finite entries.
    """
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed (row, k) accumulation order.

    Each output element accumulates its k-terms in ascending k, one rank-1
    update at a time, so the result is bit-reproducible and independent of
    BLAS threading.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} x {b.shape}"
        )
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k]
    return out


def frobenius_norm_sq(a) -> float:
    """Sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def gram_right(w1) -> np.ndarray:
    """W1 @ W1.T, symmetrized by averaging with its transpose.

    The result is positive semi-definite up to rounding; symmetrization
    removes the asymmetry left by finite-precision accumulation.
    """
    w1 = as_matrix(w1, "w1")
    g = matmul(w1, w1.T)
    return (g + g.T) / 2.0


@dataclass
class SvdResult:
    """Full SVD truncated at the effective rank.

    u: (m, r) left singular vectors, columns u_i
    s: (r,) singular values, descending
    v: (n, r) right singular vectors, columns v_i
    r: effective rank (count of singular values above the rank cutoff)
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    r: int

    def reconstruct(self) -> np.ndarray:
        return matmul(self.u * self.s, self.v.T)


def svd(a) -> SvdResult:
    """One-sided Jacobi SVD of a dense matrix.

    The rotation sweeps run on the smaller dimension's side with a fixed
    (p, q) schedule; convergence is declared when every column pair has
    relative off-diagonal below JACOBI_TOL. Sign convention: the
    largest-magnitude entry of each u_i is made nonnegative (first such
    entry on ties).

    Raises SvdConvergenceError if JACOBI_MAX_SWEEPS sweeps do not converge.
    """
    a = as_matrix(a, "a")
    m, n = a.shape
    transposed = m < n
    b = a.T.copy() if transposed else a.copy()
    rows, cols = b.shape

    v = np.eye(cols)
    converged = False
    worst = 0.0
    for _ in range(JACOBI_MAX_SWEEPS):
        worst = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                app = float(b[:, p] @ b[:, p])
                aqq = float(b[:, q] @ b[:, q])
                apq = float(b[:, p] @ b[:, q])
                denom = np.sqrt(app * aqq)
                if denom == 0.0 or abs(apq) <= JACOBI_TOL * denom:
                    continue
                worst = max(worst, abs(apq) / denom)
                zeta = (aqq - app) / (2.0 * apq)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                if zeta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                bp = b[:, p].copy()
                b[:, p] = c * bp - s * b[:, q]
                b[:, q] = s * bp + c * b[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if worst == 0.0:
            converged = True
            break
    if not converged:
        raise SvdConvergenceError(worst, JACOBI_MAX_SWEEPS)

    norms = np.sqrt(np.sum(b * b, axis=0))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    b = b[:, order]
    v = v[:, order]

    # Effective rank: drop directions at or below the numerical noise floor.
    cutoff = norms[0] * max(rows, cols) * np.finfo(np.float64).eps if norms.size else 0.0
    r = int(np.sum(norms > cutoff))
    s_vals = norms[:r]
    u = b[:, :r] / s_vals if r else np.zeros((rows, 0))
    v = v[:, :r]

    if transposed:
        u, v = v, u

    for i in range(r):
        j = int(np.argmax(np.abs(u[:, i])))
        if u[j, i] < 0.0:
            u[:, i] = -u[:, i]
            v[:, i] = -v[:, i]

    return SvdResult(u=u, s=s_vals, v=v, r=r)
