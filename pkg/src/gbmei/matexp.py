"""Dense small-matrix kernels: exponentials, phi1 and stochastic propagators.

All inputs are square ``(d, d)`` float arrays with ``d`` small (every built-in
problem has ``d <= 4``), so dense scaling-and-squaring is the right tool.
The two stochastic propagators solve the linear homogeneous matrix SDE

    dS = A S dt + sum_i B_i S dW_i,      S(0) = I,

in closed form when ``A`` and the ``B_i`` all commute:

    S(dt, dW) = exp((A - 1/2 sum_i B_i^2) dt + sum_i B_i dW_i).

For non-commuting coefficients the same expression is still evaluated when the
caller waives the commutator check, but it is then only an approximation of
the flow (exactness claims no longer hold).
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm as _expm

DEFAULT_COMMUTATOR_TOL = 1e-10


class CommutatorError(ValueError):
    """Raised when a propagator is requested for non-commuting coefficients."""


@dataclass(frozen=True)
class CommutatorReport:
    """Result of checking the pairwise commutators of (A, B_1..B_m)."""

    max_residual: float
    tol: float
    passed: bool
    worst_pair: tuple[str, str]


def _check_square(M, name="M"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def _is_diagonal(M):
    return np.count_nonzero(M - np.diag(np.diagonal(M))) == 0


def mat_exp(M):
    """Matrix exponential of a square matrix.

    Diagonal matrices take an exact elementwise fast path; everything else
    goes through scaling-and-squaring with a degree-13 Pade approximant.
    """
    M = _check_square(M)
    if _is_diagonal(M):
        return np.diag(np.exp(np.diagonal(M)))
    return _expm(M)


def phi1(M):
    """phi1(M) = sum_{k>=0} M^k / (k+1)!, i.e. M^{-1}(exp(M) - I) for
    invertible M, extended by the power series at singular M.

    Computed from the exponential of the augmented block matrix
    ``[[M, I], [0, 0]]`` whose top-right block is phi1(M); this avoids ever
    forming M^{-1} and is exact in the limit M -> 0 (phi1(0) = I).
    """
    M = _check_square(M)
    d = M.shape[0]
    if _is_diagonal(M):
        lam = np.diagonal(M)
        with np.errstate(invalid="ignore", divide="ignore"):
            vals = np.where(lam == 0.0, 1.0, np.expm1(lam) / np.where(lam == 0.0, 1.0, lam))
        return np.diag(vals)
    aug = np.zeros((2 * d, 2 * d))
    aug[:d, :d] = M
    aug[:d, d:] = np.eye(d)
    return _expm(aug)[:d, d:].copy()


def commutator_residual(X, Y):
    """max-norm of XY - YX."""
    return float(np.max(np.abs(X @ Y - Y @ X)))


def check_commutators(A, Bs, tol=DEFAULT_COMMUTATOR_TOL):
    """Check the zero-commutator conditions [A, B_i] = 0 and [B_i, B_j] = 0.

    Returns a :class:`CommutatorReport` whose ``max_residual`` is the largest
    max-norm commutator over all pairs; ``passed`` is True iff it is <= tol.
    """
    A = _check_square(A, "A")
    d = A.shape[0]
    Bs = [_check_square(B, f"B_{i}") for i, B in enumerate(Bs)]
    for i, B in enumerate(Bs):
        if B.shape != (d, d):
            raise ValueError(f"B_{i} has shape {B.shape}, expected {(d, d)}")
    worst = 0.0
    worst_pair = ("A", "A")
    for i, B in enumerate(Bs):
        r = commutator_residual(A, B)
        if r > worst:
            worst, worst_pair = r, ("A", f"B_{i}")
    for i in range(len(Bs)):
        for j in range(i + 1, len(Bs)):
            r = commutator_residual(Bs[i], Bs[j])
            if r > worst:
                worst, worst_pair = r, (f"B_{i}", f"B_{j}")
    return CommutatorReport(max_residual=worst, tol=float(tol), passed=worst <= tol, worst_pair=worst_pair)


def gbm_exponent(A, Bs, dt, dW, p=1.0):
    """The matrix (A - 1/2 sum_i p^2 B_i^2) dt + sum_i p B_i dW_i."""
    A = np.asarray(A, dtype=float)
    E = A * dt
    for i, B in enumerate(Bs):
        B = np.asarray(B, dtype=float)
        E = E - (0.5 * p * p * dt) * (B @ B) + (p * dW[i]) * B
    return E


def gbm_propagator(A, Bs, dt, dW, p=1.0, *, waive_commutators=False, tol=DEFAULT_COMMUTATOR_TOL):
    """One-step propagator exp((A - 1/2 sum p^2 B_i^2) dt + sum p B_i dW_i).

    With ``p=1`` this is the exact solution operator of the linear SDE over a
    step of length ``dt`` with increments ``dW`` (commuting coefficients);
    with all ``B_i = 0`` it reduces to ``exp(dt A)``.

    Raises :class:`CommutatorError` if the coefficients fail the commutator
    check and ``waive_commutators`` is not set.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dW = np.atleast_1d(np.asarray(dW, dtype=float))
    if len(dW) != len(Bs):
        raise ValueError(f"dW has length {len(dW)}, expected {len(Bs)}")
    if not waive_commutators:
        report = check_commutators(A, Bs, tol)
        if not report.passed:
            raise CommutatorError(
                f"commutator residual {report.max_residual:.3e} exceeds tol {report.tol:.3e} "
                f"for pair {report.worst_pair}; pass waive_commutators=True to proceed"
            )
    return mat_exp(gbm_exponent(A, Bs, dt, dW, p))


def z_propagator(Bs, dt, dW, p=1.0, *, waive_commutators=False, tol=DEFAULT_COMMUTATOR_TOL):
    """Noise-only propagator exp(-1/2 sum p^2 B_i^2 dt + sum p B_i dW_i).

    Same as :func:`gbm_propagator` with the A term removed from the exponent.
    """
    Bs = [np.asarray(B, dtype=float) for B in Bs]
    if not Bs:
        raise ValueError("need at least one diffusion matrix")
    d = Bs[0].shape[0]
    return gbm_propagator(
        np.zeros((d, d)), Bs, dt, dW, p, waive_commutators=waive_commutators, tol=tol
    )
