"""Problem definitions for the semi-linear SDE

    du = (A u + F(u)) dt + sum_i (B_i u + g_i(u)) dW_i,    u(0) = u0,

plus the four built-in test problems and the derived functions the
integrators need (the modified drift f_tilde, the homotopy-rewritten fields
and the Milstein tensor H).

Field functions are plain callables R^d -> R^d. The built-ins use
module-level functions bound with ``functools.partial`` so problems pickle
cleanly into worker processes. Global Lipschitz assumptions are asserted by
the user, never checked at runtime (the Ginzburg-Landau drift violates them
and is benchmarked anyway).
"""

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .matexp import CommutatorError, CommutatorReport, check_commutators, gbm_propagator

__all__ = [
    "SdeProblem",
    "DerivedFunctions",
    "make_problem",
    "builtin",
    "h_tensor",
    "derived_functions",
    "default_homotopy_p",
    "BUILTIN_PROBLEMS",
    "ginzburg_landau",
    "diag_noise",
    "noncomm_noise",
    "stiff2d",
]


@dataclass(frozen=True, eq=False)
class SdeProblem:
    """Immutable record (d, m, A, B_i, F, g_i, Dg_i, u0, hooks)."""

    d: int
    m: int
    A: np.ndarray
    Bs: np.ndarray  # (m, d, d)
    F: object  # callable or None (zero drift nonlinearity)
    gs: tuple  # tuple of callables, or None (zero diffusion nonlinearity)
    Dgs: tuple  # tuple of Jacobian callables, or None
    u0: np.ndarray
    commutative_noise: bool
    exact: object  # callable (t, NoiseBatch) -> R^d, or None
    waive_commutators: bool
    commutator_report: CommutatorReport
    name: str = ""
    params: dict = field(default_factory=dict)
    native: tuple = None  # compiled fast-path tag, e.g. ("diag4", (alpha,))

    @property
    def has_jacobians(self):
        return self.gs is None or self.Dgs is not None

    def drift(self, u):
        return self.F(u) if self.F is not None else np.zeros(self.d)

    def diffusion(self, u, i):
        """g_i(u), zero when no diffusion nonlinearity is set."""
        return self.gs[i](u) if self.gs is not None else np.zeros(self.d)

    def jacobian(self, u, i):
        if self.gs is None:
            return np.zeros((self.d, self.d))
        if self.Dgs is None:
            raise ValueError("problem has no diffusion Jacobians (Dgs)")
        return self.Dgs[i](u)


def make_problem(
    A,
    Bs,
    F=None,
    gs=None,
    Dgs=None,
    u0=None,
    commutative_noise=False,
    exact=None,
    waive_commutators=False,
    tol=1e-10,
    name="",
    params=None,
    native=None,
):
    """Validate dimensions, run the commutator check and build an SdeProblem.

    Construction fails with :class:`CommutatorError` when (A, B_i) or
    (B_i, B_j) do not commute within ``tol``, unless ``waive_commutators`` is
    set; the report is attached either way.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got {A.shape}")
    d = A.shape[0]
    Bs = np.asarray(Bs, dtype=float)
    if Bs.ndim != 3 or Bs.shape[1:] != (d, d):
        raise ValueError(f"Bs must have shape (m, {d}, {d}), got {Bs.shape}")
    m = Bs.shape[0]
    if u0 is None:
        raise ValueError("u0 is required")
    u0 = np.asarray(u0, dtype=float).reshape(-1)
    if u0.shape != (d,):
        raise ValueError(f"u0 must have length {d}, got {u0.shape}")
    if gs is not None:
        gs = tuple(gs)
        if len(gs) != m:
            raise ValueError(f"need {m} diffusion functions, got {len(gs)}")
    if Dgs is not None:
        Dgs = tuple(Dgs)
        if gs is None or len(Dgs) != m:
            raise ValueError("Dgs must match gs (one Jacobian per g_i)")
    report = check_commutators(A, list(Bs), tol)
    if not report.passed and not waive_commutators:
        raise CommutatorError(
            f"problem coefficients do not commute (residual {report.max_residual:.3e} "
            f"> tol {report.tol:.3e}); set waive_commutators=True to proceed"
        )
    return SdeProblem(
        d=d,
        m=m,
        A=A,
        Bs=Bs,
        F=F,
        gs=gs,
        Dgs=Dgs,
        u0=u0,
        commutative_noise=bool(commutative_noise),
        exact=exact,
        waive_commutators=bool(waive_commutators),
        commutator_report=report,
        name=name,
        params=dict(params or {}),
        native=native,
    )


# ---------------------------------------------------------------------------
# Derived functions


def f_tilde(problem, u):
    """Modified drift f~(u) = F(u) - sum_i B_i g_i(u)."""
    out = problem.drift(u).astype(float, copy=True)
    if problem.gs is not None:
        for i in range(problem.m):
            out -= problem.Bs[i] @ problem.gs[i](u)
    return out


def g_hom(problem, u, i, p):
    """Homotopy diffusion g_i^p(u) = g_i(u) + (1 - p) B_i u."""
    return problem.diffusion(u, i) + (1.0 - p) * (problem.Bs[i] @ u)


def f_tilde_hom(problem, u, p):
    """Homotopy drift f~^p(u) = F(u) - sum_i p B_i g_i^p(u)."""
    out = problem.drift(u).astype(float, copy=True)
    for i in range(problem.m):
        out -= p * (problem.Bs[i] @ g_hom(problem, u, i, p))
    return out


def h_tensor(problem, u, i, l):
    """Milstein tensor H_{i,l}(u) = Dg_i(u)(B_l u + g_l(u)) - B_l g_i(u)."""
    if problem.gs is None:
        return np.zeros(problem.d)
    Dgi = problem.jacobian(u, i)
    return Dgi @ (problem.Bs[l] @ u + problem.gs[l](u)) - problem.Bs[l] @ problem.gs[i](u)


@dataclass(frozen=True)
class DerivedFunctions:
    """Bundle of the derived fields for a fixed homotopy parameter p."""

    f_tilde: object
    f_tilde_p: object
    g_p: tuple
    h: object


def derived_functions(problem, p=1.0):
    return DerivedFunctions(
        f_tilde=partial(f_tilde, problem),
        f_tilde_p=lambda u: f_tilde_hom(problem, u, p),
        g_p=tuple(partial(g_hom, problem, i=i, p=p) for i in range(problem.m)),
        h=partial(h_tensor, problem),
    )


def default_homotopy_p(problem):
    """p = |beta| / (|alpha| + |beta|) when the problem exposes (alpha, beta), else None."""
    params = problem.params
    if "alpha" in params and "beta" in params:
        a, b = abs(params["alpha"]), abs(params["beta"])
        if a + b == 0:
            return 1.0
        return b / (a + b)
    return None


# ---------------------------------------------------------------------------
# Built-in problems (field functions are module level for picklability)


def _gl_F(u):
    return -(u * u * u)


def _gl_exact(t, batch, u0, sigma):
    """Closed-form Ginzburg-Landau solution on the batch's finest grid.

    u(t) = u0 e^{-t + sqrt(sigma) W(t)} / sqrt(1 + 2 u0^2 I(t)) with
    I(t) = int_0^t e^{-2s + 2 sqrt(sigma) W(s)} ds by trapezoidal quadrature.
    """
    Nf = batch.grid.finest
    h = batch.grid.T / Nf
    n = int(round(t / h))
    if abs(n * h - t) > 1e-9 * max(1.0, abs(t)):
        raise ValueError(f"t={t} is not a point of the finest grid (dt={h})")
    W = batch.brownian_path(Nf)[: n + 1, 0]
    s = h * np.arange(n + 1)
    f = np.exp(-2.0 * s + 2.0 * math.sqrt(sigma) * W)
    integral = np.trapezoid(f, dx=h) if n > 0 else 0.0
    num = u0 * math.exp(-t + math.sqrt(sigma) * W[n])
    return np.array([num / math.sqrt(1.0 + 2.0 * u0 * u0 * integral)])


def ginzburg_landau(sigma=2.0, u0=1.0):
    """du = (-u + sigma/2 u - u^3) dt + sqrt(sigma) u dW, with exact solution.

    Linear noise (g = 0): the GBM-propagator schemes converge with order one.
    """
    a = -1.0 + sigma / 2.0
    return make_problem(
        A=np.array([[a]]),
        Bs=np.array([[[math.sqrt(sigma)]]]),
        F=_gl_F,
        gs=None,
        Dgs=None,
        u0=np.array([float(u0)]),
        commutative_noise=True,
        exact=partial(_gl_exact, u0=float(u0), sigma=float(sigma)),
        name="ginzburg_landau",
        params={"sigma": float(sigma), "u0": float(u0)},
        native=("gl", ()),
    )


def _diag_F(u):
    return u / (1.0 + np.abs(u))


def _diag_g(u, i, alpha, d):
    out = np.zeros(d)
    out[i] = alpha / (1.0 + u[i] * u[i])
    return out


def _diag_Dg(u, i, alpha, d):
    J = np.zeros((d, d))
    den = 1.0 + u[i] * u[i]
    J[i, i] = -2.0 * alpha * u[i] / (den * den)
    return J


def _laplacian_drift(d, r):
    A = np.zeros((d, d))
    for j in range(d):
        A[j, j] = -2.0
        if j > 0:
            A[j, j - 1] = 1.0
        if j + 1 < d:
            A[j, j + 1] = 1.0
    return r * A


def diag_noise(alpha=0.1, beta=1.0, r=4.0):
    """R^4 reaction-diffusion test problem with diagonal noise.

    Drift r*tridiag(1,-2,1) + u/(1+|u|); diffusion per channel
    beta u_i + alpha/(1+u_i^2). A and the diagonal B_i do not commute, so the
    propagator check is waived (matching how the problem is benchmarked);
    the noise itself is commutative, so Milstein cross-integrals reduce to
    the symmetric-part identity.
    """
    d = m = 4
    return make_problem(
        A=_laplacian_drift(d, r),
        Bs=np.array([beta * np.diag(np.eye(d)[i]) for i in range(m)]),
        F=_diag_F,
        gs=tuple(partial(_diag_g, i=i, alpha=alpha, d=d) for i in range(m)),
        Dgs=tuple(partial(_diag_Dg, i=i, alpha=alpha, d=d) for i in range(m)),
        u0=np.ones(d),
        commutative_noise=True,
        waive_commutators=True,
        name="diag_noise",
        params={"alpha": float(alpha), "beta": float(beta), "r": float(r)},
        native=("diag4", (float(alpha),)),
    )


def _noncomm_g(u, i, alpha, d):
    out = np.zeros(d)
    if i + 1 < d:
        out[i + 1] = -alpha * u[i]
    return out


def _noncomm_Dg(u, i, alpha, d):
    J = np.zeros((d, d))
    if i + 1 < d:
        J[i + 1, i] = -alpha
    return J


def noncomm_noise(alpha=0.1, beta=1.0, r=4.0):
    """Same drift as :func:`diag_noise` with a subdiagonal nonlinear shift.

    g_i moves -alpha u_i one row down, so Milstein cross-terms need genuine
    Levy areas (non-commutative noise). The last channel has g_m = 0.
    """
    d = m = 4
    return make_problem(
        A=_laplacian_drift(d, r),
        Bs=np.array([beta * np.diag(np.eye(d)[i]) for i in range(m)]),
        F=_diag_F,
        gs=tuple(partial(_noncomm_g, i=i, alpha=alpha, d=d) for i in range(m)),
        Dgs=tuple(partial(_noncomm_Dg, i=i, alpha=alpha, d=d) for i in range(m)),
        u0=np.ones(d),
        commutative_noise=False,
        waive_commutators=True,
        name="noncomm_noise",
        params={"alpha": float(alpha), "beta": float(beta), "r": float(r)},
        native=("noncomm4", (float(alpha),)),
    )


def _stiff_g(u, c):
    return np.array([c * u[1], c * u[0]])


def _stiff_Dg(u, c):
    return np.array([[0.0, c], [c, 0.0]])


def stiff2d(beta=5.0, sigma=4.0, rho=0.5):
    """Linear 2-d rotation SDE used as a stiff-solver test.

    Drift beta*[[0,1],[-1,0]]; the two noise channels are split as
    B_1 = sigma/2 I, g_1 = sigma/2 (u2, u1) and B_2 = rho/2 I,
    g_2 = -rho/2 (u2, u1).  Solutions stay near the origin.
    """
    d = 2
    c1, c2 = sigma / 2.0, rho / 2.0
    return make_problem(
        A=beta * np.array([[0.0, 1.0], [-1.0, 0.0]]),
        Bs=np.array([c1 * np.eye(d), c2 * np.eye(d)]),
        F=None,
        gs=(partial(_stiff_g, c=c1), partial(_stiff_g, c=-c2)),
        Dgs=(partial(_stiff_Dg, c=c1), partial(_stiff_Dg, c=-c2)),
        u0=np.array([1.0, 0.0]),
        commutative_noise=True,
        name="stiff2d",
        params={"beta": float(beta), "sigma": float(sigma), "rho": float(rho)},
        native=("stiff2", (sigma / 2.0, rho / 2.0)),
    )


def _linear_exact(t, batch, A, Bs, u0):
    """Exact GBM solution u(t) = exp((A - 1/2 sum B^2) t + sum B_i W_i(t)) u0."""
    Nf = batch.grid.finest
    h = batch.grid.T / Nf
    n = int(round(t / h))
    W = batch.brownian_path(Nf)[n]
    return gbm_propagator(A, list(Bs), t, W, waive_commutators=True) @ u0


def linear_exact_hook(A, Bs, u0):
    """Exact-solution hook for problems with F = 0 and g = 0."""
    return partial(
        _linear_exact,
        A=np.asarray(A, dtype=float),
        Bs=np.asarray(Bs, dtype=float),
        u0=np.asarray(u0, dtype=float),
    )


BUILTIN_PROBLEMS = {
    "ginzburg_landau": ginzburg_landau,
    "diag_noise": diag_noise,
    "noncomm_noise": noncomm_noise,
    "stiff2d": stiff2d,
}


def register_problem(name, constructor):
    """Register a user problem constructor under a name.

    Registered problems are selectable everywhere built-ins are (harness
    configs, CLI). Built-ins are ordinary entries of the same registry.
    """
    if not callable(constructor):
        raise TypeError("constructor must be callable")
    BUILTIN_PROBLEMS[name] = constructor


def builtin(name, params=None):
    """Construct a registered problem by name with a parameter dict."""
    if name not in BUILTIN_PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; available: {sorted(BUILTIN_PROBLEMS)}")
    return BUILTIN_PROBLEMS[name](**(params or {}))
