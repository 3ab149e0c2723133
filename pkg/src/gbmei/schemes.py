"""The eleven time-stepping schemes behind one uniform stepping contract.

Baselines: semi-implicit Euler-Maruyama (EM), the two standard exponential
integrators SETD0/SETD1, the classical Milstein scheme and the exponential
Milstein scheme. New schemes: the GBM-propagator exponential integrators
EI0/EI1/EI2, their homotopy blend HomEI0, and the Milstein versions MI0 and
HomMI0.

Update rules (Omega is the GBM propagator over one step, Z its noise-only
part, phi1 the first phi-function, f~ = F - sum B_i g_i, G_i(u) = B_i u + g_i(u)):

    EM:      (I - dt A) u' = u + dt F + sum G_i dW_i
    SETD0:   u' = e^{dt A} (u + dt F + sum G_i dW_i)
    SETD1:   u' = e^{dt A} (u + sum G_i dW_i) + dt phi1(dt A) F
    EI0:     u' = Omega (u + dt f~ + sum g_i dW_i)
    EI1:     u' = Omega (u + sum g_i dW_i) + dt Z phi1(dt A) f~
    EI2:     u' = Omega (u + sum g_i dW_i) + dt phi1(dt A) f~
    HomEI0:  EI0 with B_i -> p B_i, g_i -> g_i + (1-p) B_i u
    MI0:     EI0 plus Omega sum_{i,l} H_{i,l} I[l,i]
    HomMI0:  MI0 under the same homotopy rewrite
    MilsteinClassical: u' = u + dt (A u + F) + sum G_i dW_i
                            + sum_{i,l} DG_i G_l I[l,i]
    ExpMilstein: u' = e^{dt A} (u + sum G_i dW_i + sum_{i,l} DG_i G_l I[l,i])
                      + dt phi1(dt A) F

Iterated integrals are stored inner-index-first: I[l, i] ~ int int dW_l(r)
dW_i(s).

The homotopy kinds are evaluated through an "effective problem" view
(B -> p B, g -> g + (1-p) B u, Dg -> Dg + (1-p) B); at p = 1 this is the
original problem and at p = 0 the propagator degenerates to e^{dt A}, which
makes HomEI0 coincide with SETD0 step by step.

Per-level state-independent pieces (e^{dt A}, phi1(dt A), the EM solve
matrix, the deterministic part of the propagator exponent) are cached once
per step size. The per-step propagator is evaluated by the cheapest strategy
the problem's structure allows: elementwise exponentials when the exponent
is diagonal, cached e^{dt A} times a diagonal noise factor when A commutes
with diagonal B_i, and a dense per-step matrix exponential otherwise
(the waived non-commuting regime).
"""

import os
from dataclasses import dataclass

import numpy as np

from . import matexp
from .model import SdeProblem

KINDS = (
    "EM",
    "SETD0",
    "SETD1",
    "MilsteinClassical",
    "ExpMilstein",
    "EI0",
    "EI1",
    "EI2",
    "HomEI0",
    "MI0",
    "HomMI0",
)
MILSTEIN_KINDS = frozenset({"MilsteinClassical", "ExpMilstein", "MI0", "HomMI0"})
HOMOTOPY_KINDS = frozenset({"HomEI0", "HomMI0"})

# Propagator evaluation strategies.
STRAT_BZERO = 0  # all B_i = 0: Omega = e^{dt A}, Z = I
STRAT_DIAG = 1  # A and B_i diagonal: elementwise exponent
STRAT_SPLIT = 2  # [A, B_i] = 0 with diagonal B_i: e^{dt A} times diagonal factor
STRAT_FULL = 3  # dense per-step matrix exponential

DEFAULT_GUARD = 1e12

KIND_IDS = {kind: i for i, kind in enumerate(KINDS)}


@dataclass(frozen=True)
class SchemeSpec:
    """One integrator: its kind plus the homotopy parameter where applicable."""

    kind: str
    p: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}; known: {KINDS}")
        if self.kind in HOMOTOPY_KINDS:
            if self.p is None:
                raise ValueError(f"{self.kind} requires the homotopy parameter p")
            if not 0.0 <= self.p <= 1.0:
                raise ValueError(f"p must be in [0, 1], got {self.p}")
        elif self.p is not None:
            raise ValueError(f"{self.kind} does not take a homotopy parameter")

    @property
    def needs_iterated(self):
        return self.kind in MILSTEIN_KINDS


def scheme_spec(kind, p=None, problem=None):
    """Build a SchemeSpec, resolving a default homotopy p from the problem.

    For homotopy kinds without an explicit p, uses
    p = |beta|/(|alpha| + |beta|) when the problem exposes those parameters,
    else p = 1.
    """
    if kind in HOMOTOPY_KINDS and p is None:
        from .model import default_homotopy_p

        p = default_homotopy_p(problem) if problem is not None else None
        if p is None:
            p = 1.0
    return SchemeSpec(kind=kind, p=p)


@dataclass
class LevelCache:
    """State-independent per-(problem, scheme, dt) quantities."""

    dt: float
    p: float  # effective homotopy parameter (1 for non-homotopy kinds)
    q: float  # 1 - p
    strategy: int
    exp_A: np.ndarray
    phi1_A: np.ndarray
    em_inv: np.ndarray
    pB: np.ndarray  # (m, d, d) effective linear diffusion p*B_i
    E_det: np.ndarray  # (A - 1/2 sum (pB_i)^2) dt
    Z_det: np.ndarray  # (-1/2 sum (pB_i)^2) dt
    om_diag: np.ndarray  # diag of E_det (diagonal strategies)
    z_diag: np.ndarray  # diag of Z_det
    pB_diag: np.ndarray  # (m, d) diagonals of pB_i


@dataclass
class StepContext:
    """Inputs of one step: state, increments, iterated integrals, caches."""

    u: np.ndarray
    dW: np.ndarray
    cache: LevelCache
    iterated: np.ndarray = None  # (m, m), inner index first


@dataclass
class PathResult:
    """Full trajectory plus the overflow-guard flag."""

    states: np.ndarray  # (N+1, d)
    blowup: bool
    blow_step: int = None


def build_cache(problem: SdeProblem, spec: SchemeSpec, dt: float) -> LevelCache:
    if dt <= 0:
        raise ValueError("dt must be positive")
    if spec.needs_iterated and not problem.has_jacobians:
        raise ValueError(f"{spec.kind} needs diffusion Jacobians (Dgs) on the problem")
    d, m = problem.d, problem.m
    p = spec.p if spec.kind in HOMOTOPY_KINDS else 1.0
    pB = p * problem.Bs
    exp_A = matexp.mat_exp(dt * problem.A)
    phi1_A = matexp.phi1(dt * problem.A)
    em_inv = np.linalg.inv(np.eye(d) - dt * problem.A)
    BB = np.zeros((d, d))
    for i in range(m):
        BB += pB[i] @ pB[i]
    Z_det = -0.5 * dt * BB
    E_det = dt * problem.A + Z_det

    b_zero = not np.any(problem.Bs)
    b_diag = all(matexp._is_diagonal(problem.Bs[i]) for i in range(m))
    if b_zero:
        strategy = STRAT_BZERO
    elif b_diag and matexp._is_diagonal(problem.A):
        strategy = STRAT_DIAG
    elif b_diag and problem.commutator_report.passed:
        strategy = STRAT_SPLIT
    else:
        strategy = STRAT_FULL
    return LevelCache(
        dt=dt,
        p=p,
        q=1.0 - p,
        strategy=strategy,
        exp_A=exp_A,
        phi1_A=phi1_A,
        em_inv=em_inv,
        pB=pB,
        E_det=E_det,
        Z_det=Z_det,
        om_diag=np.diagonal(E_det).copy(),
        z_diag=np.diagonal(Z_det).copy(),
        pB_diag=np.array([np.diagonal(pB[i]) for i in range(m)]),
    )


def _noise_exponent_diag(cache, dW):
    z = cache.z_diag.copy()
    for i in range(len(dW)):
        z += cache.pB_diag[i] * dW[i]
    return z


def _apply_omega(cache, dW, x):
    s = cache.strategy
    if s == STRAT_BZERO:
        return cache.exp_A @ x
    if s == STRAT_DIAG:
        om = cache.om_diag.copy()
        for i in range(len(dW)):
            om += cache.pB_diag[i] * dW[i]
        return np.exp(om) * x
    if s == STRAT_SPLIT:
        return cache.exp_A @ (np.exp(_noise_exponent_diag(cache, dW)) * x)
    E = cache.E_det.copy()
    for i in range(len(dW)):
        E += dW[i] * cache.pB[i]
    return matexp.mat_exp(E) @ x


def _apply_z(cache, dW, y):
    s = cache.strategy
    if s == STRAT_BZERO:
        return y.copy()
    if s in (STRAT_DIAG, STRAT_SPLIT):
        return np.exp(_noise_exponent_diag(cache, dW)) * y
    Z = cache.Z_det.copy()
    for i in range(len(dW)):
        Z += dW[i] * cache.pB[i]
    return matexp.mat_exp(Z) @ y


def _g_eff(problem, cache, u):
    """Effective diffusion nonlinearities g_i + (1-p) B_i u, shape (m, d).

    Returns None when they vanish identically (g = 0 and p = 1), which lets
    the stepping code skip exact-zero work.
    """
    m = problem.m
    if problem.gs is None and cache.q == 0.0:
        return None
    gv = np.empty((m, problem.d))
    for i in range(m):
        gv[i] = problem.diffusion(u, i)
        if cache.q != 0.0:
            gv[i] += cache.q * (problem.Bs[i] @ u)
    return gv


def _f_tilde_eff(problem, cache, u, gv):
    """Effective modified drift F - sum (p B_i) g^p_i."""
    ft = problem.drift(u).astype(float, copy=True)
    if gv is not None:
        for i in range(problem.m):
            ft -= cache.pB[i] @ gv[i]
    return ft


def _iterated_or_raise(spec, ctx):
    if ctx.iterated is None:
        raise ValueError(f"{spec.kind} needs iterated integrals but none were supplied")
    return ctx.iterated


def step(problem: SdeProblem, spec: SchemeSpec, ctx: StepContext) -> np.ndarray:
    """Advance one step; returns u_{n+1}. Pure in all inputs."""
    u, dW, c = ctx.u, ctx.dW, ctx.cache
    dt = c.dt
    kind = spec.kind
    m = problem.m

    if kind == "EM":
        x = u + dt * problem.drift(u)
        for i in range(m):
            x += (problem.Bs[i] @ u + problem.diffusion(u, i)) * dW[i]
        return c.em_inv @ x

    if kind == "SETD0":
        x = u + dt * problem.drift(u)
        for i in range(m):
            x += (problem.Bs[i] @ u + problem.diffusion(u, i)) * dW[i]
        return c.exp_A @ x

    if kind == "SETD1":
        x = u.astype(float, copy=True)
        for i in range(m):
            x += (problem.Bs[i] @ u + problem.diffusion(u, i)) * dW[i]
        return c.exp_A @ x + dt * (c.phi1_A @ problem.drift(u))

    if kind in ("EI0", "HomEI0"):
        gv = _g_eff(problem, c, u)
        x = u + dt * _f_tilde_eff(problem, c, u, gv)
        if gv is not None:
            for i in range(m):
                x += gv[i] * dW[i]
        return _apply_omega(c, dW, x)

    if kind in ("EI1", "EI2"):
        gv = _g_eff(problem, c, u)
        ft = _f_tilde_eff(problem, c, u, gv)
        x = u.astype(float, copy=True)
        if gv is not None:
            for i in range(m):
                x += gv[i] * dW[i]
        y = dt * (c.phi1_A @ ft)
        if kind == "EI1":
            return _apply_omega(c, dW, x) + _apply_z(c, dW, y)
        return _apply_omega(c, dW, x) + y

    if kind in ("MI0", "HomMI0"):
        I = _iterated_or_raise(spec, ctx)
        gv = _g_eff(problem, c, u)
        x = u + dt * _f_tilde_eff(problem, c, u, gv)
        if gv is not None:
            for i in range(m):
                x += gv[i] * dW[i]
            Gv = np.empty((m, problem.d))
            for l in range(m):
                Gv[l] = problem.Bs[l] @ u + problem.diffusion(u, l)
            for i in range(m):
                Dg = problem.jacobian(u, i)
                if c.q != 0.0:
                    Dg = Dg + c.q * problem.Bs[i]
                for l in range(m):
                    x += (Dg @ Gv[l] - c.pB[l] @ gv[i]) * I[l, i]
        return _apply_omega(c, dW, x)

    if kind in ("MilsteinClassical", "ExpMilstein"):
        I = _iterated_or_raise(spec, ctx)
        Gv = np.empty((m, problem.d))
        for l in range(m):
            Gv[l] = problem.Bs[l] @ u + problem.diffusion(u, l)
        if kind == "MilsteinClassical":
            x = u + dt * (problem.A @ u + problem.drift(u))
        else:
            x = u.astype(float, copy=True)
        for i in range(m):
            x += Gv[i] * dW[i]
        for i in range(m):
            DG = problem.Bs[i] + problem.jacobian(u, i)
            for l in range(m):
                x += (DG @ Gv[l]) * I[l, i]
        if kind == "MilsteinClassical":
            return x
        return c.exp_A @ x + dt * (c.phi1_A @ problem.drift(u))

    raise AssertionError(f"unhandled kind {kind}")


class PyPathRunner:
    """Pure-Python path integrator: a loop over :func:`step`."""

    backend = "python"

    def __init__(self, problem, spec, dt, guard=DEFAULT_GUARD):
        self.problem = problem
        self.spec = spec
        self.cache = build_cache(problem, spec, dt)
        self.guard = guard

    def run(self, dW, iterated, u0):
        problem, spec, cache, guard = self.problem, self.spec, self.cache, self.guard
        dW = np.asarray(dW, dtype=float)
        N = dW.shape[0]
        traj = np.empty((N + 1, problem.d))
        traj[0] = u0
        ctx = StepContext(u=np.asarray(u0, dtype=float).copy(), dW=None, cache=cache)
        for n in range(N):
            ctx.dW = dW[n]
            if iterated is not None:
                ctx.iterated = iterated[n]
            un = step(problem, spec, ctx)
            mx = float(np.max(np.abs(un)))
            if mx != mx or mx == np.inf:  # NaN or inf in the new state
                traj[n + 1 :] = ctx.u
                return PathResult(states=traj, blowup=True, blow_step=n)
            traj[n + 1] = un
            if mx > guard:
                traj[n + 2 :] = un
                return PathResult(states=traj, blowup=True, blow_step=n)
            ctx.u = un
        return PathResult(states=traj, blowup=False)


# ---------------------------------------------------------------------------
# Backend selection: compiled core if importable, pure Python otherwise.

_FORCED = os.environ.get("GBMEI_BACKEND", "").strip().lower()
if _FORCED in ("python", "py"):
    _core = None
elif _FORCED in ("compiled", "cython", "c", ""):
    try:
        from . import _core
    except ImportError:
        if _FORCED:
            raise
        _core = None
else:
    raise RuntimeError(f"GBMEI_BACKEND={_FORCED!r} not understood (use 'compiled' or 'python')")


def backend_name():
    """Which stepping backend integrate_path uses: 'compiled' or 'python'."""
    return "python" if _core is None else "compiled"


def path_runner(problem, spec, dt, guard=DEFAULT_GUARD, backend=None):
    """A reusable per-(problem, scheme, dt) integrator with a .run method.

    ``backend`` overrides the import-time choice ('compiled' or 'python');
    building the runner once and reusing it across samples amortises the
    cached factorisations.
    """
    if backend is None:
        backend = backend_name()
    if backend == "compiled":
        core = _core
        if core is None:
            # an explicit request bypasses the GBMEI_BACKEND=python default
            from . import _core as core
        return core.CyPathRunner(problem, spec, build_cache(problem, spec, dt), guard)
    if backend == "python":
        return PyPathRunner(problem, spec, dt, guard)
    raise ValueError(f"unknown backend {backend!r}")


def integrate_path(problem, spec, level, batch, guard=DEFAULT_GUARD, backend=None):
    """Integrate one sample path of ``batch`` at grid level ``level``.

    Returns a :class:`PathResult` with the state at every grid point,
    ``states[0] = u0``. Blowups (state norm beyond ``guard``, or a non-finite
    state) freeze the trajectory and set the flag instead of raising.
    """
    dW = batch.increments(level)
    iterated = batch.iterated_integrals(level) if spec.needs_iterated else None
    runner = path_runner(problem, spec, batch.grid.dt(level), guard, backend)
    return runner.run(dW, iterated, problem.u0)
