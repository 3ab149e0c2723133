# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stepping kernels for the integrators in :mod:`gbmei.schemes`.

One :class:`CyPathRunner` integrates whole sample paths in C: native
evaluators for the built-in problems' drift/diffusion fields (arbitrary
Python callables still work through a slower wrapper path), a dense
scaling-and-squaring matrix exponential for the per-step GBM propagator in
the waived non-commuting regime, and the same overflow-guard semantics as
the pure backend.

Every operation is ordered exactly as in ``schemes.step`` and the module is
compiled with ``-ffp-contract=off``, so the two backends agree to rounding.
"""

from libc.math cimport ceil, exp, fabs, isfinite, ldexp, log2

import numpy as np

__all__ = ["CyPathRunner", "expm"]

# ---------------------------------------------------------------------------
# Small dense linear algebra on row-major double* blocks.

cdef inline void _matvec(double* M, double* x, double* out, int d) noexcept:
    cdef int r, c
    cdef double s
    for r in range(d):
        s = 0.0
        for c in range(d):
            s += M[r * d + c] * x[c]
        out[r] = s


cdef void _matmul(double* A, double* B, double* C, int d) noexcept:
    cdef int i, j, k
    cdef double s
    for i in range(d):
        for j in range(d):
            s = 0.0
            for k in range(d):
                s += A[i * d + k] * B[k * d + j]
            C[i * d + j] = s


cdef double _norm1(double* A, int d) noexcept:
    cdef int i, j
    cdef double s, best = 0.0
    for j in range(d):
        s = 0.0
        for i in range(d):
            s += fabs(A[i * d + j])
        if s > best:
            best = s
    return best


cdef int _solve(double* M, double* B, int d) noexcept:
    """Solve M X = B for the d x d block X (overwrites B); M is destroyed.

    Gaussian elimination with partial pivoting; returns -1 on singular M.
    """
    cdef int i, j, k, piv
    cdef double amax, av, f, tmp
    for k in range(d):
        piv = k
        amax = fabs(M[k * d + k])
        for i in range(k + 1, d):
            av = fabs(M[i * d + k])
            if av > amax:
                amax = av
                piv = i
        if amax == 0.0:
            return -1
        if piv != k:
            for j in range(k, d):
                tmp = M[k * d + j]
                M[k * d + j] = M[piv * d + j]
                M[piv * d + j] = tmp
            for j in range(d):
                tmp = B[k * d + j]
                B[k * d + j] = B[piv * d + j]
                B[piv * d + j] = tmp
        for i in range(k + 1, d):
            f = M[i * d + k] / M[k * d + k]
            M[i * d + k] = 0.0
            for j in range(k + 1, d):
                M[i * d + j] -= f * M[k * d + j]
            for j in range(d):
                B[i * d + j] -= f * B[k * d + j]
    for k in range(d - 1, -1, -1):
        for j in range(d):
            tmp = B[k * d + j]
            for i in range(k + 1, d):
                tmp -= M[k * d + i] * B[i * d + j]
            B[k * d + j] = tmp / M[k * d + k]
    return 0


# ---------------------------------------------------------------------------
# Matrix exponential: Higham (2005) scaling and squaring with Pade [3/5/7/9/13].

cdef double _THETA3 = 1.495585217958292e-2
cdef double _THETA5 = 2.539398330063230e-1
cdef double _THETA7 = 9.504178996162932e-1
cdef double _THETA9 = 2.097847961257068
cdef double _THETA13 = 5.371920351148152


cdef int _expm(double* Ain, double* out, int d, double* wk) noexcept:
    """out = exp(Ain). ``wk`` must hold at least 8*d*d doubles."""
    cdef int i, j, k, s, degree, dd = d * d
    cdef double nrm, f
    cdef double* AS = wk
    cdef double* A2 = wk + dd
    cdef double* A4 = wk + 2 * dd
    cdef double* A6 = wk + 3 * dd
    cdef double* A8 = wk + 4 * dd
    cdef double* U = wk + 5 * dd
    cdef double* V = wk + 6 * dd
    cdef double* T = wk + 7 * dd
    cdef double* b
    cdef double[4] b3 = [120.0, 60.0, 12.0, 1.0]
    cdef double[6] b5 = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0]
    cdef double[8] b7 = [
        17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
    ]
    cdef double[10] b9 = [
        17643225600.0, 8821612800.0, 2075673600.0, 302702400.0, 30270240.0,
        2162160.0, 110880.0, 3960.0, 90.0, 1.0,
    ]
    cdef double[14] b13 = [
        64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
        1187353796428800.0, 129060195264000.0, 10559470521600.0, 670442572800.0,
        33522128640.0, 1323241920.0, 40840800.0, 960960.0, 16380.0, 182.0, 1.0,
    ]

    if d == 1:
        out[0] = exp(Ain[0])
        return 0

    for i in range(dd):
        AS[i] = Ain[i]
    nrm = _norm1(AS, d)
    s = 0
    if nrm > _THETA13:
        s = <int> ceil(log2(nrm / _THETA13))
        if s < 0:
            s = 0
        f = ldexp(1.0, -s)
        for i in range(dd):
            AS[i] *= f
        nrm = nrm * f

    if nrm <= _THETA3:
        degree = 3
        b = b3
    elif nrm <= _THETA5:
        degree = 5
        b = b5
    elif nrm <= _THETA7:
        degree = 7
        b = b7
    elif nrm <= _THETA9:
        degree = 9
        b = b9
    else:
        degree = 13
        b = b13

    _matmul(AS, AS, A2, d)
    if degree >= 5:
        _matmul(A2, A2, A4, d)
    if degree >= 7:
        _matmul(A2, A4, A6, d)
    if degree == 9:
        _matmul(A4, A4, A8, d)

    if degree == 13:
        # T = b13 A6 + b11 A4 + b9 A2; U = AS (A6 T + b7 A6 + b5 A4 + b3 A2 + b1 I)
        for i in range(dd):
            T[i] = b[13] * A6[i] + b[11] * A4[i] + b[9] * A2[i]
        _matmul(A6, T, A8, d)
        for i in range(dd):
            A8[i] += b[7] * A6[i] + b[5] * A4[i] + b[3] * A2[i]
        for i in range(d):
            A8[i * d + i] += b[1]
        _matmul(AS, A8, U, d)
        for i in range(dd):
            T[i] = b[12] * A6[i] + b[10] * A4[i] + b[8] * A2[i]
        _matmul(A6, T, V, d)
        for i in range(dd):
            V[i] += b[6] * A6[i] + b[4] * A4[i] + b[2] * A2[i]
        for i in range(d):
            V[i * d + i] += b[0]
    else:
        # T = sum of odd coefficients times even powers; U = AS T.
        for i in range(dd):
            T[i] = b[3] * A2[i]
        if degree >= 5:
            for i in range(dd):
                T[i] += b[5] * A4[i]
        if degree >= 7:
            for i in range(dd):
                T[i] += b[7] * A6[i]
        if degree == 9:
            for i in range(dd):
                T[i] += b[9] * A8[i]
        for i in range(d):
            T[i * d + i] += b[1]
        _matmul(AS, T, U, d)
        for i in range(dd):
            V[i] = b[2] * A2[i]
        if degree >= 5:
            for i in range(dd):
                V[i] += b[4] * A4[i]
        if degree >= 7:
            for i in range(dd):
                V[i] += b[6] * A6[i]
        if degree == 9:
            for i in range(dd):
                V[i] += b[8] * A8[i]
        for i in range(d):
            V[i * d + i] += b[0]

    # Solve (V - U) X = (V + U).
    for i in range(dd):
        T[i] = V[i] - U[i]
        out[i] = V[i] + U[i]
    if _solve(T, out, d) != 0:
        return -1
    for k in range(s):
        _matmul(out, out, U, d)
        for i in range(dd):
            out[i] = U[i]
    return 0


def expm(M):
    """Python entry point of the compiled matrix exponential (for tests)."""
    A = np.ascontiguousarray(M, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("expects a square matrix")
    cdef int d = A.shape[0]
    out = np.empty((d, d), dtype=np.float64)
    wk = np.empty(8 * d * d, dtype=np.float64)
    cdef double[:, ::1] av = A
    cdef double[:, ::1] ov = out
    cdef double[::1] wv = wk
    if _expm(&av[0, 0], &ov[0, 0], d, &wv[0]) != 0:
        raise RuntimeError("matrix exponential failed (singular Pade denominator)")
    return out


# ---------------------------------------------------------------------------
# Field evaluation: native built-ins or wrapped Python callables.

cdef int TAG_PY = 0
cdef int TAG_GL = 1
cdef int TAG_DIAG4 = 2
cdef int TAG_NONCOMM4 = 3
cdef int TAG_STIFF2 = 4

_NATIVE_TAGS = {"gl": 1, "diag4": 2, "noncomm4": 3, "stiff2": 4}


cdef class FieldEval:
    """Evaluates F, g_i and Dg_i of one problem into flat C buffers."""

    cdef int tag, d, m
    cdef bint f_zero, g_zero
    cdef double c0, c1
    cdef object pyF, pygs, pyDgs
    cdef object ubuf

    def __init__(self, problem):
        self.d = problem.d
        self.m = problem.m
        self.f_zero = problem.F is None
        self.g_zero = problem.gs is None
        self.pyF = problem.F
        self.pygs = problem.gs
        self.pyDgs = problem.Dgs
        self.ubuf = np.zeros(problem.d)
        self.tag = TAG_PY
        self.c0 = 0.0
        self.c1 = 0.0
        if problem.native is not None:
            name, params = problem.native
            self.tag = _NATIVE_TAGS.get(name, TAG_PY)
            if len(params) > 0:
                self.c0 = params[0]
            if len(params) > 1:
                self.c1 = params[1]

    cdef object _to_ubuf(self, double* u):
        cdef double[::1] bv = self.ubuf
        cdef int j
        for j in range(self.d):
            bv[j] = u[j]
        return self.ubuf

    cdef int evalF(self, double* u, double* out) except -1:
        cdef int j, d = self.d
        cdef double[::1] av
        if self.f_zero:
            for j in range(d):
                out[j] = 0.0
            return 0
        if self.tag == TAG_GL:
            out[0] = -(u[0] * u[0] * u[0])
            return 0
        if self.tag == TAG_DIAG4 or self.tag == TAG_NONCOMM4:
            for j in range(d):
                out[j] = u[j] / (1.0 + fabs(u[j]))
            return 0
        av = np.ascontiguousarray(np.asarray(self.pyF(self._to_ubuf(u)), dtype=np.float64))
        for j in range(d):
            out[j] = av[j]
        return 0

    cdef int evalG(self, double* u, double* out) except -1:
        """Original diffusion nonlinearities, row i holding g_i(u)."""
        cdef int i, j, d = self.d, m = self.m
        cdef double den
        cdef double[::1] av
        for j in range(m * d):
            out[j] = 0.0
        if self.g_zero:
            return 0
        if self.tag == TAG_DIAG4:
            for i in range(m):
                den = 1.0 + u[i] * u[i]
                out[i * d + i] = self.c0 / den
            return 0
        if self.tag == TAG_NONCOMM4:
            for i in range(m - 1):
                out[i * d + i + 1] = -self.c0 * u[i]
            return 0
        if self.tag == TAG_STIFF2:
            out[0] = self.c0 * u[1]
            out[1] = self.c0 * u[0]
            out[d] = -self.c1 * u[1]
            out[d + 1] = -self.c1 * u[0]
            return 0
        ub = self._to_ubuf(u)
        for i in range(m):
            av = np.ascontiguousarray(np.asarray(self.pygs[i](ub), dtype=np.float64))
            for j in range(d):
                out[i * d + j] = av[j]
        return 0

    cdef int evalDg(self, double* u, double* out) except -1:
        """Jacobians of g_i, block i holding the row-major d x d matrix."""
        cdef int i, j, k, d = self.d, m = self.m, dd = self.d * self.d
        cdef double den
        cdef double[:, ::1] jv
        for j in range(m * dd):
            out[j] = 0.0
        if self.g_zero:
            return 0
        if self.tag == TAG_DIAG4:
            for i in range(m):
                den = 1.0 + u[i] * u[i]
                out[i * dd + i * d + i] = -2.0 * self.c0 * u[i] / (den * den)
            return 0
        if self.tag == TAG_NONCOMM4:
            for i in range(m - 1):
                out[i * dd + (i + 1) * d + i] = -self.c0
            return 0
        if self.tag == TAG_STIFF2:
            out[0 * dd + 0 * d + 1] = self.c0
            out[0 * dd + 1 * d + 0] = self.c0
            out[1 * dd + 0 * d + 1] = -self.c1
            out[1 * dd + 1 * d + 0] = -self.c1
            return 0
        if self.pyDgs is None:
            raise ValueError("problem has no diffusion Jacobians (Dgs)")
        ub = self._to_ubuf(u)
        for i in range(m):
            jv = np.ascontiguousarray(np.asarray(self.pyDgs[i](ub), dtype=np.float64))
            for j in range(d):
                for k in range(d):
                    out[i * dd + j * d + k] = jv[j, k]
        return 0


# ---------------------------------------------------------------------------
# Path runner.

cdef int STRAT_BZERO = 0
cdef int STRAT_DIAG = 1
cdef int STRAT_SPLIT = 2
cdef int STRAT_FULL = 3

cdef int K_EM = 0
cdef int K_SETD0 = 1
cdef int K_SETD1 = 2
cdef int K_MILCLASSIC = 3
cdef int K_EXPMIL = 4
cdef int K_EI0 = 5
cdef int K_EI1 = 6
cdef int K_EI2 = 7
cdef int K_HOMEI0 = 8
cdef int K_MI0 = 9
cdef int K_HOMMI0 = 10


cdef class CyPathRunner:
    """Compiled path integrator; drop-in peer of schemes.PyPathRunner."""

    cdef FieldEval field
    cdef int kind, strategy, d, m
    cdef bint needs_iter
    cdef double dt, p, q, guard
    cdef str kind_name
    cdef object _PathResult
    cdef double[:, ::1] A, expA, phi1A, emInv, E_det, Z_det, pB_diag
    cdef double[:, :, ::1] pB, Bs
    cdef double[::1] om_diag, z_diag
    # work buffers
    cdef double[::1] _u, _un, _x, _fv, _ft, _y, _t1, _t2, _t3, _om
    cdef double[::1] _graw, _gv, _Gv, _Dg, _Dgq
    cdef double[::1] _E, _Om, _wk

    def __init__(self, problem, spec, cache, double guard):
        from .schemes import KIND_IDS, PathResult

        self._PathResult = PathResult
        self.kind = KIND_IDS[spec.kind]
        self.kind_name = spec.kind
        self.needs_iter = spec.needs_iterated
        self.field = FieldEval(problem)
        self.d = problem.d
        self.m = problem.m
        self.dt = cache.dt
        self.p = cache.p
        self.q = cache.q
        self.guard = guard
        self.strategy = cache.strategy
        cont = lambda a: np.ascontiguousarray(a, dtype=np.float64)
        self.A = cont(problem.A)
        self.Bs = cont(problem.Bs)
        self.pB = cont(cache.pB)
        self.expA = cont(cache.exp_A)
        self.phi1A = cont(cache.phi1_A)
        self.emInv = cont(cache.em_inv)
        self.E_det = cont(cache.E_det)
        self.Z_det = cont(cache.Z_det)
        self.pB_diag = cont(cache.pB_diag)
        self.om_diag = cont(cache.om_diag)
        self.z_diag = cont(cache.z_diag)
        d, m = self.d, self.m
        self._u = np.zeros(d)
        self._un = np.zeros(d)
        self._x = np.zeros(d)
        self._fv = np.zeros(d)
        self._ft = np.zeros(d)
        self._y = np.zeros(d)
        self._t1 = np.zeros(d)
        self._t2 = np.zeros(d)
        self._t3 = np.zeros(d)
        self._om = np.zeros(d)
        self._graw = np.zeros(m * d)
        self._gv = np.zeros(m * d)
        self._Gv = np.zeros(m * d)
        self._Dg = np.zeros(m * d * d)
        self._Dgq = np.zeros(d * d)
        self._E = np.zeros(d * d)
        self._Om = np.zeros(d * d)
        self._wk = np.zeros(8 * d * d)

    @property
    def backend(self):
        return "compiled"

    cdef void _noise_diag(self, double* dw, double* z) noexcept:
        cdef int i, j, d = self.d, m = self.m
        for j in range(d):
            z[j] = self.z_diag[j]
        for i in range(m):
            for j in range(d):
                z[j] += self.pB_diag[i, j] * dw[i]

    cdef int _omega(self, double* dw, double* x, double* out) except -1:
        cdef int i, j, r, c, d = self.d, m = self.m
        cdef double* E = &self._E[0]
        cdef double* Om = &self._Om[0]
        cdef double* t1 = &self._t1[0]
        if self.strategy == STRAT_BZERO:
            _matvec(&self.expA[0, 0], x, out, d)
            return 0
        if self.strategy == STRAT_DIAG:
            for j in range(d):
                t1[j] = self.om_diag[j]
            for i in range(m):
                for j in range(d):
                    t1[j] += self.pB_diag[i, j] * dw[i]
            for j in range(d):
                out[j] = exp(t1[j]) * x[j]
            return 0
        if self.strategy == STRAT_SPLIT:
            self._noise_diag(dw, t1)
            for j in range(d):
                t1[j] = exp(t1[j]) * x[j]
            _matvec(&self.expA[0, 0], t1, out, d)
            return 0
        for r in range(d):
            for c in range(d):
                E[r * d + c] = self.E_det[r, c]
        for i in range(m):
            for r in range(d):
                for c in range(d):
                    E[r * d + c] += dw[i] * self.pB[i, r, c]
        if _expm(E, Om, d, &self._wk[0]) != 0:
            raise RuntimeError("propagator exponential failed")
        _matvec(Om, x, out, d)
        return 0

    cdef int _zap(self, double* dw, double* y, double* out) except -1:
        cdef int i, j, r, c, d = self.d, m = self.m
        cdef double* E = &self._E[0]
        cdef double* Om = &self._Om[0]
        cdef double* t1 = &self._t1[0]
        if self.strategy == STRAT_BZERO:
            for j in range(d):
                out[j] = y[j]
            return 0
        if self.strategy == STRAT_DIAG or self.strategy == STRAT_SPLIT:
            self._noise_diag(dw, t1)
            for j in range(d):
                out[j] = exp(t1[j]) * y[j]
            return 0
        for r in range(d):
            for c in range(d):
                E[r * d + c] = self.Z_det[r, c]
        for i in range(m):
            for r in range(d):
                for c in range(d):
                    E[r * d + c] += dw[i] * self.pB[i, r, c]
        if _expm(E, Om, d, &self._wk[0]) != 0:
            raise RuntimeError("propagator exponential failed")
        _matvec(Om, y, out, d)
        return 0

    cdef int _step(self, double* u, double* dw, double* In, double* un) except -1:
        cdef int i, j, l, r, c, d = self.d, m = self.m, dd = self.d * self.d
        cdef int kind = self.kind
        cdef double dt = self.dt, q = self.q, w
        cdef double* x = &self._x[0]
        cdef double* fv = &self._fv[0]
        cdef double* ft = &self._ft[0]
        cdef double* y = &self._y[0]
        cdef double* t1 = &self._t1[0]
        cdef double* t2 = &self._t2[0]
        cdef double* t3 = &self._t3[0]
        cdef double* graw = &self._graw[0]
        cdef double* gv = &self._gv[0]
        cdef double* Gv = &self._Gv[0]
        cdef double* Dg = &self._Dg[0]
        cdef double* Dgq = &self._Dgq[0]

        if kind == K_EM or kind == K_SETD0 or kind == K_SETD1:
            self.field.evalF(u, fv)
            if kind == K_SETD1:
                for j in range(d):
                    x[j] = u[j]
            else:
                for j in range(d):
                    x[j] = u[j] + dt * fv[j]
            self.field.evalG(u, graw)
            for i in range(m):
                _matvec(&self.Bs[i, 0, 0], u, t1, d)
                for j in range(d):
                    x[j] += (t1[j] + graw[i * d + j]) * dw[i]
            if kind == K_EM:
                _matvec(&self.emInv[0, 0], x, un, d)
            elif kind == K_SETD0:
                _matvec(&self.expA[0, 0], x, un, d)
            else:
                _matvec(&self.expA[0, 0], x, t2, d)
                _matvec(&self.phi1A[0, 0], fv, t3, d)
                for j in range(d):
                    un[j] = t2[j] + dt * t3[j]
            return 0

        if kind == K_EI0 or kind == K_HOMEI0 or kind == K_EI1 or kind == K_EI2 \
                or kind == K_MI0 or kind == K_HOMMI0:
            self.field.evalG(u, graw)
            for j in range(m * d):
                gv[j] = graw[j]
            if q != 0.0:
                for i in range(m):
                    _matvec(&self.Bs[i, 0, 0], u, t1, d)
                    for j in range(d):
                        gv[i * d + j] += q * t1[j]
            self.field.evalF(u, ft)
            for i in range(m):
                _matvec(&self.pB[i, 0, 0], gv + i * d, t1, d)
                for j in range(d):
                    ft[j] -= t1[j]
            if kind == K_EI1 or kind == K_EI2:
                for j in range(d):
                    x[j] = u[j]
            else:
                for j in range(d):
                    x[j] = u[j] + dt * ft[j]
            for i in range(m):
                for j in range(d):
                    x[j] += gv[i * d + j] * dw[i]
            if kind == K_MI0 or kind == K_HOMMI0:
                self.field.evalDg(u, Dg)
                for l in range(m):
                    _matvec(&self.Bs[l, 0, 0], u, t1, d)
                    for j in range(d):
                        Gv[l * d + j] = t1[j] + graw[l * d + j]
                for i in range(m):
                    for j in range(dd):
                        Dgq[j] = Dg[i * dd + j]
                    if q != 0.0:
                        for r in range(d):
                            for c in range(d):
                                Dgq[r * d + c] += q * self.Bs[i, r, c]
                    for l in range(m):
                        _matvec(Dgq, Gv + l * d, t1, d)
                        _matvec(&self.pB[l, 0, 0], gv + i * d, t2, d)
                        w = In[l * m + i]
                        for j in range(d):
                            x[j] += (t1[j] - t2[j]) * w
                self._omega(dw, x, un)
                return 0
            if kind == K_EI0 or kind == K_HOMEI0:
                self._omega(dw, x, un)
                return 0
            # EI1 / EI2
            _matvec(&self.phi1A[0, 0], ft, t1, d)
            for j in range(d):
                y[j] = dt * t1[j]
            self._omega(dw, x, t2)
            if kind == K_EI1:
                self._zap(dw, y, t3)
                for j in range(d):
                    un[j] = t2[j] + t3[j]
            else:
                for j in range(d):
                    un[j] = t2[j] + y[j]
            return 0

        if kind == K_MILCLASSIC or kind == K_EXPMIL:
            self.field.evalG(u, graw)
            for l in range(m):
                _matvec(&self.Bs[l, 0, 0], u, t1, d)
                for j in range(d):
                    Gv[l * d + j] = t1[j] + graw[l * d + j]
            self.field.evalF(u, fv)
            if kind == K_MILCLASSIC:
                _matvec(&self.A[0, 0], u, t1, d)
                for j in range(d):
                    x[j] = u[j] + dt * (t1[j] + fv[j])
            else:
                for j in range(d):
                    x[j] = u[j]
            for i in range(m):
                for j in range(d):
                    x[j] += Gv[i * d + j] * dw[i]
            self.field.evalDg(u, Dg)
            for i in range(m):
                for r in range(d):
                    for c in range(d):
                        Dgq[r * d + c] = self.Bs[i, r, c] + Dg[i * dd + r * d + c]
                for l in range(m):
                    _matvec(Dgq, Gv + l * d, t1, d)
                    w = In[l * m + i]
                    for j in range(d):
                        x[j] += t1[j] * w
            if kind == K_MILCLASSIC:
                for j in range(d):
                    un[j] = x[j]
            else:
                _matvec(&self.expA[0, 0], x, t2, d)
                _matvec(&self.phi1A[0, 0], fv, t3, d)
                for j in range(d):
                    un[j] = t2[j] + dt * t3[j]
            return 0

        raise AssertionError(f"unhandled kind id {kind}")

    def run(self, dW, iterated, u0):
        cdef double[:, ::1] dWv = np.ascontiguousarray(dW, dtype=np.float64)
        cdef int N = dWv.shape[0]
        cdef int d = self.d, m = self.m
        cdef int n, j, r
        cdef bint ok
        cdef double mx, av
        if self.needs_iter and iterated is None:
            raise ValueError(
                f"{self.kind_name} needs iterated integrals but none were supplied"
            )
        cdef double[:, :, ::1] Iv
        cdef double* In = NULL
        if iterated is not None:
            Iv = np.ascontiguousarray(iterated, dtype=np.float64)
        traj_arr = np.empty((N + 1, d), dtype=np.float64)
        cdef double[:, ::1] traj = traj_arr
        cdef double[::1] u = self._u
        cdef double[::1] un = self._un
        u0v = np.ascontiguousarray(u0, dtype=np.float64)
        cdef double[::1] u0m = u0v
        for j in range(d):
            u[j] = u0m[j]
            traj[0, j] = u0m[j]
        for n in range(N):
            if iterated is not None:
                In = &Iv[n, 0, 0]
            self._step(&u[0], &dWv[n, 0], In, &un[0])
            ok = True
            mx = 0.0
            for j in range(d):
                av = un[j]
                if not isfinite(av):
                    ok = False
                    break
                av = fabs(av)
                if av > mx:
                    mx = av
            if not ok:
                for r in range(n + 1, N + 1):
                    for j in range(d):
                        traj[r, j] = u[j]
                return self._PathResult(states=traj_arr, blowup=True, blow_step=n)
            for j in range(d):
                traj[n + 1, j] = un[j]
            if mx > self.guard:
                for r in range(n + 2, N + 1):
                    for j in range(d):
                        traj[r, j] = un[j]
                return self._PathResult(states=traj_arr, blowup=True, blow_step=n)
            for j in range(d):
                u[j] = un[j]
        return self._PathResult(states=traj_arr, blowup=False)
