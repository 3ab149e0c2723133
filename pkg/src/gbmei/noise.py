"""Seedable Brownian increments on nested dyadic grids with iterated integrals.

One :class:`NoiseBatch` holds, for a single Monte-Carlo sample, the Wiener
increments dW and the iterated Ito integrals

    I[n, l, i]  ~  int_{t_n}^{t_{n+1}} int_{t_n}^{s} dW_l(r) dW_i(s)

on every grid level of a :class:`GridSpec`.  Everything is derived from one
realisation at the finest level: coarser increments are sums of their
children and coarser iterated integrals are obtained by the exact chain rule

    I_coarse[l, i] = sum_k I_k[l, i] + sum_k (W_l(t_k) - W_l(t_start)) dW_k[i],

never resampled, so every integrator (and the reference solution) sees the
same underlying path.

The symmetric part of I is forced from the increments,

    I[l, i] + I[i, l] = dW_l dW_i - delta_li h,      I[i, i] = (dW_i^2 - h)/2,

and only the antisymmetric part (the Levy area) is random beyond dW.  Areas
are sampled at the finest level by the truncated Fourier series of Kloeden,
Platen & Wright (1992),

    A = (h / 2 pi) sum_{k=1}^{K} [X_k (Y_k + sqrt(2/h) dW)^T
                                  - (Y_k + sqrt(2/h) dW) X_k^T] / k,

with X_k, Y_k iid standard normal m-vectors, plus an independent Gaussian
per entry whose variance equals the variance of the truncated tail, so the
conditional second moments of I given dW are exact for any K.

Randomness comes from a counter-based Philox stream keyed on
``(seed, sample)`` with a fixed draw order (increments first, then area
terms), which makes every batch a pure function of
``(seed, sample, m, grid, K)`` regardless of how many workers run.
"""

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import polygamma

DEFAULT_LEVY_TERMS = 30

_MAGIC = b"NBAT1"


@dataclass(frozen=True)
class GridSpec:
    """Nested uniform grids on [0, T]: step counts that all divide the finest."""

    T: float
    levels: tuple[int, ...]

    def __post_init__(self):
        if self.T <= 0:
            raise ValueError("T must be positive")
        levels = tuple(sorted(set(int(n) for n in self.levels)))
        if not levels or levels[0] < 1:
            raise ValueError("levels must be positive step counts")
        finest = levels[-1]
        for n in levels:
            if finest % n != 0:
                raise ValueError(f"level {n} does not divide the finest level {finest}")
        object.__setattr__(self, "levels", levels)

    @property
    def finest(self):
        return self.levels[-1]

    def dt(self, level):
        if level not in self.levels:
            raise ValueError(f"{level} is not a level of this grid")
        return self.T / level


@dataclass(frozen=True)
class NoiseBatch:
    """Per-sample Brownian data on every level of a grid.

    ``dW[N]`` has shape (N, m) and ``iterated[N]`` shape (N, m, m) with the
    inner integration index first: ``iterated[N][n, l, i]`` approximates
    int int dW_l(r) dW_i(s) over step n.
    """

    m: int
    grid: GridSpec
    K: int
    seed: int
    sample: int
    levy_sampled: bool
    dW: dict = field(repr=False)
    iterated: dict = field(repr=False)

    def increments(self, level):
        return self.dW[level]

    def iterated_integrals(self, level):
        return self.iterated[level]

    def brownian_path(self, level=None):
        """W values at the grid points of ``level`` (default finest), shape (N+1, m)."""
        if level is None:
            level = self.grid.finest
        inc = self.dW[level]
        W = np.zeros((inc.shape[0] + 1, self.m))
        np.cumsum(inc, axis=0, out=W[1:])
        return W


def _rng_for(seed, sample):
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(sample & 0xFFFFFFFFFFFFFFFF)])
    return np.random.Generator(np.random.Philox(key=key))


def _forced_symmetric_part(dW, h):
    """(N, m, m) array 0.5*(dW_l dW_i - delta_li h) built from increments."""
    sym = 0.5 * np.einsum("nl,ni->nli", dW, dW)
    idx = np.arange(dW.shape[1])
    sym[:, idx, idx] = 0.5 * (dW[:, idx] ** 2 - h)
    return sym


def _sample_levy_areas(rng, dW, h, K):
    """Antisymmetric Levy-area matrices for each step, shape (N, m, m).

    Truncated KPW Fourier series with K terms plus a per-entry Gaussian tail
    carrying the exact remaining conditional variance. K = 0 degenerates to
    the tail alone (entrywise variance-exact, cross-entry correlations lost).
    """
    N, m = dW.shape
    S = np.zeros((N, m, m))
    scaled = np.sqrt(2.0 / h) * dW
    for k in range(1, K + 1):
        Xk = rng.standard_normal((N, m))
        Yk = rng.standard_normal((N, m)) + scaled
        S += (np.einsum("nl,ni->nli", Xk, Yk) - np.einsum("nl,ni->nli", Yk, Xk)) / k
    A = (h / (2.0 * np.pi)) * S
    # Tail of sum_{k>K} 1/k^2; conditional variance of each truncated entry is
    # (h/2pi)^2 * tail * (2 + (2/h)(dW_l^2 + dW_i^2)).
    tail = float(polygamma(1, K + 1))
    npairs = m * (m - 1) // 2
    G = rng.standard_normal((N, npairs))
    col = 0
    for l in range(m):
        for i in range(l + 1, m):
            var = (h / (2.0 * np.pi)) ** 2 * tail * (2.0 + (2.0 / h) * (dW[:, l] ** 2 + dW[:, i] ** 2))
            t = np.sqrt(var) * G[:, col]
            A[:, l, i] += t
            A[:, i, l] -= t
            col += 1
    return A


def coarsen_increments(fine, factor):
    """Sum blocks of ``factor`` consecutive fine increments into coarse ones."""
    fine = np.asarray(fine)
    N = fine.shape[0]
    if factor < 1 or N % factor != 0:
        raise ValueError(f"factor {factor} does not divide {N} steps")
    return fine.reshape(N // factor, factor, *fine.shape[1:]).sum(axis=1)


def aggregate_iterated(fine_dW, fine_I, factor, h_fine):
    """Aggregate fine-step iterated integrals over blocks of ``factor`` children.

    Implements the chain rule for nested steps and then re-forces the
    symmetric part from the coarse increments, so the diagonal and
    symmetric-part identities hold at the coarse level by construction.
    """
    fine_dW = np.asarray(fine_dW)
    fine_I = np.asarray(fine_I)
    N, m = fine_dW.shape
    if factor == 1:
        return fine_I.copy()
    if factor < 1 or N % factor != 0:
        raise ValueError(f"factor {factor} does not divide {N} steps")
    Nc = N // factor
    dWb = fine_dW.reshape(Nc, factor, m)
    Ib = fine_I.reshape(Nc, factor, m, m)
    # w[n, k] = W(t_k) - W(t_block_start): exclusive prefix sums inside blocks.
    w = np.zeros_like(dWb)
    np.cumsum(dWb[:, :-1], axis=1, out=w[:, 1:])
    chain = Ib.sum(axis=1) + np.einsum("nkl,nki->nli", w, dWb)
    area = 0.5 * (chain - chain.transpose(0, 2, 1))
    coarse_dW = dWb.sum(axis=1)
    return _forced_symmetric_part(coarse_dW, factor * h_fine) + area


def generate(seed, sample, m, grid, K=DEFAULT_LEVY_TERMS, levy_areas=True):
    """Synthesise one sample's noise across all levels of ``grid``.

    Finest-level increments are iid N(0, dt_fine); iterated integrals are
    composed from the forced symmetric part plus sampled Levy areas (or zero
    areas when ``levy_areas`` is False or ``m == 1``, in which case I equals
    the symmetric-part identity -- exact for commutative noise).  Coarser
    levels are aggregated, never resampled.
    """
    if K < 0:
        raise ValueError("K must be >= 0")
    if m < 1:
        raise ValueError("m must be >= 1")
    if not isinstance(grid, GridSpec):
        raise TypeError("grid must be a GridSpec")
    rng = _rng_for(seed, sample)
    Nf = grid.finest
    h_f = grid.T / Nf
    dW_f = np.sqrt(h_f) * rng.standard_normal((Nf, m))
    sym_f = _forced_symmetric_part(dW_f, h_f)
    sample_areas = bool(levy_areas) and m >= 2
    if sample_areas:
        I_f = sym_f + _sample_levy_areas(rng, dW_f, h_f, K)
    else:
        I_f = sym_f
    dW = {Nf: dW_f}
    iterated = {Nf: I_f}
    for N in grid.levels[:-1]:
        c = Nf // N
        dW[N] = coarsen_increments(dW_f, c)
        iterated[N] = aggregate_iterated(dW_f, I_f, c, h_f)
    return NoiseBatch(
        m=m,
        grid=grid,
        K=int(K),
        seed=int(seed),
        sample=int(sample),
        levy_sampled=sample_areas,
        dW=dW,
        iterated=iterated,
    )


def dump(batch, path):
    """Write a NoiseBatch to ``path``; exact (bitwise) round trip with :func:`load`.

    Layout: magic ``NBAT1``; little-endian int64 m, n_levels, K, seed, sample,
    levy flag; float64 T; int64 level step counts; then per level (ascending)
    the dW block (N*m) and iterated block (N*m*m) as little-endian float64.
    """
    levels = batch.grid.levels
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(
            struct.pack(
                "<6q", batch.m, len(levels), batch.K, batch.seed, batch.sample, int(batch.levy_sampled)
            )
        )
        f.write(struct.pack("<d", batch.grid.T))
        f.write(np.asarray(levels, dtype="<i8").tobytes())
        for N in levels:
            f.write(np.ascontiguousarray(batch.dW[N], dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(batch.iterated[N], dtype="<f8").tobytes())


def load(path):
    """Read a NoiseBatch written by :func:`dump`."""
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        m, n_levels, K, seed, sample, levy = struct.unpack("<6q", f.read(48))
        (T,) = struct.unpack("<d", f.read(8))
        levels = np.frombuffer(f.read(8 * n_levels), dtype="<i8")
        grid = GridSpec(T=T, levels=tuple(int(n) for n in levels))
        dW = {}
        iterated = {}
        for N in grid.levels:
            dW[N] = np.frombuffer(f.read(8 * N * m), dtype="<f8").reshape(N, m).copy()
            iterated[N] = (
                np.frombuffer(f.read(8 * N * m * m), dtype="<f8").reshape(N, m, m).copy()
            )
    return NoiseBatch(
        m=int(m),
        grid=grid,
        K=int(K),
        seed=int(seed),
        sample=int(sample),
        levy_sampled=bool(levy),
        dW=dW,
        iterated=iterated,
    )
