import numpy as np
import pytest
from scipy import stats

from gbmei import noise


def test_gridspec_validation():
    g = noise.GridSpec(T=1.0, levels=(64, 16, 32))
    assert g.levels == (16, 32, 64)
    assert g.finest == 64
    assert g.dt(16) == 1.0 / 16
    with pytest.raises(ValueError):
        noise.GridSpec(T=1.0, levels=(16, 24))  # 16 does not divide the finest 24
    with pytest.raises(ValueError):
        noise.GridSpec(T=-1.0, levels=(4,))
    with pytest.raises(ValueError):
        g.dt(5)


def test_generate_is_deterministic():
    grid = noise.GridSpec(T=1.0, levels=(4, 16))
    a = noise.generate(123, 7, 3, grid, K=5)
    b = noise.generate(123, 7, 3, grid, K=5)
    for N in grid.levels:
        np.testing.assert_array_equal(a.dW[N], b.dW[N])
        np.testing.assert_array_equal(a.iterated[N], b.iterated[N])
    c = noise.generate(123, 8, 3, grid, K=5)
    assert not np.array_equal(a.dW[16], c.dW[16])


def test_increments_independent_of_levy_settings():
    # dW is drawn first, so K and the area flag never shift the path
    grid = noise.GridSpec(T=1.0, levels=(8, 32))
    a = noise.generate(5, 1, 2, grid, K=3, levy_areas=True)
    b = noise.generate(5, 1, 2, grid, K=50, levy_areas=True)
    c = noise.generate(5, 1, 2, grid, K=3, levy_areas=False)
    np.testing.assert_array_equal(a.dW[32], b.dW[32])
    np.testing.assert_array_equal(a.dW[32], c.dW[32])


def test_finest_path_independent_of_ladder():
    # adding or removing coarse levels must not change the finest realisation
    a = noise.generate(3, 9, 2, noise.GridSpec(T=1.0, levels=(8, 64)), K=6)
    b = noise.generate(3, 9, 2, noise.GridSpec(T=1.0, levels=(16, 32, 64)), K=6)
    c = noise.generate(3, 9, 2, noise.GridSpec(T=1.0, levels=(64,)), K=6)
    np.testing.assert_array_equal(a.dW[64], b.dW[64])
    np.testing.assert_array_equal(a.dW[64], c.dW[64])
    np.testing.assert_array_equal(a.iterated[64], b.iterated[64])


def test_diagonal_identity_exact_all_levels():
    grid = noise.GridSpec(T=2.0, levels=(4, 8, 32))
    batch = noise.generate(42, 0, 3, grid, K=8)
    for N in grid.levels:
        h = grid.T / N
        dW = batch.dW[N]
        for i in range(3):
            np.testing.assert_array_equal(
                batch.iterated[N][:, i, i], 0.5 * (dW[:, i] ** 2 - h)
            )


def test_symmetric_part_identity_all_levels():
    # forced by construction; composition leaves at most ~1 ulp per entry
    grid = noise.GridSpec(T=1.0, levels=(4, 16, 64))
    batch = noise.generate(43, 2, 3, grid, K=8)
    for N in grid.levels:
        h = grid.T / N
        dW = batch.dW[N]
        I = batch.iterated[N]
        target = np.einsum("nl,ni->nli", dW, dW) - h * np.eye(3)
        scale = np.abs(I).max() + h
        np.testing.assert_allclose(I + I.transpose(0, 2, 1), target, rtol=0, atol=8e-16 * scale)


def test_levy_area_mean_zero_given_increments():
    # antisymmetric part has zero conditional mean: over many samples the
    # average area at fixed step stays near zero
    grid = noise.GridSpec(T=1.0, levels=(1,))
    areas = []
    for s in range(4000):
        b = noise.generate(7, s, 2, grid, K=10)
        I = b.iterated[1][0]
        areas.append(0.5 * (I[0, 1] - I[1, 0]))
    areas = np.array(areas)
    # unconditional Var(A_12) = E[(h/12)(h + |dW|^2)] = h^2/4 at h=1
    assert abs(areas.mean()) < 4 * np.sqrt(0.25 / len(areas))
    np.testing.assert_allclose(areas.var(), 0.25, rtol=0.15)


def test_increment_moments():
    # 1e5 fine increments: mean within 3 sigma, variance within 2%
    grid = noise.GridSpec(T=100.0, levels=(100_000,))
    h = 100.0 / 100_000
    batch = noise.generate(11, 0, 1, grid, K=0, levy_areas=False)
    dW = batch.dW[100_000][:, 0]
    assert abs(dW.mean()) <= 3.0 * np.sqrt(h / 100_000)
    np.testing.assert_allclose(dW.var(), h, rtol=0.02)


def test_increment_normality_jarque_bera():
    grid = noise.GridSpec(T=1.0, levels=(100_000,))
    batch = noise.generate(13, 0, 1, grid, K=0, levy_areas=False)
    res = stats.jarque_bera(batch.dW[100_000][:, 0])
    assert res.pvalue > 1e-3


def test_coarsen_increments_block_sum():
    fine = np.array([[0.3], [-0.1], [0.2], [0.5]])
    coarse = noise.coarsen_increments(fine, 2)
    np.testing.assert_allclose(coarse, [[0.2], [0.7]], atol=1e-16)
    with pytest.raises(ValueError):
        noise.coarsen_increments(fine, 3)


def test_full_path_sum_invariant_across_levels():
    grid = noise.GridSpec(T=1.0, levels=(4, 16, 64, 256))
    batch = noise.generate(17, 3, 2, grid, K=0, levy_areas=False)
    W_T = batch.dW[256].sum(axis=0)
    for N in grid.levels:
        np.testing.assert_allclose(batch.dW[N].sum(axis=0), W_T, rtol=0, atol=1e-13)
        np.testing.assert_allclose(batch.brownian_path(N)[-1], W_T, rtol=0, atol=1e-13)


def test_coarse_increment_variance():
    grid = noise.GridSpec(T=1.0, levels=(512, 4096))
    batch = noise.generate(19, 0, 2, grid, K=0, levy_areas=False)
    h_f = 1.0 / 4096
    np.testing.assert_allclose(batch.dW[512].var(), 8 * h_f, rtol=0.10)


def test_aggregate_identity_factor_one():
    rng = np.random.default_rng(0)
    dW = rng.standard_normal((6, 2))
    I = rng.standard_normal((6, 2, 2))
    out = noise.aggregate_iterated(dW, I, 1, 0.25)
    np.testing.assert_array_equal(out, I)


def test_aggregate_two_children_scalar():
    # children (dW=a, I=(a^2-h)/2), (dW=b, I=(b^2-h)/2) -> ((a+b)^2 - 2h)/2
    a, b, h = 0.7, -0.3, 0.125
    dW = np.array([[a], [b]])
    I = np.array([[[0.5 * (a * a - h)]], [[0.5 * (b * b - h)]]])
    out = noise.aggregate_iterated(dW, I, 2, h)
    np.testing.assert_allclose(out, [[[0.5 * ((a + b) ** 2 - 2 * h)]]], rtol=1e-15)


def test_aggregate_matches_plain_chain_rule():
    # at m=2, N=4: forced-symmetric construction equals the literal chain
    # rule I_c = sum_k I_k + sum_k (W(t_k) - W(t_0)) dW_k (up to rounding)
    grid = noise.GridSpec(T=1.0, levels=(1, 4))
    batch = noise.generate(23, 5, 2, grid, K=20)
    dW, I = batch.dW[4], batch.iterated[4]
    expected = np.zeros((2, 2))
    w = np.zeros(2)
    for k in range(4):
        expected += I[k]
        expected += np.outer(w, dW[k])
        w += dW[k]
    np.testing.assert_allclose(batch.iterated[1][0], expected, rtol=0, atol=1e-14)


def test_dump_load_round_trip(tmp_path):
    grid = noise.GridSpec(T=0.5, levels=(4, 8))
    batch = noise.generate(29, 4, 2, grid, K=6)
    path = tmp_path / "batch.nbat"
    noise.dump(batch, path)
    loaded = noise.load(path)
    assert loaded.m == batch.m
    assert loaded.K == batch.K
    assert loaded.seed == batch.seed
    assert loaded.sample == batch.sample
    assert loaded.levy_sampled == batch.levy_sampled
    assert loaded.grid == batch.grid
    for N in grid.levels:
        np.testing.assert_array_equal(loaded.dW[N], batch.dW[N])
        np.testing.assert_array_equal(loaded.iterated[N], batch.iterated[N])


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.nbat"
    path.write_bytes(b"WRONG" + b"\x00" * 64)
    with pytest.raises(ValueError, match="magic"):
        noise.load(path)


def test_tail_variance_matches_ito_isometry():
    # E[I_{li}^2] = h^2/2 for l != i; the truncated series plus the Gaussian
    # tail keeps the second moment exact for any K
    grid = noise.GridSpec(T=1.0, levels=(1,))
    vals = []
    for s in range(6000):
        b = noise.generate(31, s, 2, grid, K=4)
        vals.append(b.iterated[1][0, 0, 1])
    second = np.mean(np.square(vals))
    np.testing.assert_allclose(second, 0.5, rtol=0.08)
