import numpy as np
import pytest

from gbmei import model


def pytest_configure(config):
    config.addinivalue_line("markers", "compiled: needs the compiled stepping backend")


def has_compiled_backend():
    try:
        import gbmei._core  # noqa: F401

        return True
    except ImportError:
        return False


needs_compiled = pytest.mark.skipif(
    not has_compiled_backend(), reason="compiled backend not built"
)


def random_nonlinear_problem(rng, d=None, m=None, b_scale=0.4):
    """A picklable-enough random test problem with smooth bounded fields."""
    d = d if d is not None else int(rng.integers(1, 5))
    m = m if m is not None else int(rng.integers(1, 4))
    A = 0.5 * rng.standard_normal((d, d))
    Bs = b_scale * rng.standard_normal((m, d, d))
    weights = [0.3 * rng.standard_normal((d, d)) for _ in range(m)]

    def F(u):
        return -u + 0.1 * (u * u * u)

    gs = tuple((lambda u, W=W: np.tanh(W @ u)) for W in weights)
    Dgs = tuple((lambda u, W=W: (1.0 - np.tanh(W @ u) ** 2)[:, None] * W) for W in weights)
    return model.make_problem(
        A=A,
        Bs=Bs,
        F=F,
        gs=gs,
        Dgs=Dgs,
        u0=np.ones(d),
        waive_commutators=True,
        name="random_nonlinear",
    )


def pure_gbm_problem(rng, d=4, m=2):
    """Diagonal linear SDE (F = 0, g = 0) with its exact GBM solution hook."""
    A = np.diag(rng.uniform(-1.5, 0.5, d))
    Bs = np.array([np.diag(rng.uniform(-0.8, 0.8, d)) for _ in range(m)])
    u0 = rng.uniform(0.5, 1.5, d)
    return model.make_problem(
        A=A,
        Bs=Bs,
        F=None,
        gs=None,
        Dgs=None,
        u0=u0,
        commutative_noise=True,
        exact=model.linear_exact_hook(A, Bs, u0),
        name="pure_gbm",
    )
