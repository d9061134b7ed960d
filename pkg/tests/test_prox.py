"""Prox solver tests against closed forms and a golden-section oracle."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from itererm.prox import ProxError, ScalarConvexFn, prox1d, prox1d_batch


# ---------------------------------------------------------------------------
# independent oracle: bracketed golden-section minimization of the prox
# objective 0.5 (z - x)^2 + V f(z); never touches the Newton path
# ---------------------------------------------------------------------------

def golden_prox(f, V, x, lo=-60.0, hi=60.0):
    """Golden section on the prox objective plus one parabolic refinement.

    Pure golden section stalls at the sqrt(eps) noise floor of objective
    comparisons, so the bracket is only shrunk to 1e-4 and the minimizer
    is read off a three-point parabola, which is accurate to ~1e-10.
    """
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    obj = lambda z: 0.5 * (z - x) ** 2 + V * f(z)
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = obj(c), obj(d)
    for _ in range(400):
        if abs(b - a) < 1e-4:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = obj(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = obj(d)
    m = 0.5 * (a + b)
    h = 0.5 * (b - a)
    ya, ym, yb = obj(m - h), obj(m), obj(m + h)
    denom = ya - 2.0 * ym + yb
    if denom <= 0:
        return m
    return m + 0.5 * h * (ya - yb) / denom


def square_fn(target=3.0):
    return ScalarConvexFn(f=lambda z: 0.5 * (z - target) ** 2,
                          f1=lambda z: z - target,
                          f2=lambda z: np.ones_like(z))


def logistic_fn(y=1.0):
    return ScalarConvexFn(f=lambda z: np.logaddexp(0.0, -y * z),
                          f1=lambda z: -y * expit(-y * z),
                          f2=lambda z: expit(-y * z) * (1.0 - expit(-y * z)))


def zero_fn():
    return ScalarConvexFn(f=lambda z: np.zeros_like(z),
                          f1=lambda z: np.zeros_like(z),
                          f2=lambda z: np.zeros_like(z))


def test_square_closed_form():
    # prox of 0.5 (z-3)^2 at x=1, V=1 is (x + 3 V)/(1 + V) = 2
    assert prox1d(square_fn(3.0), 1.0, 1.0) == pytest.approx(2.0, abs=1e-14)


def test_zero_function_is_identity():
    assert prox1d(zero_fn(), 1.0, 0.7) == 0.7


def test_logistic_against_golden_oracle_frozen_case():
    # golden-section oracle value for V=1, x=0, y=+1 (computed by golden_prox)
    z = prox1d(logistic_fn(1.0), 1.0, 0.0)
    assert z == pytest.approx(0.4010581417071716, abs=1e-8)
    assert z == pytest.approx(golden_prox(lambda t: np.logaddexp(0.0, -t), 1.0, 0.0),
                              abs=1e-8)


def test_logistic_golden_oracle_grid():
    rng = np.random.default_rng(42)
    for _ in range(60):
        x = float(rng.uniform(-6, 6))
        v = float(10 ** rng.uniform(-2, 1.6))
        y = float(rng.choice([-1.0, 1.0]))
        z = prox1d(logistic_fn(y), v, x)
        z_ref = golden_prox(lambda t: np.logaddexp(0.0, -y * t), v, x,
                            lo=-80, hi=80)
        assert z == pytest.approx(z_ref, abs=1e-8)


def test_batch_matches_scalar_bit_for_bit():
    rng = np.random.default_rng(7)
    n = 10_000
    x = rng.uniform(-8, 8, size=n)
    y = rng.choice([-1.0, 1.0], size=n)
    fn = ScalarConvexFn(f=lambda z: np.logaddexp(0.0, -y * z),
                        f1=lambda z: -y * expit(-y * z),
                        f2=lambda z: expit(-y * z) * (1.0 - expit(-y * z)))
    z_batch = prox1d_batch(fn, 0.8, x)
    for i in rng.choice(n, size=200, replace=False):
        z_i = prox1d(logistic_fn(float(y[i])), 0.8, float(x[i]))
        assert z_batch[i] == z_i   # identical iteration sequence per element


def test_empty_array():
    out = prox1d_batch(logistic_fn(), 1.0, np.array([]))
    assert out.shape == (0,)


def test_optimality_residual_bound():
    rng = np.random.default_rng(3)
    x = rng.uniform(-30, 30, size=5000)
    for v in (0.05, 1.0, 20.0):
        fn = logistic_fn(1.0)
        z = prox1d_batch(fn, v, x)
        resid = np.abs(z - x + v * fn.f1(z))
        assert np.all(resid <= 1e-11 * (1.0 + np.abs(x)))


@settings(max_examples=200, deadline=None)
@given(x1=st.floats(-40, 40), x2=st.floats(-40, 40),
       v=st.floats(0.01, 50.0))
def test_firm_nonexpansiveness_and_monotonicity(x1, x2, v):
    fn = logistic_fn(1.0)
    z1, z2 = prox1d(fn, v, x1), prox1d(fn, v, x2)
    slack = 4e-11 * (1.0 + abs(x1) + abs(x2))
    assert abs(z1 - z2) <= abs(x1 - x2) + slack
    if x1 < x2:
        assert z1 <= z2 + slack


def test_square_loss_exactness_bulk():
    rng = np.random.default_rng(11)
    x = rng.uniform(-10, 10, size=10_000)
    y = rng.choice([-1.0, 1.0], size=10_000)
    v = 0.37
    fn = ScalarConvexFn(f=lambda z: 0.5 * (z - y) ** 2,
                        f1=lambda z: z - y,
                        f2=lambda z: np.ones_like(z))
    z = prox1d_batch(fn, v, x)
    assert np.max(np.abs(z - (x + v * y) / (1 + v))) < 1e-14 * (1 + np.abs(x)).max()


def test_rejects_nonpositive_v():
    with pytest.raises(ValueError):
        prox1d(square_fn(), 0.0, 1.0)
    with pytest.raises(ValueError):
        prox1d(square_fn(), -1.0, 1.0)


def test_nonconvergence_raises_diagnostic_error():
    with pytest.raises(ProxError) as exc_info:
        prox1d_batch(logistic_fn(1.0), 30.0, np.array([-5.0]), max_iter=2)
    err = exc_info.value
    assert err.index == 0
    assert err.lo is not None and err.hi is not None and err.lo < err.hi
