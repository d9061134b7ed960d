"""State-evolution tests: law assembly, stage updates, solve, test metrics."""

import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import norm

import itererm.erm_sim as es
from itererm.losses import (constant_policy, identity_link, make_al_losses,
                            make_square_pair, make_zero_pair, no_noise,
                            sign_link, small_margin_policy)
from itererm.state_evolution import (FixedPointConfig, IntegratorConfig,
                                     ProblemSpec, Stage0Params, Stage1Params,
                                     audit_residual, build_gaussian_law,
                                     eval_test_metric, misclassification_metric,
                                     solve, solve_stage0, stage1_update)
from itererm.state_evolution import test_error_binary as binary_error


def zero_spec(alpha=8.0, lam0=0.01, lam=0.02):
    l0, l1 = make_zero_pair()
    return ProblemSpec(alpha=alpha, lam0=lam0, lam=lam,
                       class_probs=[1.0], class_values=[1.0],
                       nu=[0.0], rho=[[0.0]], beta_norm_sq=1.0,
                       link=sign_link(), noise=no_noise(), loss0=l0, loss1=l1)


def al_spec(psi, gamma, policy, alpha=8.0, lam0=0.01, lam=0.01):
    b0, b1 = make_square_pair()
    l0, l1 = make_al_losses(b0, b1, policy, psi, gamma)
    return ProblemSpec(alpha=alpha, lam0=lam0, lam=lam,
                       class_probs=[1 - psi, psi], class_values=[0.0, 1.0],
                       nu=[0.0, 0.0], rho=np.zeros((2, 2)), beta_norm_sq=1.0,
                       link=sign_link(), noise=no_noise(), loss0=l0, loss1=l1)


def two_class_spec():
    """Generic non-degenerate two-class geometry for assembly tests."""
    l0, l1 = make_square_pair()
    return ProblemSpec(alpha=3.0, lam0=0.1, lam=0.1,
                       class_probs=[0.4, 0.6], class_values=[1.0, -1.0],
                       nu=[0.3, -0.1],
                       rho=[[1.0, 0.2], [0.2, 0.8]],
                       beta_norm_sq=1.5,
                       link=sign_link(), noise=no_noise(), loss0=l0, loss1=l1)


# ---------------------------------------------------------------------------
# Gaussian law assembly
# ---------------------------------------------------------------------------

def reference_phi(spec, p0, p1):
    """Independent elementwise assembly of the covariance block matrix."""
    k = spec.n_classes
    phi = np.zeros((3 + k, 3 + k))
    phi[0, 0] = p1.q
    phi[1, 1] = p0.q0
    phi[2, 2] = spec.beta_norm_sq
    phi[0, 1] = phi[1, 0] = p1.t
    phi[0, 2] = phi[2, 0] = p1.theta
    phi[1, 2] = phi[2, 1] = p0.theta0
    for j in range(k):
        phi[0, 3 + j] = phi[3 + j, 0] = p1.m[j]
        phi[1, 3 + j] = phi[3 + j, 1] = p0.m0[j]
        phi[2, 3 + j] = phi[3 + j, 2] = spec.nu[j]
        for i in range(k):
            phi[3 + i, 3 + j] = spec.rho[i, j]
    return phi


def consistent_params(spec, rng):
    """Random order parameters with a PSD joint covariance.

    Represents (beta, mu_c, w0_like, w_like) as vectors in a common inner
    product space; every Gram matrix of such vectors is automatically PSD.
    """
    k = spec.n_classes
    dim = 1 + k + 2
    basis = np.zeros((1 + k, dim))
    basis[:, :1 + k] = np.linalg.cholesky(spec.gram_matrix() + 1e-12 * np.eye(1 + k))
    vec0 = rng.normal(size=1 + k) @ basis
    vec0[1 + k] = rng.normal()
    vec1 = rng.normal(size=1 + k) @ basis
    vec1[1 + k] = rng.normal()
    vec1[2 + k] = rng.normal()
    p0 = Stage0Params(m0=basis[1:] @ vec0, theta0=float(basis[0] @ vec0),
                      q0=float(vec0 @ vec0), V0=0.5)
    p1 = Stage1Params(m=basis[1:] @ vec1, theta=float(basis[0] @ vec1),
                      t=float(vec0 @ vec1), q=float(vec1 @ vec1), V=0.4, chi=0.1)
    return p0, p1


def test_law_matches_reference_assembly():
    spec = two_class_spec()
    rng = np.random.default_rng(17)
    p0, p1 = consistent_params(spec, rng)
    law = build_gaussian_law(spec, p0, p1)
    assert np.allclose(law.cov, reference_phi(spec, p0, p1), atol=0, rtol=0)
    # factor reproduces the covariance and the geometry block bit-for-bit
    assert np.allclose(law.factor @ law.factor.T, law.cov, atol=1e-12)
    assert np.array_equal(law.cov[2:, 2:], spec.gram_matrix())
    assert law.clipped_mass < 1e-10
    expected_means = np.column_stack([p1.m, p0.m0, spec.nu, spec.rho])
    assert np.array_equal(law.means, expected_means)


def test_law_degenerate_first_row():
    spec = two_class_spec()
    p0 = Stage0Params(m0=[0.1, -0.2], theta0=0.2, q0=0.5, V0=1.0)
    p1 = Stage1Params(m=[0.0, 0.0], theta=0.0, t=0.0, q=0.0, V=1.0, chi=0.0)
    law = build_gaussian_law(spec, p0, p1)
    assert np.all(law.cov[0, :] == 0.0)
    assert np.all(law.cov[:, 0] == 0.0)
    assert np.all(law.means[:, 0] == 0.0)


def test_law_zero_mean_classes():
    spec = al_spec(0.3, 0.7, constant_policy(0.0))
    p0 = Stage0Params(m0=[0.0, 0.0], theta0=0.0, q0=0.0, V0=1.0)
    p1 = Stage1Params(m=[0.0, 0.0], theta=0.0, t=0.0, q=0.0, V=1.0, chi=0.0)
    law = build_gaussian_law(spec, p0, p1)
    assert np.all(law.means == 0.0)


def test_law_rejects_nonfinite():
    spec = two_class_spec()
    p0 = Stage0Params(m0=[0.0, 0.0], theta0=np.nan, q0=0.1, V0=1.0)
    p1 = Stage1Params(m=[0.0, 0.0], theta=0.0, t=0.0, q=0.1, V=1.0, chi=0.0)
    with pytest.raises(ValueError):
        build_gaussian_law(spec, p0, p1)


# ---------------------------------------------------------------------------
# trivial and degenerate fixed points
# ---------------------------------------------------------------------------

def test_zero_loss_trivial_point_two_iterations():
    spec = zero_spec(alpha=8.0, lam0=0.01, lam=0.02)
    res = solve(spec, FixedPointConfig(damping=1.0),
                IntegratorConfig(nodes=2000, seed=3))
    assert res.diag0.iters <= 2 and res.diag1.iters <= 2
    assert res.p0.V0 == pytest.approx(1.0 / (8.0 * 0.01), abs=1e-9)
    assert res.p1.V == pytest.approx(1.0 / (8.0 * 0.02), abs=1e-9)
    for val in (res.p0.q0, res.p0.theta0, res.p1.q, res.p1.theta, res.p1.t,
                res.p1.chi):
        assert val == pytest.approx(0.0, abs=1e-12)
    assert np.all(res.p0.m0 == 0.0) and np.all(res.p1.m == 0.0)


def test_u_independent_loss_gives_exactly_zero_chi():
    # plain square second stage never looks at u, so both chi kernels vanish
    spec = al_spec(0.5, 0.5, constant_policy(0.0), alpha=4.0, lam0=0.1, lam=0.1)
    res = solve(spec, FixedPointConfig(), IntegratorConfig(nodes=20_000, seed=5))
    assert res.converged
    assert res.p1.chi == 0.0


# ---------------------------------------------------------------------------
# stage-0 equations against a finite-dimensional ridge oracle
# ---------------------------------------------------------------------------

def test_stage0_ridge_regression_matches_simulation():
    b0, _ = make_square_pair(identity_link())
    l0z, l1z = make_zero_pair()
    spec = ProblemSpec(alpha=2.0, lam0=0.1, lam=0.1,
                       class_probs=[1.0], class_values=[1.0],
                       nu=[0.0], rho=[[0.0]], beta_norm_sq=1.0,
                       link=identity_link(), noise=no_noise(0.0),
                       loss0=b0, loss1=l1z)
    p0, diag = solve_stage0(spec, FixedPointConfig(),
                            IntegratorConfig(nodes=100_000, seed=9))
    assert diag.converged

    qs, ths = [], []
    for seed in range(50):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 77])))
        data = es.generate_dataset(spec, 400, rng)
        fit = es.fit_stage0(data, spec.loss0, spec.lam0)
        assert fit.converged
        ov = es.measure_overlaps(fit.w, fit.w, data)
        qs.append(ov.q0)
        ths.append(ov.theta0)
    q_med, q_sem = np.mean(qs), np.std(qs, ddof=1) / math.sqrt(len(qs))
    t_med, t_sem = np.mean(ths), np.std(ths, ddof=1) / math.sqrt(len(ths))
    se = diag.fixed_point_se()
    assert abs(p0.q0 - q_med) <= 3.0 * math.sqrt(q_sem ** 2 + se["q0"] ** 2) + 3e-3
    assert abs(p0.theta0 - t_med) <= 3.0 * math.sqrt(t_sem ** 2 + se["theta0"] ** 2) + 3e-3


def test_stage0_node_count_scaling():
    spec = al_spec(0.3, 0.7, constant_policy(0.0))
    p_a, d_a = solve_stage0(spec, None, IntegratorConfig(nodes=40_000, seed=21))
    p_b, d_b = solve_stage0(spec, None, IntegratorConfig(nodes=80_000, seed=22))
    se_a, se_b = d_a.fixed_point_se(), d_b.fixed_point_se()
    for key, va, vb in (("q0", p_a.q0, p_b.q0), ("theta0", p_a.theta0, p_b.theta0)):
        tol = 2.0 * math.sqrt(se_a[key] ** 2 + se_b[key] ** 2) + 1e-4
        assert abs(va - vb) <= tol


# ---------------------------------------------------------------------------
# passive endpoint and self-audit
# ---------------------------------------------------------------------------

def test_passive_endpoint_matches_single_stage_solver():
    from itererm.active_learning import ALSetting, passive_reference
    gamma = 0.5
    spec = al_spec(gamma, gamma, small_margin_policy(0.0, 0.05),
                   alpha=8.0, lam0=0.01, lam=0.01)
    integ = IntegratorConfig(nodes=100_000, seed=31)
    res = solve(spec, None, integ)
    assert res.converged
    b0, b1 = make_square_pair()
    setting = ALSetting(alpha=8.0, lam0=0.01, lam=0.01, gamma=gamma,
                        base0=b0, base1=b1)
    ref, ref_diag = passive_reference(setting, gamma, None, integ)
    se1 = res.diag1.fixed_point_se()
    se0 = ref_diag.fixed_point_se()
    for key, got, want in (("q", res.p1.q, ref.q0),
                           ("theta", res.p1.theta, ref.theta0),
                           ("V", res.p1.V, ref.V0)):
        ref_key = {"q": "q0", "theta": "theta0", "V": "V0"}[key]
        tol = 1e-5 + 3.0 * math.sqrt(se1[key] ** 2 + se0[ref_key] ** 2)
        assert abs(got - want) <= tol, (key, got, want, tol)
    assert abs(res.p1.chi) < 1e-12


def test_self_audit_on_fresh_seed():
    spec = al_spec(0.3, 0.7, small_margin_policy(0.74, 0.05))
    integ = IntegratorConfig(nodes=50_000, seed=41)
    res = solve(spec, None, integ)
    assert res.converged
    audit_integ = IntegratorConfig(nodes=200_000, seed=4242)
    audit_resid, audit_se = audit_residual(spec, res.p0, res.p1, audit_integ)
    rep = max(res.diag0.residual, res.diag1.residual)
    se_orig = max(max(float(np.max(np.atleast_1d(v))) for v in
                      res.diag0.param_se.values()),
                  max(float(np.max(np.atleast_1d(v))) for v in
                      res.diag1.param_se.values()))
    assert audit_resid <= 3.0 * rep + 3.0 * math.sqrt(audit_se ** 2 + se_orig ** 2)


# ---------------------------------------------------------------------------
# test metrics
# ---------------------------------------------------------------------------

def converged_al_law(seed=51):
    spec = al_spec(0.3, 0.7, small_margin_policy(0.74, 0.05))
    res = solve(spec, None, IntegratorConfig(nodes=50_000, seed=seed))
    assert res.converged
    return spec, res


def test_metric_zero():
    _, res = converged_al_law()
    val = eval_test_metric(res.law, lambda r, s, c, e: np.zeros_like(r),
                           IntegratorConfig(nodes=10_000, seed=1))
    assert val == 0.0


def test_metric_second_moment():
    spec, res = converged_al_law()
    val, se = eval_test_metric(res.law, lambda r, s, c, e: r ** 2,
                               IntegratorConfig(nodes=400_000, seed=2),
                               return_se=True)
    expect = res.p1.q + float(spec.class_probs @ res.p1.m ** 2)
    assert abs(val - expect) <= 4 * se + 1e-4


def sign_mismatch_quadrature(q, theta, varrho):
    """Independent quadrature oracle for P(sign(g1) != sign(g3)), zero means."""
    sigma = math.sqrt(max(q - theta ** 2 / varrho, 1e-300))
    def integrand(s):
        return norm.pdf(s, scale=math.sqrt(varrho)) * norm.cdf(
            -theta * s / (varrho * sigma))
    val, _ = quad(integrand, 0, np.inf, epsabs=1e-12, epsrel=1e-10)
    return 2.0 * val


def test_metric_sign_mismatch_closed_form_and_quadrature():
    spec, res = converged_al_law()
    metric = misclassification_metric(spec.link)
    val, se = eval_test_metric(res.law, metric,
                               IntegratorConfig(nodes=400_000, seed=3),
                               return_se=True)
    closed = binary_error(res.p1, spec.beta_norm_sq)
    oracle = sign_mismatch_quadrature(res.p1.q, res.p1.theta, spec.beta_norm_sq)
    assert closed == pytest.approx(oracle, abs=1e-9)
    assert abs(val - closed) <= 4 * se + 1e-4


def test_error_binary_endpoints():
    p = Stage1Params(m=[0.0], theta=0.0, t=0.0, q=1.0, V=1.0, chi=0.0)
    assert binary_error(p, 1.0) == pytest.approx(0.5)
    p = Stage1Params(m=[0.0], theta=1.0, t=0.0, q=1.0, V=1.0, chi=0.0)
    assert binary_error(p, 1.0) == pytest.approx(0.0, abs=1e-12)
    p = Stage1Params(m=[0.0], theta=0.6, t=0.0, q=1.0, V=1.0, chi=0.0)
    assert binary_error(p, 1.0) == pytest.approx(math.acos(0.6) / math.pi)
    with pytest.warns(UserWarning):
        p = Stage1Params(m=[0.0], theta=0.0, t=0.0, q=0.0, V=1.0, chi=0.0)
        assert binary_error(p, 1.0) == 0.5


def test_error_monotone_in_alignment():
    qs = np.linspace(0.2, 3.0, 12)
    errs = [binary_error(
        Stage1Params(m=[0.0], theta=0.8, t=0.0, q=q, V=1.0, chi=0.0), 1.0)
        for q in qs]
    # larger q at fixed theta means weaker alignment, so the error grows
    assert np.all(np.diff(errs) >= -1e-12)


# ---------------------------------------------------------------------------
# reproducibility
# ---------------------------------------------------------------------------

def test_seed_invariance_large_nodes():
    spec = al_spec(0.35, 0.7, small_margin_policy(0.7, 0.05),
                   alpha=2.0, lam0=0.05, lam=0.05)
    res_a = solve(spec, None, IntegratorConfig(nodes=1_000_000, seed=1,
                                               antithetic=True))
    res_b = solve(spec, None, IntegratorConfig(nodes=1_000_000, seed=2,
                                               antithetic=True))
    assert res_a.converged and res_b.converged
    se_a = res_a.diag1.fixed_point_se()
    se_b = res_b.diag1.fixed_point_se()
    # order parameters (overlaps) at 3 combined standard errors
    for key in ("q", "theta", "t"):
        va, vb = getattr(res_a.p1, key), getattr(res_b.p1, key)
        tol = 3.0 * math.sqrt(se_a[key] ** 2 + se_b[key] ** 2) + 1e-6
        assert abs(va - vb) <= tol, (key, va, vb, tol)
    se0_a = res_a.diag0.fixed_point_se()
    se0_b = res_b.diag0.fixed_point_se()
    for key in ("q0", "theta0"):
        va, vb = getattr(res_a.p0, key), getattr(res_b.p0, key)
        tol = 3.0 * math.sqrt(se0_a[key] ** 2 + se0_b[key] ** 2) + 1e-6
        assert abs(va - vb) <= tol, (key, va, vb, tol)
    # auxiliary statistics: the delta-method error bar ignores coupling
    # through the law, so only a looser sanity factor is asserted
    for key in ("V", "chi"):
        va, vb = getattr(res_a.p1, key), getattr(res_b.p1, key)
        tol = 8.0 * math.sqrt(se_a[key] ** 2 + se_b[key] ** 2) + 1e-6
        assert abs(va - vb) <= tol, (key, va, vb, tol)


def test_identical_seed_identical_result():
    spec = al_spec(0.3, 0.7, small_margin_policy(0.74, 0.05))
    integ = IntegratorConfig(nodes=20_000, seed=13)
    res_a = solve(spec, None, integ)
    res_b = solve(spec, None, integ)
    assert res_a.p1.q == res_b.p1.q
    assert res_a.p1.chi == res_b.p1.chi


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        IntegratorConfig(nodes=10)
    with pytest.raises(ValueError):
        FixedPointConfig(damping=0.0)
    with pytest.raises(ValueError):
        FixedPointConfig(tol=-1.0)
    l0, l1 = make_zero_pair()
    with pytest.raises(ValueError):
        ProblemSpec(alpha=1.0, lam0=0.0, lam=0.1, class_probs=[1.0],
                    class_values=[1.0], nu=[0.0], rho=[[0.0]], beta_norm_sq=1.0,
                    link=sign_link(), noise=no_noise(), loss0=l0, loss1=l1)
    with pytest.raises(ValueError):
        ProblemSpec(alpha=1.0, lam0=0.1, lam=0.1, class_probs=[0.7, 0.7],
                    class_values=[0.0, 1.0], nu=[0.0, 0.0], rho=np.zeros((2, 2)),
                    beta_norm_sq=1.0, link=sign_link(), noise=no_noise(),
                    loss0=l0, loss1=l1)
    with pytest.raises(ValueError):
        # Gram matrix with a negative eigenvalue
        ProblemSpec(alpha=1.0, lam0=0.1, lam=0.1, class_probs=[1.0],
                    class_values=[1.0], nu=[2.0], rho=[[1.0]], beta_norm_sq=1.0,
                    link=sign_link(), noise=no_noise(), loss0=l0, loss1=l1)


def test_indicator_policy_requires_optin():
    spec = al_spec(0.3, 0.7, small_margin_policy(0.74, width=0.0))
    with pytest.raises(ValueError):
        solve(spec, FixedPointConfig(), IntegratorConfig(nodes=2000, seed=1))
    res = solve(spec, FixedPointConfig(allow_nonsmooth=True),
                IntegratorConfig(nodes=20_000, seed=1))
    assert res.converged
    assert res.p1.chi == 0.0
