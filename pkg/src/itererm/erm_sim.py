"""Finite-dimensional ground truth for the two-stage ERM.

Generates Gaussian-mixture datasets with exactly prescribed mean geometry,
fits both ridge-regularized ERMs by damped Newton, and measures the
empirical overlaps and test error that the asymptotic theory predicts.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .losses import Stage0Loss, Stage1Loss
from .state_evolution import ProblemSpec, _psd_factor


# ---------------------------------------------------------------------------
# data generation
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Dataset:
    """One finite-dimensional draw of the mixture model."""

    X: np.ndarray
    class_idx: np.ndarray
    cval: np.ndarray
    eps: np.ndarray
    y: np.ndarray
    s: np.ndarray           # teacher pre-activations <beta, x_i>
    beta: np.ndarray
    mus: np.ndarray         # (K, d) class mean vectors

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def embed_geometry(spec: ProblemSpec, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (beta, mus) embedding realizing the prescribed Gram matrix.

    The factor of the Gram matrix occupies the leading 1+K coordinates;
    rotation invariance of the isotropic noise makes the choice lossless.
    """
    k = spec.n_classes
    if d < 1 + k:
        raise ValueError(f"need d >= {1 + k} to embed the mean geometry, got {d}")
    factor, neg = _psd_factor(spec.gram_matrix())
    if neg > 1e-8:
        raise ValueError("mean-geometry Gram matrix is not PSD")
    beta = np.zeros(d)
    beta[:1 + k] = factor[0]
    mus = np.zeros((k, d))
    mus[:, :1 + k] = factor[1:]
    return beta, mus


def generate_dataset(spec: ProblemSpec, d: int, rng: np.random.Generator) -> Dataset:
    """Draw n = round(alpha d) mixture samples with labels from the link."""
    beta, mus = embed_geometry(spec, d)
    n = int(round(spec.alpha * d))
    idx = rng.choice(spec.n_classes, size=n, p=spec.class_probs)
    eps = spec.noise.sample(rng, n)
    X = mus[idx] + rng.standard_normal((n, d))
    s = X @ beta
    cval = spec.class_values[idx]
    y = spec.link.eval(s, cval, eps)
    return Dataset(X=X, class_idx=idx, cval=cval, eps=eps, y=y, s=s,
                   beta=beta, mus=mus)


# ---------------------------------------------------------------------------
# ERM fitting
# ---------------------------------------------------------------------------

@dataclass
class FitConfig:
    """Newton solver settings for the regularized empirical risk."""

    grad_tol: float = 1e-9
    max_iter: int = 100
    direct_solve_max_dim: int = 2000
    cg_tol: float = 1e-10
    backend: str = "newton"        # newton | gd
    gd_max_iter: int = 200_000


@dataclass(eq=False)
class FitResult:
    w: np.ndarray
    grad_norm: float
    iters: int
    converged: bool


class FitError(RuntimeError):
    pass


def _minimize_erm(X: np.ndarray, lam: float, d1_fn: Callable, d2_fn: Callable,
                  obj_fn: Callable, cfg: FitConfig) -> FitResult:
    """Minimize mean loss(X w) + lam/2 |w|^2 for a convex per-sample loss.

    d1_fn/d2_fn map the prediction vector z = X w to the per-sample first
    and second loss derivatives; obj_fn maps z to the mean loss value.
    """
    n, d = X.shape
    w = np.zeros(d)
    z = np.zeros(n)
    g0 = X.T @ d1_fn(z) / n
    g_ref = max(1.0, float(np.linalg.norm(g0)))
    if cfg.backend == "gd":
        return _minimize_gd(X, lam, d1_fn, obj_fn, cfg, g_ref)

    grad = g0.copy()
    val = obj_fn(z)
    for it in range(cfg.max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol * g_ref:
            return FitResult(w=w, grad_norm=gnorm, iters=it, converged=True)
        d2 = np.maximum(d2_fn(z), 0.0)
        if d <= cfg.direct_solve_max_dim:
            hess = (X.T * d2) @ X / n
            hess[np.diag_indices_from(hess)] += lam
            try:
                step = np.linalg.solve(hess, -grad)
            except np.linalg.LinAlgError as exc:
                raise FitError(f"Newton solve failed: {exc}") from exc
        else:
            def matvec(v):
                return X.T @ (d2 * (X @ v)) / n + lam * v
            op = LinearOperator((d, d), matvec=matvec)
            step, info = cg(op, -grad, rtol=cfg.cg_tol, maxiter=10 * d)
            if info != 0:
                raise FitError(f"CG did not converge (info={info})")
        # backtracking line search on the strongly convex objective
        gs = float(grad @ step)
        t = 1.0
        for _ in range(60):
            w_new = w + t * step
            z_new = X @ w_new
            val_new = obj_fn(z_new) + 0.5 * lam * float(w_new @ w_new)
            if val_new <= val + 1e-4 * t * gs:
                break
            t *= 0.5
        else:
            raise FitError("line search failed")
        w, z, val = w_new, z_new, val_new
        grad = X.T @ d1_fn(z) / n + lam * w
    gnorm = float(np.linalg.norm(grad))
    warnings.warn(f"ERM fit did not converge: |grad| = {gnorm:.3e}")
    return FitResult(w=w, grad_norm=gnorm, iters=cfg.max_iter, converged=False)


def _minimize_gd(X, lam, d1_fn, obj_fn, cfg, g_ref) -> FitResult:
    """Plain gradient descent with backtracking; reference backend for checks."""
    n, d = X.shape
    w = np.zeros(d)
    lr = 1.0
    z = X @ w
    grad = X.T @ d1_fn(z) / n + lam * w
    val = obj_fn(z) + 0.5 * lam * float(w @ w)
    for it in range(cfg.gd_max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol * g_ref:
            return FitResult(w=w, grad_norm=gnorm, iters=it, converged=True)
        while True:
            w_new = w - lr * grad
            z_new = X @ w_new
            val_new = obj_fn(z_new) + 0.5 * lam * float(w_new @ w_new)
            if val_new <= val - 0.5 * lr * gnorm ** 2 or lr < 1e-12:
                break
            lr *= 0.5
        w, z, val = w_new, z_new, val_new
        grad = X.T @ d1_fn(z) / n + lam * w
        lr = min(lr * 1.1, 1e3)
    gnorm = float(np.linalg.norm(grad))
    warnings.warn(f"GD fit did not converge: |grad| = {gnorm:.3e}")
    return FitResult(w=w, grad_norm=gnorm, iters=cfg.gd_max_iter, converged=False)


def fit_stage0(data: Dataset, loss0: Stage0Loss, lam0: float,
               cfg: FitConfig | None = None) -> FitResult:
    """First ERM: mean l0(<w,x>, s, c, eps) + lam0/2 |w|^2."""
    if lam0 <= 0:
        raise ValueError("lam0 must be positive")
    cfg = cfg or FitConfig()
    s, cval, eps = data.s, data.cval, data.eps
    return _minimize_erm(
        data.X, lam0,
        lambda z: loss0.d1(z, s, cval, eps),
        lambda z: loss0.d2(z, s, cval, eps),
        lambda z: float(np.mean(loss0.eval(z, s, cval, eps))),
        cfg)


def fit_stage1(data: Dataset, w0: np.ndarray, loss1: Stage1Loss, lam: float,
               cfg: FitConfig | None = None) -> FitResult:
    """Second ERM with the base predictions u_i = <w0, x_i> computed once.

    Exact indicator policies therefore enter as per-sample weights frozen
    at their realized values, and the problem stays plainly convex.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    cfg = cfg or FitConfig()
    u = data.X @ w0
    s, cval, eps = data.s, data.cval, data.eps
    return _minimize_erm(
        data.X, lam,
        lambda z: loss1.dr(z, u, s, cval, eps),
        lambda z: loss1.drr(z, u, s, cval, eps),
        lambda z: float(np.mean(loss1.eval(z, u, s, cval, eps))),
        cfg)


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Overlaps:
    """Empirical counterparts of the asymptotic order parameters."""

    q0: float
    theta0: float
    m0: np.ndarray
    q: float
    theta: float
    t: float
    m: np.ndarray

    def as_dict(self) -> dict:
        return {"q0": self.q0, "theta0": self.theta0, "m0": self.m0.tolist(),
                "q": self.q, "theta": self.theta, "t": self.t, "m": self.m.tolist()}


def measure_overlaps(w0: np.ndarray, w: np.ndarray, data: Dataset) -> Overlaps:
    return Overlaps(
        q0=float(w0 @ w0),
        theta0=float(w0 @ data.beta),
        m0=data.mus @ w0,
        q=float(w @ w),
        theta=float(w @ data.beta),
        t=float(w @ w0),
        m=data.mus @ w,
    )


def empirical_test_error(w: np.ndarray, spec: ProblemSpec, n_test: int,
                         rng: np.random.Generator) -> tuple[float, float]:
    """Misclassification rate on fresh samples, with its binomial std error."""
    if n_test < 1:
        raise ValueError("n_test must be >= 1")
    beta, mus = embed_geometry(spec, w.shape[0])
    idx = rng.choice(spec.n_classes, size=n_test, p=spec.class_probs)
    eps = spec.noise.sample(rng, n_test)
    X = mus[idx] + rng.standard_normal((n_test, w.shape[0]))
    cval = spec.class_values[idx]
    y = spec.link.eval(X @ beta, cval, eps)
    pred = np.where(X @ w >= 0.0, 1.0, -1.0)
    err = float(np.mean(pred != np.where(y >= 0.0, 1.0, -1.0)))
    return err, math.sqrt(err * (1.0 - err) / n_test)


# ---------------------------------------------------------------------------
# multi-seed pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Per-seed pipeline: generate, fit both stages, measure, test.

    loss1_factory rebuilds the second-stage loss from the realized base
    norm q0_hat (budget thresholds are saturated per realization);
    selection_fn reports the per-sample keep weight so the realized
    selected fraction can be recorded.
    """

    fit: FitConfig = field(default_factory=FitConfig)
    n_test: int = 100_000
    loss1_factory: Callable[[float], Stage1Loss] | None = None
    selection_fn: Callable[[float], Callable] | None = None


@dataclass(eq=False)
class TrialRecord:
    seed: int
    overlaps: Overlaps
    test_error: float
    test_error_se: float
    selected_fraction: float
    fit0: FitResult
    fit1: FitResult


@dataclass(eq=False)
class TrialStats:
    """Aggregates over seeds; failed seeds are recorded, never dropped silently."""

    records: list[TrialRecord]
    failures: list[tuple[int, str]]

    @property
    def n_ok(self) -> int:
        return len(self.records)

    def mean_std(self, getter: Callable[[TrialRecord], float]) -> tuple[float, float]:
        vals = np.array([getter(r) for r in self.records])
        if vals.size == 0:
            return math.nan, math.nan
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        return float(vals.mean()), std

    def test_error_stats(self) -> tuple[float, float]:
        return self.mean_std(lambda r: r.test_error)


def run_trial(spec: ProblemSpec, d: int, seed: int,
              cfg: PipelineConfig) -> TrialRecord:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 101])))
    data = generate_dataset(spec, d, rng)
    fit0 = fit_stage0(data, spec.loss0, spec.lam0, cfg.fit)
    q0_hat = float(fit0.w @ fit0.w)
    loss1 = cfg.loss1_factory(q0_hat) if cfg.loss1_factory else spec.loss1
    fit1 = fit_stage1(data, fit0.w, loss1, spec.lam, cfg.fit)
    overlaps = measure_overlaps(fit0.w, fit1.w, data)
    err, err_se = empirical_test_error(fit1.w, spec, cfg.n_test, rng)
    if cfg.selection_fn is not None:
        weight = cfg.selection_fn(q0_hat)
        u = data.X @ fit0.w
        frac = float(np.mean(weight(u, data.cval, data.eps)))
    else:
        frac = math.nan
    return TrialRecord(seed=seed, overlaps=overlaps, test_error=err,
                       test_error_se=err_se, selected_fraction=frac,
                       fit0=fit0, fit1=fit1)


def run_trials(spec: ProblemSpec, d: int, n_seeds: int,
               cfg: PipelineConfig | None = None, seed0: int = 0) -> TrialStats:
    """Independent trials with per-seed RNG streams; aggregation is seed-ordered."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    cfg = cfg or PipelineConfig()
    records: list[TrialRecord] = []
    failures: list[tuple[int, str]] = []
    for k in range(n_seeds):
        seed = seed0 + k
        try:
            rec = run_trial(spec, d, seed, cfg)
        except (FitError, FloatingPointError) as exc:
            failures.append((seed, str(exc)))
            continue
        if not (rec.fit0.converged and rec.fit1.converged):
            failures.append((seed, "fit did not converge"))
            continue
        records.append(rec)
    return TrialStats(records=records, failures=failures)
