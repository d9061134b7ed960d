"""Self-consistent asymptotics of the two-stage ERM.

Solves the coupled scalar equations for the order parameters of both
stages by damped fixed-point iteration, with the Gaussian expectations
evaluated by (optionally antithetic) Monte Carlo over common random
numbers, and evaluates asymptotic test metrics from the resulting
Gaussian law.

Layout of the replica Gaussian g = (g1, g2, g3, g_c...): g1 and g2 stand
in for the final and base predictions on a fresh sample, g3 for the
teacher pre-activation, and g_c for the projections on the class means.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .losses import LinkFunction, NoiseModel, Stage0Loss, Stage1Loss
from .prox import ScalarConvexFn, prox1d_batch

EIG_CLIP = 1e-12
A_MIN_EIG_TOL = -1e-10


# ---------------------------------------------------------------------------
# problem description and parameter containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ProblemSpec:
    """Full asymptotic problem instance.

    alpha is the sample ratio n/d; lam0 and lam the (strictly positive)
    ridge strengths of the two stages.  The mixture geometry enters only
    through the Gram data nu_c = <beta, mu_c>, rho_cc' = <mu_c, mu_c'>
    and beta_norm_sq = |beta|^2.
    """

    alpha: float
    lam0: float
    lam: float
    class_probs: np.ndarray
    class_values: np.ndarray
    nu: np.ndarray
    rho: np.ndarray
    beta_norm_sq: float
    link: LinkFunction
    noise: NoiseModel
    loss0: Stage0Loss
    loss1: Stage1Loss

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=float)
        self.class_values = np.asarray(self.class_values, dtype=float)
        self.nu = np.asarray(self.nu, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.lam0 <= 0 or self.lam <= 0:
            raise ValueError("regularization strengths must be strictly positive")
        if self.beta_norm_sq <= 0:
            raise ValueError("beta_norm_sq must be positive")
        if abs(self.class_probs.sum() - 1.0) > 1e-10:
            raise ValueError("class probabilities must sum to 1")
        if (self.class_probs < 0).any():
            raise ValueError("class probabilities must be nonnegative")
        k = self.n_classes
        if self.class_values.shape != (k,) or self.nu.shape != (k,) or self.rho.shape != (k, k):
            raise ValueError("inconsistent class-geometry shapes")
        min_eig = float(np.linalg.eigvalsh(self.gram_matrix()).min())
        if min_eig < A_MIN_EIG_TOL:
            raise ValueError(
                f"mean-geometry Gram matrix is not PSD (min eigenvalue {min_eig:.3e})")

    @property
    def n_classes(self) -> int:
        return self.class_probs.shape[0]

    def gram_matrix(self) -> np.ndarray:
        """(1+K) x (1+K) Gram of (beta, mu_1, ..., mu_K)."""
        k = self.n_classes
        a = np.empty((1 + k, 1 + k))
        a[0, 0] = self.beta_norm_sq
        a[0, 1:] = self.nu
        a[1:, 0] = self.nu
        a[1:, 1:] = self.rho
        return a


@dataclass(eq=False)
class Stage0Params:
    """Order parameters of the base stage."""

    m0: np.ndarray
    theta0: float
    q0: float
    V0: float

    def __post_init__(self):
        self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float))

    def as_dict(self) -> dict:
        return {"m0": self.m0.tolist(), "theta0": self.theta0,
                "q0": self.q0, "V0": self.V0}


@dataclass(eq=False)
class Stage1Params:
    """Order parameters of the final stage."""

    m: np.ndarray
    theta: float
    t: float
    q: float
    V: float
    chi: float

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, dtype=float))

    def as_dict(self) -> dict:
        return {"m": self.m.tolist(), "theta": self.theta, "t": self.t,
                "q": self.q, "V": self.V, "chi": self.chi}


@dataclass
class IntegratorConfig:
    """Monte-Carlo settings for the Gaussian expectations."""

    nodes: int = 200_000
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.nodes < 1000:
            raise ValueError("need at least 1000 Monte-Carlo nodes")


@dataclass
class FixedPointConfig:
    """Damped fixed-point iteration settings.

    damping is the maximal relaxation step; when adapt_damping is on (the
    default), the effective step is tuned each iteration from a secant
    estimate of the dominant slope of the update map, which keeps the
    iteration stable in the weak-regularization regime where the raw map
    is strongly expansive.  The stage0_* fields override the shared
    schedule for the base stage.  allow_nonsmooth permits second-stage
    losses whose u-derivatives follow the a.e.-zero indicator convention
    (which forces chi = 0).
    """

    damping: float = 0.5
    tol: float = 1e-7
    max_iter: int = 500
    adapt_damping: bool = True
    stage0_damping: float | None = None
    stage0_tol: float | None = None
    stage0_max_iter: int | None = None
    allow_nonsmooth: bool = False

    def __post_init__(self):
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")

    def stage0(self) -> tuple[float, float, int]:
        return (self.stage0_damping if self.stage0_damping is not None else self.damping,
                self.stage0_tol if self.stage0_tol is not None else self.tol,
                self.stage0_max_iter if self.stage0_max_iter is not None else self.max_iter)


@dataclass
class StageDiagnostics:
    """Per-stage convergence record."""

    residual: float
    iters: int
    converged: bool
    clipped_mass: float
    param_se: dict
    contraction: float

    def fixed_point_se(self) -> dict:
        """Kernel standard errors inflated by the fixed-point sensitivity.

        The converged point solves the empirical equations on the drawn
        nodes; its Monte-Carlo error is the one-step kernel error amplified
        by roughly 1/(1 - contraction rate) of the undamped map.
        """
        gain = 1.0 / max(1.0 - self.contraction, 0.05)
        out = {}
        for key, val in self.param_se.items():
            out[key] = np.asarray(val) * gain if np.ndim(val) else float(val) * gain
        return out


@dataclass
class SolveResult:
    p0: Stage0Params
    p1: Stage1Params
    diag0: StageDiagnostics
    diag1: StageDiagnostics
    law: "GaussianLaw"

    @property
    def converged(self) -> bool:
        return self.diag0.converged and self.diag1.converged


# ---------------------------------------------------------------------------
# Gaussian law assembly
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GaussianLaw:
    """Per-class mean and shared covariance of the replica Gaussian.

    means[c] = (m_c, m0_c, nu_c, rho_c); cov is the (3+K)^2 matrix in the
    same coordinate order (g1, g2, g3, g_c...).  factor is a square root
    of cov after PSD projection (cov itself is stored exactly as
    assembled; only the sampling factor is projected).
    """

    means: np.ndarray
    cov: np.ndarray
    factor: np.ndarray
    clipped_mass: float
    class_probs: np.ndarray
    class_values: np.ndarray
    noise: NoiseModel


def _psd_factor(mat: np.ndarray) -> tuple[np.ndarray, float]:
    """Symmetric square root with eigenvalue clipping; returns (F, negative mass).

    Columns are ordered by decreasing eigenvalue with a canonical sign, so
    deterministic embeddings (leading coordinate along the top eigenvector)
    come out reproducibly.
    """
    w, u = np.linalg.eigh(mat)
    order = np.argsort(w)[::-1]
    w, u = w[order], u[:, order]
    flip = np.where(u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])] < 0,
                    -1.0, 1.0)
    u = u * flip
    neg = float(np.sum(np.abs(w[w < 0.0])))
    if (w < 0.0).any():
        w = np.maximum(w, EIG_CLIP)
    return u * np.sqrt(np.maximum(w, 0.0)), neg


def _conditional_row(cov: np.ndarray, cross: np.ndarray,
                     marginal_var: float) -> tuple[np.ndarray, float, float]:
    """Regression coefficients and residual std of one more Gaussian coordinate.

    Solves cov a = cross in the least-squares sense (cov may be singular)
    and clips a negative Schur complement to zero, reporting the clipped
    amount.  Schur complements below a relative deadband are snapped to
    exactly zero: sqrt has infinite slope at 0+, and fixed points sitting
    on the degenerate boundary (final stage identical to the base stage)
    would otherwise be irresolvable beyond the square root of the step
    size.
    """
    a, *_ = np.linalg.lstsq(cov, cross, rcond=None)
    s_sq = marginal_var - float(cross @ a)
    clipped = max(0.0, -s_sq)
    if s_sq < 1e-9 * max(abs(marginal_var), 1e-30):
        s_sq = 0.0
    return a, math.sqrt(max(s_sq, 0.0)), clipped


def build_gaussian_law(spec: ProblemSpec, p0: Stage0Params,
                       p1: Stage1Params) -> GaussianLaw:
    """Assemble the replica Gaussian law from the current order parameters."""
    k = spec.n_classes
    vals = ([p1.theta, p1.t, p1.q, p1.chi, p1.V, p0.theta0, p0.q0, p0.V0]
            + list(p1.m) + list(p0.m0))
    if not np.all(np.isfinite(vals)):
        raise ValueError("non-finite order parameters")

    means = np.empty((k, 3 + k))
    means[:, 0] = p1.m
    means[:, 1] = p0.m0
    means[:, 2] = spec.nu
    means[:, 3:] = spec.rho

    cov = np.empty((3 + k, 3 + k))
    cov[0, 0] = p1.q
    cov[0, 1] = cov[1, 0] = p1.t
    cov[0, 2] = cov[2, 0] = p1.theta
    cov[0, 3:] = cov[3:, 0] = p1.m
    cov[1, 1] = p0.q0
    cov[1, 2] = cov[2, 1] = p0.theta0
    cov[1, 3:] = cov[3:, 1] = p0.m0
    cov[2, 2] = spec.beta_norm_sq
    cov[2, 3:] = cov[3:, 2] = spec.nu
    cov[3:, 3:] = spec.rho

    # factor built row-by-row in the order (g3, g_c..., g2, g1) so the
    # mean-geometry block is never altered, then permuted back
    a_gram = spec.gram_matrix()
    f_a, mass = _psd_factor(a_gram)
    v2 = np.concatenate(([p0.theta0], p0.m0))
    a2, s2, clip2 = _conditional_row(a_gram, v2, p0.q0)

    cov0 = np.empty((2 + k, 2 + k))
    cov0[:1 + k, :1 + k] = a_gram
    cov0[:1 + k, 1 + k] = v2
    cov0[1 + k, :1 + k] = v2
    cov0[1 + k, 1 + k] = p0.q0
    v1 = np.concatenate(([p1.theta], p1.m, [p1.t]))
    a1, s1, clip1 = _conditional_row(cov0, v1, p1.q)

    lower = np.zeros((3 + k, 3 + k))
    lower[:1 + k, :1 + k] = f_a
    lower[1 + k, :1 + k] = a2 @ f_a
    lower[1 + k, 1 + k] = s2
    lower[2 + k, :2 + k] = a1 @ lower[:2 + k, :2 + k]
    lower[2 + k, 2 + k] = s1

    # permute rows from (g3, g_c, g2, g1) to (g1, g2, g3, g_c)
    perm = np.concatenate(([2 + k, 1 + k, 0], np.arange(1, 1 + k)))
    factor = lower[perm, :]

    return GaussianLaw(means=means, cov=cov, factor=factor,
                       clipped_mass=mass + clip2 + clip1,
                       class_probs=spec.class_probs,
                       class_values=spec.class_values,
                       noise=spec.noise)


# ---------------------------------------------------------------------------
# Monte-Carlo machinery
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _Nodes:
    Z: np.ndarray
    idx: np.ndarray
    cval: np.ndarray
    eps: np.ndarray
    half: int | None   # pair count when antithetic


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def _draw_nodes(spec: ProblemSpec, integ: IntegratorConfig, dim: int,
                stream: int) -> _Nodes:
    rng = _rng(integ.seed, stream)
    n = integ.nodes
    if integ.antithetic:
        half = (n + 1) // 2
        z_half = rng.standard_normal((half, dim))
        z = np.vstack([z_half, -z_half])
        idx_h = rng.choice(spec.n_classes, size=half, p=spec.class_probs)
        eps_h = spec.noise.sample(rng, half)
        idx = np.concatenate([idx_h, idx_h])
        eps = np.concatenate([eps_h, eps_h])
        return _Nodes(z, idx, spec.class_values[idx], eps, half)
    z = rng.standard_normal((n, dim))
    idx = rng.choice(spec.n_classes, size=n, p=spec.class_probs)
    eps = spec.noise.sample(rng, n)
    return _Nodes(z, idx, spec.class_values[idx], eps, None)


def _mc_mean(vals: np.ndarray, nodes: _Nodes) -> float:
    return float(np.mean(vals))


def _mc_se(vals: np.ndarray, nodes: _Nodes) -> float:
    if nodes.half is not None:
        pair = 0.5 * (vals[:nodes.half] + vals[nodes.half:])
        if pair.shape[0] < 2:
            return 0.0
        return float(np.std(pair, ddof=1) / math.sqrt(pair.shape[0]))
    if vals.shape[0] < 2:
        return 0.0
    return float(np.std(vals, ddof=1) / math.sqrt(vals.shape[0]))


def _solve_v(alpha: float, lam: float, kernel: Callable[[float], float]) -> float:
    """Root of 1/(alpha V) = kernel(V) + lam on (0, 1/(alpha lam)].

    kernel(V) is the Monte-Carlo mean of d2/(1 + V d2) at the V-dependent
    prox point; it is nonnegative, so the equation always brackets.
    """
    vmax = 1.0 / (alpha * lam)
    k_max = kernel(vmax)
    if k_max <= 0.0:
        return vmax
    def h(v):
        return 1.0 / (alpha * v) - lam - kernel(v)
    lo = 0.5 * vmax
    h_lo = h(lo)
    while h_lo <= 0.0:
        lo *= 0.5
        if lo < 1e-16 * vmax:
            raise RuntimeError("failed to bracket the V equation")
        h_lo = h(lo)
    return float(brentq(h, lo, vmax, xtol=1e-14, rtol=1e-12))


def _stage0_fn(loss0: Stage0Loss, g3, cval, eps) -> ScalarConvexFn:
    return ScalarConvexFn(
        f=lambda z: loss0.eval(z, g3, cval, eps),
        f1=lambda z: loss0.d1(z, g3, cval, eps),
        f2=lambda z: loss0.d2(z, g3, cval, eps),
    )


def _stage1_fn(loss1: Stage1Loss, u, g3, cval, eps) -> ScalarConvexFn:
    return ScalarConvexFn(
        f=lambda z: loss1.eval(z, u, g3, cval, eps),
        f1=lambda z: loss1.dr(z, u, g3, cval, eps),
        f2=lambda z: loss1.drr(z, u, g3, cval, eps),
    )


# ---------------------------------------------------------------------------
# stage-0 update
# ---------------------------------------------------------------------------

class _Stage0Workspace:
    """Fixed node draws for the base stage; only the g2 row moves per iterate."""

    def __init__(self, spec: ProblemSpec, integ: IntegratorConfig, stream: int = 0):
        self.spec = spec
        k = spec.n_classes
        self.nodes = _draw_nodes(spec, integ, 2 + k, stream)
        self.a_gram = spec.gram_matrix()
        f_a, self.base_clip = _psd_factor(self.a_gram)
        centered = self.nodes.Z[:, :1 + k] @ f_a.T
        self.g3 = spec.nu[self.nodes.idx] + centered[:, 0]
        self.gc = spec.rho[self.nodes.idx, :] + centered[:, 1:]
        self._centered = centered
        self._z_extra = self.nodes.Z[:, 1 + k]
        self.fn_cache: dict = {}

    def _g2(self, p0: Stage0Params) -> tuple[np.ndarray, float]:
        v2 = np.concatenate(([p0.theta0], p0.m0))
        a2, s2, clip = _conditional_row(self.a_gram, v2, p0.q0)
        g2 = p0.m0[self.nodes.idx] + self._centered @ a2 + s2 * self._z_extra
        return g2, clip

    def rhs(self, p0: Stage0Params) -> tuple[Stage0Params, dict, float, np.ndarray]:
        spec, nodes = self.spec, self.nodes
        g2, clip = self._g2(p0)
        fn = _stage0_fn(spec.loss0, self.g3, nodes.cval, nodes.eps)
        warm = self.fn_cache.get("u_warm")

        def kernel(v):
            u_v = prox1d_batch(fn, v, g2, z0=self.fn_cache.get("u_warm"))
            self.fn_cache["u_warm"] = u_v
            d2 = spec.loss0.d2(u_v, self.g3, nodes.cval, nodes.eps)
            return _mc_mean(d2 / (1.0 + v * d2), nodes)

        v0 = _solve_v(spec.alpha, spec.lam0, kernel)
        u = prox1d_batch(fn, v0, g2, z0=self.fn_cache.get("u_warm", warm))
        self.fn_cache["u_warm"] = u
        d1 = spec.loss0.d1(u, self.g3, nodes.cval, nodes.eps)
        d2 = spec.loss0.d2(u, self.g3, nodes.cval, nodes.eps)

        k_theta = -d1 * self.g3 / spec.lam0
        k_q = -d1 * u / spec.lam0
        k_m = -d1[:, None] * self.gc / spec.lam0

        theta0 = _mc_mean(k_theta, nodes)
        q0 = _mc_mean(k_q, nodes)
        m0 = np.array([_mc_mean(k_m[:, j], nodes) for j in range(spec.n_classes)])

        kern_v = d2 / (1.0 + v0 * d2)
        se = {
            "theta0": _mc_se(k_theta, nodes),
            "q0": _mc_se(k_q, nodes),
            "m0": np.array([_mc_se(k_m[:, j], nodes) for j in range(spec.n_classes)]),
            "V0": spec.alpha * v0 ** 2 * _mc_se(kern_v, nodes),
        }
        upd = Stage0Params(m0=m0, theta0=theta0, q0=q0, V0=v0)
        return upd, se, clip + self.base_clip, u


def _init_stage0(spec: ProblemSpec) -> Stage0Params:
    return Stage0Params(m0=np.zeros(spec.n_classes), theta0=0.1, q0=0.1,
                        V0=1.0 / (spec.alpha * (spec.lam0 + 1.0)))


def _init_stage1(spec: ProblemSpec) -> Stage1Params:
    return Stage1Params(m=np.zeros(spec.n_classes), theta=0.1, t=0.0, q=0.1,
                        V=1.0 / (spec.alpha * (spec.lam + 1.0)), chi=0.0)


def _stage0_residual(p: Stage0Params, upd: Stage0Params) -> float:
    return max(abs(upd.theta0 - p.theta0), abs(upd.q0 - p.q0),
               abs(upd.V0 - p.V0), float(np.max(np.abs(upd.m0 - p.m0), initial=0.0)))


def _stage1_residual(p: Stage1Params, upd: Stage1Params) -> float:
    return max(abs(upd.theta - p.theta), abs(upd.q - p.q), abs(upd.t - p.t),
               abs(upd.V - p.V), abs(upd.chi - p.chi),
               float(np.max(np.abs(upd.m - p.m), initial=0.0)))


def _drive_fixed_point(rhs: Callable, x0: np.ndarray, solved_mask: np.ndarray,
                       eta_max: float, tol: float, max_iter: int,
                       adapt: bool, project: Callable | None = None,
                       memory: int = 5) -> tuple[np.ndarray, dict, float, float, int, bool, float]:
    """Damped fixed-point iteration with safeguarded Anderson extrapolation.

    rhs maps a parameter vector to (update_vector, se_dict, clip_mass).
    With adapt on, steps combine the damped update x + eta (F(x) - x) with
    a least-squares extrapolation over the last few residuals, which keeps
    the iteration convergent in the weak-regularization regime where the
    raw map is strongly expansive-oscillatory (slope ~ -1/lambda); a
    residual-growth safeguard restarts from the best visited point with a
    halved step.  project() pushes iterates back onto the feasible cone
    (Cauchy-Schwarz bounds on the overlaps).  With adapt off, components
    flagged in solved_mask (V, chi) are assigned from their inner solves
    and the rest plainly relaxed.

    Returns (x, se, clip, residual, iters, converged, rho_hat).
    """
    x = np.asarray(x0, dtype=float).copy()
    eta = eta_max
    hist_dx: list[np.ndarray] = []
    hist_dg: list[np.ndarray] = []
    prev_x = None
    prev_g = None
    best_x = None
    best_resid = math.inf
    rho_hat = 0.0
    se: dict = {}
    clip = 0.0
    residual = math.inf
    converged = False
    iters = 0
    for iters in range(1, max_iter + 1):
        f, se_new, clip_new = rhs(x)
        ok = bool(np.all(np.isfinite(f)))
        if ok:
            g = f - x
            residual = float(np.max(np.abs(g)))
            se, clip = se_new, clip_new
        if adapt and (not ok or (best_resid < math.inf and residual > 4.0 * best_resid)):
            # diverging: restart plain damping from the best visited point
            if best_x is None:
                raise FloatingPointError("fixed-point update non-finite at the initial point")
            eta = max(0.5 * eta, 1e-3)
            hist_dx.clear()
            hist_dg.clear()
            prev_x = prev_g = None
            x = best_x.copy()
            continue
        if not ok:
            raise FloatingPointError("fixed-point update produced non-finite values")
        if residual < best_resid:
            best_x, best_resid = x.copy(), residual
        if residual < tol:
            converged = True
            break
        if prev_x is not None:
            hist_dx.append(x - prev_x)
            hist_dg.append(g - prev_g)
            if len(hist_dx) > memory:
                hist_dx.pop(0)
                hist_dg.pop(0)
            dx, dg = hist_dx[-1], hist_dg[-1]
            denom = float(dx @ dx)
            if denom > 0.0:
                rho_hat = 1.0 + float(dg @ dx) / denom
        prev_x, prev_g = x.copy(), g.copy()
        if adapt and hist_dx:
            d_x = np.stack(hist_dx, axis=1)
            d_g = np.stack(hist_dg, axis=1)
            gamma, *_ = np.linalg.lstsq(d_g, g, rcond=None)
            norm = float(np.linalg.norm(gamma))
            if norm > 50.0:   # wild extrapolation, usually near a kink
                gamma = gamma * (50.0 / norm)
            x_new = x + eta * g - (d_x + eta * d_g) @ gamma
            if not np.all(np.isfinite(x_new)):
                x_new = x + eta * g
        else:
            x_new = x + eta * g
            if not adapt:
                x_new[solved_mask] = f[solved_mask]
        if project is not None:
            x_new = project(x_new)
        x = x_new
    return x, se, clip, residual, iters, converged, rho_hat


def stage0_update(spec: ProblemSpec, p0: Stage0Params,
                  integ: IntegratorConfig) -> Stage0Params:
    """One evaluation of the base-stage right-hand sides on fresh draws."""
    if p0.V0 <= 0:
        raise ValueError("V0 must be positive")
    return _Stage0Workspace(spec, integ).rhs(p0)[0]


def _pack0(p: Stage0Params) -> np.ndarray:
    return np.concatenate(([p.theta0, p.q0], p.m0, [p.V0]))


def _unpack0(x: np.ndarray) -> Stage0Params:
    return Stage0Params(m0=x[2:-1], theta0=float(x[0]), q0=float(x[1]),
                        V0=float(x[-1]))


def _pack1(p: Stage1Params) -> np.ndarray:
    return np.concatenate(([p.theta, p.q, p.t], p.m, [p.V, p.chi]))


def _unpack1(x: np.ndarray) -> Stage1Params:
    return Stage1Params(m=x[3:-2], theta=float(x[0]), q=float(x[1]),
                        t=float(x[2]), V=float(x[-2]), chi=float(x[-1]))


def solve_stage0(spec: ProblemSpec, fp: FixedPointConfig | None = None,
                 integ: IntegratorConfig | None = None,
                 stream: int = 0) -> tuple[Stage0Params, StageDiagnostics]:
    """Damped fixed-point solve of the base-stage equations alone.

    Also serves as the independent single-stage solver used to check the
    passive endpoint of budgeted sweeps.
    """
    fp = fp or FixedPointConfig()
    integ = integ or IntegratorConfig()
    eta, tol, max_iter = fp.stage0()
    ws = _Stage0Workspace(spec, integ, stream=stream)

    def rhs(x):
        upd, se, clip, _ = ws.rhs(_unpack0(x))
        return _pack0(upd), se, clip

    a_gram = spec.gram_matrix()
    v0_max = 1.0 / (spec.alpha * spec.lam0)

    def project(x):
        # Cauchy-Schwarz cone: q0 >= v2' A^+ v2; V0 within its bracket.
        # Noise-level violations are left to the internal Schur clipping.
        v2 = np.concatenate(([x[0]], x[2:-1]))
        a2, *_ = np.linalg.lstsq(a_gram, v2, rcond=None)
        bound = float(v2 @ a2)
        if x[1] < bound * (1.0 - 1e-6) - 1e-12:
            x[1] = bound
        x[-1] = min(max(x[-1], 1e-12), v0_max)
        return x

    k = spec.n_classes
    mask = np.zeros(3 + k, dtype=bool)
    mask[-1] = True   # V0 assigned from its inner solve
    x, se, clip, residual, iters, converged, rho = _drive_fixed_point(
        rhs, _pack0(_init_stage0(spec)), mask, eta, tol, max_iter,
        fp.adapt_damping, project=project)
    diag = StageDiagnostics(residual=residual, iters=iters, converged=converged,
                            clipped_mass=clip, param_se=se,
                            contraction=float(np.clip(rho, 0.0, 0.95)))
    if not converged:
        warnings.warn(f"base stage did not converge: residual {residual:.3e}")
    return _unpack0(x), diag


# ---------------------------------------------------------------------------
# stage-1 update
# ---------------------------------------------------------------------------

class _Stage1Workspace:
    """Fixed draws and converged base stage; only the g1 row moves per iterate.

    The shared coordinate block (g3, g_c, g2) reuses the base-stage stream,
    so both stages see the same empirical sample and the joint overlaps
    (t in particular) stay consistent with the base-stage solution; only
    the extra final-predictor coordinate draws fresh randomness.
    """

    def __init__(self, spec: ProblemSpec, p0: Stage0Params,
                 integ: IntegratorConfig, stream: int = 0):
        self.spec = spec
        self.p0 = p0
        k = spec.n_classes
        base = _draw_nodes(spec, integ, 2 + k, stream)
        n_b = base.Z.shape[0]
        rng_extra = _rng(integ.seed, stream + 1)
        if base.half is not None:
            z_h = rng_extra.standard_normal(base.half)
            z_base = np.concatenate([z_h, -z_h])
        else:
            z_base = rng_extra.standard_normal(n_b)
        # every base node appears with +/- the extra coordinate, so the
        # empirical expectations are even in the conditional std of g1;
        # without this, Monte-Carlo noise puts a square-root kink in the
        # update map at the degenerate boundary q = t^2/q0 (final stage
        # equal to the base stage) and the iteration cannot resolve it
        z_col = np.concatenate([z_base, -z_base])
        idx = np.tile(base.idx, 2)
        self.nodes = _Nodes(np.column_stack([np.tile(base.Z, (2, 1)), z_col]),
                            idx, spec.class_values[idx],
                            np.tile(base.eps, 2), n_b)
        nodes = self.nodes
        self.a_gram = spec.gram_matrix()
        f_a, self.base_clip = _psd_factor(self.a_gram)
        centered_a = nodes.Z[:, :1 + k] @ f_a.T
        self.g3 = spec.nu[nodes.idx] + centered_a[:, 0]
        self.gc = spec.rho[nodes.idx, :] + centered_a[:, 1:]

        v2 = np.concatenate(([p0.theta0], p0.m0))
        a2, s2, self.clip2 = _conditional_row(self.a_gram, v2, p0.q0)
        g2_centered = centered_a @ a2 + s2 * nodes.Z[:, 1 + k]
        g2 = p0.m0[nodes.idx] + g2_centered
        self._centered0 = np.column_stack([centered_a, g2_centered])

        self.cov0 = np.empty((2 + k, 2 + k))
        self.cov0[:1 + k, :1 + k] = self.a_gram
        self.cov0[:1 + k, 1 + k] = v2
        self.cov0[1 + k, :1 + k] = v2
        self.cov0[1 + k, 1 + k] = p0.q0

        fn0 = _stage0_fn(spec.loss0, self.g3, nodes.cval, nodes.eps)
        self.u = prox1d_batch(fn0, p0.V0, g2)
        self.d1_0 = spec.loss0.d1(self.u, self.g3, nodes.cval, nodes.eps)
        d2_0 = spec.loss0.d2(self.u, self.g3, nodes.cval, nodes.eps)
        self.denom0 = 1.0 + p0.V0 * d2_0
        self.d2_0 = d2_0
        self._z_extra = nodes.Z[:, 2 + k]
        self._cache: dict = {}

    def _g1(self, p1: Stage1Params) -> tuple[np.ndarray, float]:
        v1 = np.concatenate(([p1.theta], p1.m, [p1.t]))
        a1, s1, clip = _conditional_row(self.cov0, v1, p1.q)
        g1 = p1.m[self.nodes.idx] + self._centered0 @ a1 + s1 * self._z_extra
        return g1, clip

    def rhs(self, p1: Stage1Params) -> tuple[Stage1Params, dict, float, np.ndarray]:
        spec, nodes = self.spec, self.nodes
        g1, clip = self._g1(p1)
        x_arg = g1 + p1.chi * self.d1_0
        fn = _stage1_fn(spec.loss1, self.u, self.g3, nodes.cval, nodes.eps)
        warm = self._cache.get("r_warm")

        def kernel(v):
            r_v = prox1d_batch(fn, v, x_arg, z0=self._cache.get("r_warm"))
            self._cache["r_warm"] = r_v
            drr = spec.loss1.drr(r_v, self.u, self.g3, nodes.cval, nodes.eps)
            return _mc_mean(drr / (1.0 + v * drr), nodes)

        v = _solve_v(spec.alpha, spec.lam, kernel)
        r = prox1d_batch(fn, v, x_arg, z0=self._cache.get("r_warm", warm))
        self._cache["r_warm"] = r
        dr = spec.loss1.dr(r, self.u, self.g3, nodes.cval, nodes.eps)
        drr = spec.loss1.drr(r, self.u, self.g3, nodes.cval, nodes.eps)
        dru = spec.loss1.dru(r, self.u, self.g3, nodes.cval, nodes.eps)

        k_theta = -dr * self.g3 / spec.lam
        k_q = -dr * r / spec.lam
        k_t = -dr * self.u / spec.lam
        k_m = -dr[:, None] * self.gc / spec.lam

        theta = _mc_mean(k_theta, nodes)
        q = _mc_mean(k_q, nodes)
        t = _mc_mean(k_t, nodes)
        m = np.array([_mc_mean(k_m[:, j], nodes) for j in range(spec.n_classes)])

        # chi from its closed form, all kernels on the same nodes
        k1 = dru / self.denom0
        k2 = self.d2_0 / self.denom0
        k3 = drr * dru * self.p0.V0 * v / ((1.0 + v * drr) * self.denom0)
        k4 = drr / ((1.0 + v * drr) * self.denom0)
        num = (_mc_mean(k1, nodes) / ((spec.lam0 + _mc_mean(k2, nodes)) * spec.alpha)
               - _mc_mean(k3, nodes))
        den = spec.lam + _mc_mean(k4, nodes)
        chi = num / den

        kern_v = drr / (1.0 + v * drr)
        se = {
            "theta": _mc_se(k_theta, nodes),
            "q": _mc_se(k_q, nodes),
            "t": _mc_se(k_t, nodes),
            "m": np.array([_mc_se(k_m[:, j], nodes) for j in range(spec.n_classes)]),
            "V": spec.alpha * v ** 2 * _mc_se(kern_v, nodes),
            "chi": (_mc_se(k1, nodes) / ((spec.lam0 + _mc_mean(k2, nodes)) * spec.alpha)
                    + _mc_se(k3, nodes)) / den,
        }
        upd = Stage1Params(m=m, theta=theta, t=t, q=q, V=v, chi=chi)
        return upd, se, clip + self.clip2 + self.base_clip, r


def stage1_update(spec: ProblemSpec, p0: Stage0Params, p1: Stage1Params,
                  integ: IntegratorConfig) -> Stage1Params:
    """One evaluation of the final-stage right-hand sides on fresh draws."""
    if p1.V <= 0 or p0.V0 <= 0:
        raise ValueError("V and V0 must be positive")
    return _Stage1Workspace(spec, p0, integ).rhs(p1)[0]


def solve(spec: ProblemSpec, fp: FixedPointConfig | None = None,
          integ: IntegratorConfig | None = None,
          p0: Stage0Params | None = None,
          diag0: StageDiagnostics | None = None) -> SolveResult:
    """Solve both stages: base stage first, then the final stage holding it fixed.

    A converged base stage may be passed in (p0, diag0) to avoid re-solving
    it, e.g. across policies sharing the same base problem.
    """
    fp = fp or FixedPointConfig()
    integ = integ or IntegratorConfig()
    if not spec.loss1.u_smooth and not fp.allow_nonsmooth:
        raise ValueError(
            "second-stage loss has a.e.-zero u-derivatives (exact indicator "
            "policy); pass allow_nonsmooth=True to adopt that convention, "
            "which forces chi = 0")

    if p0 is None:
        p0, diag0 = solve_stage0(spec, fp, integ, stream=0)
    elif diag0 is None:
        diag0 = StageDiagnostics(residual=math.nan, iters=0, converged=True,
                                 clipped_mass=0.0, param_se={}, contraction=0.0)

    ws = _Stage1Workspace(spec, p0, integ, stream=0)

    def rhs(x):
        upd, se, clip, _ = ws.rhs(_unpack1(x))
        return _pack1(upd), se, clip

    v_max = 1.0 / (spec.alpha * spec.lam)

    def project(x):
        # q >= v1' Phi0^+ v1 keeps the conditional g1 row well defined;
        # noise-level violations are left to the internal Schur clipping
        v1 = np.concatenate(([x[0]], x[3:-2], [x[2]]))
        a1, *_ = np.linalg.lstsq(ws.cov0, v1, rcond=None)
        bound = float(v1 @ a1)
        if x[1] < bound * (1.0 - 1e-6) - 1e-12:
            x[1] = bound
        x[-2] = min(max(x[-2], 1e-12), v_max)
        return x

    k = spec.n_classes
    mask = np.zeros(5 + k, dtype=bool)
    mask[-2:] = True   # V from its inner solve, chi from its closed form
    x, se, clip, residual, iters, converged, rho = _drive_fixed_point(
        rhs, _pack1(_init_stage1(spec)), mask, fp.damping, fp.tol, fp.max_iter,
        fp.adapt_damping, project=project)
    diag1 = StageDiagnostics(residual=residual, iters=iters, converged=converged,
                             clipped_mass=clip, param_se=se,
                             contraction=float(np.clip(rho, 0.0, 0.95)))
    if not converged:
        warnings.warn(f"final stage did not converge: residual {residual:.3e}")
    p1 = _unpack1(x)
    law = build_gaussian_law(spec, p0, p1)
    return SolveResult(p0=p0, p1=p1, diag0=diag0, diag1=diag1, law=law)


def audit_residual(spec: ProblemSpec, p0: Stage0Params, p1: Stage1Params,
                   integ: IntegratorConfig) -> tuple[float, float]:
    """Re-evaluate both updates on fresh draws; returns (residual, max SE)."""
    upd0, se0, *_ = _Stage0Workspace(spec, integ, stream=7).rhs(p0)
    upd1, se1, *_ = _Stage1Workspace(spec, p0, integ, stream=8).rhs(p1)
    residual = max(_stage0_residual(p0, upd0), _stage1_residual(p1, upd1))
    ses = [se0["theta0"], se0["q0"], float(np.max(se0["m0"], initial=0.0)), se0["V0"],
           se1["theta"], se1["q"], se1["t"], float(np.max(se1["m"], initial=0.0)),
           se1["V"], se1["chi"]]
    return residual, float(max(ses))


# ---------------------------------------------------------------------------
# test metrics
# ---------------------------------------------------------------------------

def eval_test_metric(law: GaussianLaw, metric: Callable,
                     integ: IntegratorConfig | None = None,
                     return_se: bool = False):
    """Monte-Carlo expectation of metric(g1, g3, c, eps) under the law."""
    integ = integ or IntegratorConfig()
    rng = _rng(integ.seed, 3)
    k = law.class_probs.shape[0]
    dim = 3 + k
    n = integ.nodes
    if integ.antithetic:
        half = (n + 1) // 2
        z_half = rng.standard_normal((half, dim))
        z = np.vstack([z_half, -z_half])
        idx = np.concatenate([rng.choice(k, size=half, p=law.class_probs)] * 2)
        eps = np.concatenate([law.noise.sample(rng, half)] * 2)
        nodes = _Nodes(z, idx, law.class_values[idx], eps, half)
    else:
        z = rng.standard_normal((n, dim))
        idx = rng.choice(k, size=n, p=law.class_probs)
        eps = law.noise.sample(rng, n)
        nodes = _Nodes(z, idx, law.class_values[idx], eps, None)
    g = law.means[nodes.idx] + nodes.Z @ law.factor.T
    vals = np.asarray(metric(g[:, 0], g[:, 2], nodes.cval, nodes.eps), dtype=float)
    if return_se:
        return _mc_mean(vals, nodes), _mc_se(vals, nodes)
    return _mc_mean(vals, nodes)


def misclassification_metric(link: LinkFunction) -> Callable:
    """Indicator metric: the predicted sign disagrees with the linked label."""
    def metric(r_hat, s, c, eps):
        y = link.eval(s, c, eps)
        pred = np.where(np.asarray(r_hat) >= 0, 1.0, -1.0)
        return (pred != np.where(np.asarray(y) >= 0, 1.0, -1.0)).astype(float)
    return metric


def test_error_binary(p1: Stage1Params, beta_norm_sq: float) -> float:
    """Misclassification probability for zero-mean classes with sign labels.

    Equals arccos(theta / sqrt(q * |beta|^2)) / pi; q = 0 means the
    predictor is degenerate and random guessing (0.5) is returned.
    """
    if p1.q <= 0.0:
        warnings.warn("degenerate predictor (q = 0): returning chance error")
        return 0.5
    rho = p1.theta / math.sqrt(p1.q * beta_norm_sq)
    rho = min(1.0, max(-1.0, rho))
    return math.acos(rho) / math.pi
