"""Budget-constrained selection and pruning experiments.

Instantiates the two-stage machinery for pool-based label selection on
the noiseless sign teacher (budget gamma, base-stage allocation psi,
margin thresholds saturating the budget on average) and for data pruning
on the binary Gaussian mixture, each runnable through the asymptotic
solver and the finite-dimensional simulator.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import erf, erfinv

from . import erm_sim
from .losses import (Stage0Loss, Stage1Loss, SelectionPolicy, class_flip_link,
                     constant_policy, correct_classified_policy, flip_noise,
                     large_margin_policy, make_al_losses, make_pruning_losses,
                     mixed_margin_policy, no_noise, sign_link,
                     small_margin_policy)
from .state_evolution import (FixedPointConfig, IntegratorConfig, ProblemSpec,
                              Stage0Params, Stage1Params, StageDiagnostics,
                              SolveResult, _Stage1Workspace, eval_test_metric,
                              misclassification_metric, solve, solve_stage0,
                              test_error_binary)


# ---------------------------------------------------------------------------
# budget geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BudgetSpec:
    """Total label budget gamma and base-stage allocation psi."""

    gamma: float
    psi: float

    def __post_init__(self):
        if not 0.0 < self.psi <= self.gamma < 1.0:
            raise ValueError(
                f"need 0 < psi <= gamma < 1, got psi={self.psi}, gamma={self.gamma}")


def kappa_minus(gamma: float, psi: float, q0: float) -> float:
    """Small-margin threshold saturating the budget on average.

    The unqueried predictions are N(0, q0), so P(|u| < kappa) =
    erf(kappa / sqrt(2 q0)) must equal (gamma - psi)/(1 - psi).
    """
    if psi <= 0 or psi >= 1 or q0 <= 0:
        raise ValueError("need 0 < psi < 1 and q0 > 0")
    if gamma >= 1.0:
        return math.inf
    if psi >= gamma:
        return 0.0
    return math.sqrt(2.0 * q0) * float(erfinv((gamma - psi) / (1.0 - psi)))


def kappa_plus(gamma: float, psi: float, q0: float) -> float:
    """Large-margin threshold: P(|u| > kappa) saturates the remaining budget."""
    if psi <= 0 or psi >= 1 or q0 <= 0:
        raise ValueError("need 0 < psi < 1 and q0 > 0")
    if gamma >= 1.0:
        return 0.0
    if psi >= gamma:
        return math.inf
    return math.sqrt(2.0 * q0) * float(erfinv((1.0 - gamma) / (1.0 - psi)))


def kappa_plus_for_mixed(kappa_m: float, gamma: float, psi: float,
                         q0: float) -> float:
    """Outer threshold pairing with an inner one so the budget stays saturated.

    Solves erf(k-/s) + 1 - erf(k+/s) = (gamma - psi)/(1 - psi) with
    s = sqrt(2 q0); infeasible inner thresholds (band mass already above
    budget) are rejected.
    """
    if psi <= 0 or psi >= 1 or q0 <= 0:
        raise ValueError("need 0 < psi < 1 and q0 > 0")
    target = (gamma - psi) / (1.0 - psi)
    scale = math.sqrt(2.0 * q0)
    inner = float(erf(kappa_m / scale)) if np.isfinite(kappa_m) else 1.0
    outer_mass = target - inner
    if outer_mass < -1e-12:
        raise ValueError(
            f"inner band mass {inner:.6f} already exceeds the budget share {target:.6f}")
    if outer_mass <= 1e-12:   # budget exhausted by the inner band
        return math.inf
    rem = 1.0 - outer_mass
    if rem >= 1.0:
        return math.inf
    return scale * float(erfinv(rem))


def selected_mass(policy_kind: str, gamma: float, psi: float) -> float:
    """Theoretical selected fraction psi + (1-psi) P(policy keeps)."""
    # thresholds are chosen to saturate the budget, so this is gamma by
    # construction; recomputed from the erf identities as a consistency check
    if policy_kind in ("small-margin", "large-margin", "mixed"):
        return psi + (1.0 - psi) * (gamma - psi) / (1.0 - psi)
    raise ValueError(f"no budget identity for policy kind {policy_kind!r}")


def build_policy(kind: str, gamma: float, psi: float, q0: float,
                 width_rel: float = 0.05,
                 kappa_minus_frac: float = 1.0) -> SelectionPolicy:
    """Budget-saturating policy of the given kind at base norm q0.

    width_rel is the mollification width in units of sqrt(q0); 0 keeps the
    exact indicator (simulator convention).
    """
    width = width_rel * math.sqrt(q0)
    if kind == "small-margin":
        return small_margin_policy(kappa_minus(gamma, psi, q0), width)
    if kind == "large-margin":
        return large_margin_policy(kappa_plus(gamma, psi, q0), width)
    if kind == "mixed":
        km = kappa_minus_frac * kappa_minus(gamma, psi, q0)
        kp = kappa_plus_for_mixed(km, gamma, psi, q0)
        return mixed_margin_policy(km, kp, width)
    raise ValueError(f"unknown policy kind {kind!r}")


# ---------------------------------------------------------------------------
# problem factories
# ---------------------------------------------------------------------------

@dataclass
class ALSetting:
    """Selection problem template: isotropic data, noiseless sign teacher."""

    alpha: float
    lam0: float
    lam: float
    gamma: float
    base0: Stage0Loss
    base1: Stage1Loss
    beta_norm_sq: float = 1.0


def al_problem(setting: ALSetting, psi: float,
               policy: SelectionPolicy) -> ProblemSpec:
    """Two-class {0,1} spec: c = 1 marks the uniformly queried base subset."""
    loss0, loss1 = make_al_losses(setting.base0, setting.base1, policy,
                                  psi, setting.gamma)
    return ProblemSpec(
        alpha=setting.alpha, lam0=setting.lam0, lam=setting.lam,
        class_probs=np.array([1.0 - psi, psi]),
        class_values=np.array([0.0, 1.0]),
        nu=np.zeros(2), rho=np.zeros((2, 2)),
        beta_norm_sq=setting.beta_norm_sq,
        link=sign_link(), noise=no_noise(),
        loss0=loss0, loss1=loss1)


def stage1_as_stage0(loss1: Stage1Loss) -> Stage0Loss:
    """View a u-independent second-stage loss as a first-stage loss.

    Evaluates at u = 0; only valid when the loss does not actually depend
    on u (policy-free bases).  The third derivative is not part of the
    second-stage surface and is returned as zero.
    """
    def at0(fn):
        return lambda z, s, c, eps: fn(z, np.zeros(np.shape(z)), s, c, eps)
    return Stage0Loss(f"as0({loss1.name})", at0(loss1.eval), at0(loss1.dr),
                      at0(loss1.drr),
                      lambda z, s, c, eps: np.zeros(np.broadcast(np.asarray(z), np.asarray(s)).shape))


def passive_reference(setting: ALSetting, fraction: float,
                      fp: FixedPointConfig | None = None,
                      integ: IntegratorConfig | None = None
                      ) -> tuple[Stage0Params, StageDiagnostics]:
    """Single-stage solve of an ERM on a uniformly subsampled fraction.

    Independent reference for the passive endpoint psi = gamma: trains the
    second-stage base loss on a Bernoulli(fraction) subset, never touching
    the two-stage machinery.
    """
    loss0 = make_al_losses(stage1_as_stage0(setting.base1), setting.base1,
                           constant_policy(0.0), fraction, fraction)[0]
    spec = ProblemSpec(
        alpha=setting.alpha, lam0=setting.lam, lam=setting.lam,
        class_probs=np.array([1.0 - fraction, fraction]),
        class_values=np.array([0.0, 1.0]),
        nu=np.zeros(2), rho=np.zeros((2, 2)),
        beta_norm_sq=setting.beta_norm_sq,
        link=sign_link(), noise=no_noise(),
        loss0=loss0, loss1=setting.base1)
    # stream 0 shares the coordinate draws with the main solver, so the
    # endpoint comparison is made at matched Monte-Carlo noise
    return solve_stage0(spec, fp, integ, stream=0)


# ---------------------------------------------------------------------------
# psi sweeps
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SweepRow:
    psi: float
    gamma: float
    alpha: float
    lam0: float
    lam: float
    policy: str
    kappa_minus: float
    kappa_plus: float
    p0: Stage0Params | None
    p1: Stage1Params | None
    egen_theory: float
    egen_sim_mean: float
    egen_sim_std: float
    seeds_ok: int
    residual: float
    iters: int
    converged: bool
    error: str = ""
    selected_frac_sim: float = math.nan
    diagnostics: dict = field(default_factory=dict)


@dataclass(eq=False)
class SweepResult:
    rows: list[SweepRow]

    def converged_rows(self) -> list[SweepRow]:
        return [r for r in self.rows if r.converged and math.isfinite(r.egen_theory)]


def _egen_se_delta(p1: Stage1Params, se1: dict, beta_norm_sq: float) -> float:
    """Delta-method standard error of the closed-form binary test error."""
    if p1.q <= 0:
        return math.nan
    rho = p1.theta / math.sqrt(p1.q * beta_norm_sq)
    rho = min(max(rho, -1 + 1e-12), 1 - 1e-12)
    d_rho = 1.0 / (math.pi * math.sqrt(1 - rho ** 2))
    d_theta = 1.0 / math.sqrt(p1.q * beta_norm_sq)
    d_q = p1.theta / (2 * p1.q ** 1.5 * math.sqrt(beta_norm_sq))
    return d_rho * math.sqrt((d_theta * float(se1["theta"])) ** 2
                             + (d_q * float(se1["q"])) ** 2)


def _sim_factories(setting: ALSetting, psi: float, kind: str,
                   kappa_minus_frac: float):
    """Per-seed loss builder and selection weight, thresholds from realized q0."""

    def policy_of(q0_hat):
        return build_policy(kind, setting.gamma, psi, q0_hat, width_rel=0.0,
                            kappa_minus_frac=kappa_minus_frac)

    def loss1_factory(q0_hat):
        return make_al_losses(setting.base0, setting.base1, policy_of(q0_hat),
                              psi, setting.gamma)[1]

    def selection_fn(q0_hat):
        pol = policy_of(q0_hat)
        return lambda u, c, eps: (1.0 - c) * pol.eval(u, c, eps) + c

    return loss1_factory, selection_fn


def sweep_point(setting: ALSetting, psi: float, kind: str = "small-margin",
                width_rel: float = 0.05, kappa_minus_frac: float = 1.0,
                fp: FixedPointConfig | None = None,
                integ: IntegratorConfig | None = None,
                sim_d: int = 0, sim_seeds: int = 0,
                n_test: int = 100_000, sim_seed0: int = 0) -> SweepRow:
    """Solve one psi point: base stage, thresholds, full solve, optional trials."""
    budget = BudgetSpec(gamma=setting.gamma, psi=psi)
    spec0 = al_problem(setting, psi, constant_policy(0.0))
    p0, diag0 = solve_stage0(spec0, fp, integ)
    policy = build_policy(kind, budget.gamma, psi, p0.q0, width_rel,
                          kappa_minus_frac)
    spec = al_problem(setting, psi, policy)
    res = solve(spec, fp, integ, p0=p0, diag0=diag0)
    egen = test_error_binary(res.p1, setting.beta_norm_sq)
    egen_se = _egen_se_delta(res.p1, res.diag1.fixed_point_se(),
                             setting.beta_norm_sq)

    sim_mean = sim_std = math.nan
    frac = math.nan
    seeds_ok = 0
    if sim_d > 0 and sim_seeds > 0:
        loss1_factory, selection_fn = _sim_factories(setting, psi, kind,
                                                     kappa_minus_frac)
        cfg = erm_sim.PipelineConfig(n_test=n_test,
                                     loss1_factory=loss1_factory,
                                     selection_fn=selection_fn)
        stats = erm_sim.run_trials(spec0, sim_d, sim_seeds, cfg, seed0=sim_seed0)
        sim_mean, sim_std = stats.test_error_stats()
        frac, _ = stats.mean_std(lambda r: r.selected_fraction)
        seeds_ok = stats.n_ok

    return SweepRow(
        psi=psi, gamma=setting.gamma, alpha=setting.alpha,
        lam0=setting.lam0, lam=setting.lam, policy=policy.label,
        kappa_minus=policy.kappa_minus, kappa_plus=policy.kappa_plus,
        p0=res.p0, p1=res.p1, egen_theory=egen,
        egen_sim_mean=sim_mean, egen_sim_std=sim_std, seeds_ok=seeds_ok,
        residual=max(res.diag0.residual, res.diag1.residual)
        if math.isfinite(res.diag0.residual) else res.diag1.residual,
        iters=res.diag0.iters + res.diag1.iters,
        converged=res.converged,
        selected_frac_sim=frac,
        diagnostics={
            "stage0": {"residual": res.diag0.residual, "iters": res.diag0.iters,
                       "clipped_mass": res.diag0.clipped_mass},
            "stage1": {"residual": res.diag1.residual, "iters": res.diag1.iters,
                       "clipped_mass": res.diag1.clipped_mass,
                       "contraction": res.diag1.contraction,
                       "egen_se": egen_se},
        })


def sweep_psi(setting: ALSetting, psi_grid, kind: str = "small-margin",
              width_rel: float = 0.05, kappa_minus_frac: float = 1.0,
              fp: FixedPointConfig | None = None,
              integ: IntegratorConfig | None = None,
              sim_d: int = 0, sim_seeds: int = 0, n_test: int = 100_000,
              sim_seed0: int = 0) -> SweepResult:
    """Theory (and optionally simulation) across a strictly increasing psi grid.

    Per-point failures are flagged in their rows and the sweep continues.
    """
    psi_grid = sorted(float(p) for p in psi_grid)
    if any(p2 - p1 <= 0 for p1, p2 in zip(psi_grid, psi_grid[1:])):
        raise ValueError("psi grid values must be strictly increasing")
    rows = []
    for psi in psi_grid:
        try:
            row = sweep_point(setting, psi, kind, width_rel, kappa_minus_frac,
                              fp, integ, sim_d, sim_seeds, n_test, sim_seed0)
        except Exception as exc:   # per-row isolation, sweep continues
            row = SweepRow(psi=psi, gamma=setting.gamma, alpha=setting.alpha,
                           lam0=setting.lam0, lam=setting.lam, policy=kind,
                           kappa_minus=math.nan, kappa_plus=math.nan,
                           p0=None, p1=None, egen_theory=math.nan,
                           egen_sim_mean=math.nan, egen_sim_std=math.nan,
                           seeds_ok=0, residual=math.nan, iters=0,
                           converged=False, error=str(exc))
            warnings.warn(f"sweep point psi={psi} failed: {exc}")
        rows.append(row)
    return SweepResult(rows=rows)


@dataclass(frozen=True)
class OptimumResult:
    psi: float
    egen: float
    boundary: bool


def locate_optimum(sweep: SweepResult) -> OptimumResult:
    """Grid argmin with quadratic refinement over the bracketing triple."""
    rows = sweep.converged_rows()
    if len(rows) < 3:
        raise ValueError("need at least 3 converged rows")
    psis = np.array([r.psi for r in rows])
    vals = np.array([r.egen_theory for r in rows])
    i = int(np.argmin(vals))
    if i == 0 or i == len(rows) - 1:
        return OptimumResult(psi=float(psis[i]), egen=float(vals[i]), boundary=True)
    x0, x1, x2 = psis[i - 1:i + 2]
    y0, y1, y2 = vals[i - 1:i + 2]
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    b = (x2 ** 2 * (y0 - y1) + x1 ** 2 * (y2 - y0) + x0 ** 2 * (y1 - y2)) / denom
    if a <= 0:
        return OptimumResult(psi=float(x1), egen=float(y1), boundary=False)
    xv = -b / (2 * a)
    xv = min(max(xv, x0), x2)
    c = y1 - a * x1 ** 2 - b * x1
    return OptimumResult(psi=float(xv), egen=float(a * xv ** 2 + b * xv + c),
                         boundary=False)


# ---------------------------------------------------------------------------
# data pruning
# ---------------------------------------------------------------------------

@dataclass
class PruningSetting:
    """Binary Gaussian mixture at +/- mu with labels y = c (optionally flipped)."""

    lam0: float
    lam: float
    base0: Stage0Loss
    base1: Stage1Loss
    mu_norm: float = 0.8
    flip_p: float = 0.0


def pruning_problem(setting: PruningSetting, alpha: float,
                    policy: SelectionPolicy) -> ProblemSpec:
    loss0, loss1 = make_pruning_losses(setting.base0, setting.base1, policy)
    m2 = setting.mu_norm ** 2
    return ProblemSpec(
        alpha=alpha, lam0=setting.lam0, lam=setting.lam,
        class_probs=np.array([0.5, 0.5]),
        class_values=np.array([1.0, -1.0]),
        nu=np.zeros(2),
        rho=np.array([[m2, -m2], [-m2, m2]]),
        beta_norm_sq=1.0,
        link=class_flip_link(),
        noise=flip_noise(setting.flip_p) if setting.flip_p > 0 else no_noise(1.0),
        loss0=loss0, loss1=loss1)


def _pruning_policy(variant: str, kappa: float, width: float) -> SelectionPolicy:
    if variant == "large-margin-clean":
        return large_margin_policy(kappa, width)
    if variant == "flip-noise-filter":
        return correct_classified_policy(width)
    raise ValueError(f"unknown pruning variant {variant!r}")


@dataclass(eq=False)
class PruningRow:
    alpha: float
    policy: str
    kappa_plus: float
    kept_frac_theory: float
    p0: Stage0Params | None
    p1: Stage1Params | None
    egen_theory: float
    egen_theory_se: float
    egen_sim_mean: float
    egen_sim_std: float
    seeds_ok: int
    residual: float
    iters: int
    converged: bool
    error: str = ""


def pruning_point(setting: PruningSetting, alpha: float,
                  policy: SelectionPolicy,
                  fp: FixedPointConfig | None = None,
                  integ: IntegratorConfig | None = None,
                  sim_d: int = 0, sim_seeds: int = 0,
                  n_test: int = 100_000, sim_seed0: int = 0,
                  p0: Stage0Params | None = None,
                  diag0: StageDiagnostics | None = None) -> PruningRow:
    spec = pruning_problem(setting, alpha, policy)
    res = solve(spec, fp, integ, p0=p0, diag0=diag0)
    egen, egen_se = eval_test_metric(res.law, misclassification_metric(spec.link),
                                     integ, return_se=True)
    ws = _Stage1Workspace(spec, res.p0, integ or IntegratorConfig(), stream=5)
    kept = float(np.mean(policy.eval(ws.u, ws.nodes.cval, ws.nodes.eps)))

    sim_mean = sim_std = math.nan
    seeds_ok = 0
    if sim_d > 0 and sim_seeds > 0:
        sim_policy = (_pruning_policy("flip-noise-filter", 0.0, 0.0)
                      if policy.kind == "correct-classified"
                      else large_margin_policy(policy.kappa_plus, 0.0)
                      if policy.kind == "large-margin"
                      else constant_policy(policy.level))
        loss1_sim = make_pruning_losses(setting.base0, setting.base1,
                                        sim_policy)[1]
        cfg = erm_sim.PipelineConfig(
            n_test=n_test,
            loss1_factory=lambda q0_hat: loss1_sim,
            selection_fn=lambda q0_hat: sim_policy.eval)
        stats = erm_sim.run_trials(spec, sim_d, sim_seeds, cfg, seed0=sim_seed0)
        sim_mean, sim_std = stats.test_error_stats()
        seeds_ok = stats.n_ok

    return PruningRow(
        alpha=alpha, policy=policy.label, kappa_plus=policy.kappa_plus,
        kept_frac_theory=kept, p0=res.p0, p1=res.p1, egen_theory=egen,
        egen_theory_se=egen_se,
        egen_sim_mean=sim_mean, egen_sim_std=sim_std, seeds_ok=seeds_ok,
        residual=max(res.diag0.residual, res.diag1.residual),
        iters=res.diag0.iters + res.diag1.iters, converged=res.converged)


def run_pruning_experiment(setting: PruningSetting, variant: str, alpha_grid,
                           kappa: float = 0.5, width_rel: float = 0.05,
                           fp: FixedPointConfig | None = None,
                           integ: IntegratorConfig | None = None,
                           sim_d: int = 0, sim_seeds: int = 0,
                           n_test: int = 100_000,
                           sim_seed0: int = 0) -> list[PruningRow]:
    """Pruned and full-data test-error curves over the sample-ratio grid.

    variant selects the pruning rule: keep large-margin samples on clean
    labels, or keep base-classifier-consistent samples under flip noise.
    The policy is mollified at width_rel * sqrt(q0) for the asymptotic
    solver; the simulator keeps exact indicators.
    """
    rows: list[PruningRow] = []
    for alpha in alpha_grid:
        p0 = diag0 = None
        try:
            # the base stage never sees the policy: solve it once per alpha
            spec0 = pruning_problem(setting, alpha, constant_policy(1.0))
            p0, diag0 = solve_stage0(spec0, fp, integ)
        except Exception as exc:
            warnings.warn(f"pruning base stage alpha={alpha} failed: {exc}")
        for filtered in (True, False):
            try:
                if p0 is None:
                    raise RuntimeError("base stage unavailable")
                if filtered:
                    width = width_rel * math.sqrt(max(p0.q0, 1e-12))
                    policy = _pruning_policy(variant, kappa, width)
                else:
                    policy = constant_policy(1.0)
                row = pruning_point(setting, alpha, policy, fp, integ,
                                    sim_d, sim_seeds, n_test, sim_seed0,
                                    p0=p0, diag0=diag0)
            except Exception as exc:
                row = PruningRow(alpha=alpha, policy=variant if filtered else "constant",
                                 kappa_plus=math.nan, kept_frac_theory=math.nan,
                                 p0=None, p1=None, egen_theory=math.nan,
                                 egen_theory_se=math.nan,
                                 egen_sim_mean=math.nan, egen_sim_std=math.nan,
                                 seeds_ok=0, residual=math.nan, iters=0,
                                 converged=False, error=str(exc))
                warnings.warn(f"pruning point alpha={alpha} failed: {exc}")
            rows.append(row)
    return rows
