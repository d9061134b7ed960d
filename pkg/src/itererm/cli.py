"""Configuration-driven command line entry point.

Subcommands: solve | simulate | sweep | prune | validate.  Runs are
described by a TOML config file; artifacts are a CSV with the fixed
column schema plus one solution JSON per solved point.  Identical config,
seed and worker count reproduce byte-identical CSV output.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:   # Python < 3.11
    import tomli as tomllib

from . import active_learning as al
from . import erm_sim
from .losses import (constant_policy, make_logistic_pair, make_square_pair,
                     make_zero_pair, no_noise, sign_link)
from .state_evolution import (FixedPointConfig, IntegratorConfig, ProblemSpec,
                              Stage0Params, Stage1Params, solve, solve_stage0,
                              test_error_binary)

CSV_COLUMNS = ["psi", "gamma", "alpha", "lambda0", "lambda", "policy",
               "kappa_minus", "kappa_plus", "q0", "theta0", "V0", "q", "t",
               "theta", "chi", "V", "egen_theory", "egen_sim_mean",
               "egen_sim_std", "seeds_ok", "residual", "iters"]

LOSS_REGISTRY = {"square": make_square_pair, "logistic": make_logistic_pair,
                 "zero": make_zero_pair}
POLICY_KINDS = ("small-margin", "large-margin", "mixed", "correct-classified",
                "constant")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run description (resolved names, numeric ranges checked)."""

    subcommand: str
    run_id: str
    out_dir: Path
    setting: str
    alpha: float
    lam0: float
    lam: float
    loss_name: str
    beta_norm_sq: float
    gamma: float
    psi: float
    policy_kind: str
    policy_kinds: list[str]
    smoothing: float
    kappa_minus_frac: float
    policy_level: float
    psi_grid: list[float]
    integ: IntegratorConfig
    fp: FixedPointConfig
    sim_d: int
    sim_seeds: int
    n_test: int
    pruning_variant: str
    mu_norm: float
    flip_p: float
    kappa_plus: float
    alpha_grid: list[float]
    allow_nonconverged: bool = False
    raw: dict = field(default_factory=dict)


def _get(section: dict, key, default=None):
    return section.get(key, default) if section else default


def load_config(path: Path, overrides: argparse.Namespace | None = None) -> RunConfig:
    """Parse and validate a TOML run config, applying CLI flag overrides."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc

    run = raw.get("run", {})
    prob = raw.get("problem", {})
    budget = raw.get("budget", {})
    policy = raw.get("policy", {})
    sweep = raw.get("sweep", {})
    integ_s = raw.get("integrator", {})
    fp_s = raw.get("fixed_point", {})
    sim = raw.get("sim", {})
    prune = raw.get("pruning", {})

    setting = _get(prob, "setting", "al")
    if setting not in ("al", "pruning", "plain"):
        raise ConfigError(f"problem.setting must be al|pruning|plain, got {setting!r}")

    loss_name = _get(prob, "loss", "square")
    if loss_name not in LOSS_REGISTRY:
        raise ConfigError(
            f"problem.loss {loss_name!r} is not registered (choose from "
            f"{sorted(LOSS_REGISTRY)})")

    alpha = float(_get(prob, "alpha", 1.0))
    lam0 = float(_get(prob, "lambda0", 0.01))
    lam = float(_get(prob, "lambda", 0.01))
    if alpha <= 0:
        raise ConfigError("problem.alpha must be positive")
    if lam0 <= 0 or lam <= 0:
        raise ConfigError(
            "problem.lambda0 and problem.lambda: regularizations are strictly positive")

    gamma = float(_get(budget, "gamma", 0.5))
    psi = float(_get(budget, "psi", gamma))
    if setting == "al":
        if not 0 < gamma < 1:
            raise ConfigError("budget.gamma must lie in (0, 1)")
        if not 0 < psi <= gamma:
            raise ConfigError(
                f"budget.psi must satisfy 0 < psi <= gamma, got psi={psi} > gamma={gamma}")

    kind = _get(policy, "kind", "small-margin")
    kinds = list(_get(policy, "kinds", [kind]))
    for k in kinds:
        if k not in POLICY_KINDS:
            raise ConfigError(f"policy.kind {k!r} unknown ({POLICY_KINDS})")
    kind = kinds[0]
    smoothing = float(_get(policy, "smoothing", 0.05))
    if smoothing < 0:
        raise ConfigError("policy.smoothing must be nonnegative")

    psi_grid = [float(p) for p in _get(sweep, "psi_grid", [])]
    if psi_grid and not all(0 < p <= gamma for p in psi_grid):
        raise ConfigError("sweep.psi_grid values must lie in (0, gamma]")

    integ = IntegratorConfig(
        nodes=int(_get(integ_s, "nodes", 200_000)),
        seed=int(_get(integ_s, "seed", 0)),
        antithetic=bool(_get(integ_s, "antithetic", True)))
    fp = FixedPointConfig(
        damping=float(_get(fp_s, "damping", 0.5)),
        tol=float(_get(fp_s, "tol", 1e-7)),
        max_iter=int(_get(fp_s, "max_iter", 500)))

    cfg = RunConfig(
        subcommand=_get(run, "subcommand", ""),
        run_id=str(_get(run, "run_id", path.stem)),
        out_dir=Path(_get(run, "out_dir", "out")),
        setting=setting, alpha=alpha, lam0=lam0, lam=lam,
        loss_name=loss_name,
        beta_norm_sq=float(_get(prob, "beta_norm_sq", 1.0)),
        gamma=gamma, psi=psi, policy_kind=kind, policy_kinds=kinds,
        smoothing=smoothing,
        kappa_minus_frac=float(_get(policy, "kappa_minus_frac", 1.0)),
        policy_level=float(_get(policy, "level", 1.0)),
        psi_grid=psi_grid, integ=integ, fp=fp,
        sim_d=int(_get(sim, "d", 0)),
        sim_seeds=int(_get(sim, "seeds", 0)),
        n_test=int(_get(sim, "n_test", 100_000)),
        pruning_variant=_get(prune, "variant", "flip-noise-filter"),
        mu_norm=float(_get(prune, "mu_norm", 0.8)),
        flip_p=float(_get(prune, "flip_p", 0.2)),
        kappa_plus=float(_get(prune, "kappa_plus", 0.5)),
        alpha_grid=[float(a) for a in _get(prune, "alpha_grid", [alpha])],
        raw=raw)

    if overrides is not None:
        if overrides.out is not None:
            cfg.out_dir = Path(overrides.out)
        if overrides.seed is not None:
            cfg.integ.seed = overrides.seed
        if overrides.seeds is not None:
            cfg.sim_seeds = overrides.seeds
        if overrides.dim is not None:
            cfg.sim_d = overrides.dim
        if overrides.nodes is not None:
            cfg.integ = IntegratorConfig(nodes=overrides.nodes,
                                         seed=cfg.integ.seed,
                                         antithetic=cfg.integ.antithetic)
        cfg.allow_nonconverged = overrides.allow_nonconverged
    return cfg


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _base_pair(cfg: RunConfig):
    maker = LOSS_REGISTRY[cfg.loss_name]
    if cfg.setting == "pruning" and cfg.loss_name != "zero":
        from .losses import class_flip_link
        return maker(class_flip_link())
    return maker()


def _al_setting(cfg: RunConfig) -> al.ALSetting:
    base0, base1 = _base_pair(cfg)
    return al.ALSetting(alpha=cfg.alpha, lam0=cfg.lam0, lam=cfg.lam,
                        gamma=cfg.gamma, base0=base0, base1=base1,
                        beta_norm_sq=cfg.beta_norm_sq)


def _plain_spec(cfg: RunConfig) -> ProblemSpec:
    base0, base1 = _base_pair(cfg)
    return ProblemSpec(alpha=cfg.alpha, lam0=cfg.lam0, lam=cfg.lam,
                       class_probs=np.array([1.0]), class_values=np.array([1.0]),
                       nu=np.zeros(1), rho=np.zeros((1, 1)),
                       beta_norm_sq=cfg.beta_norm_sq,
                       link=sign_link(), noise=no_noise(),
                       loss0=base0, loss1=base1)


def _pruning_setting(cfg: RunConfig) -> al.PruningSetting:
    base0, base1 = _base_pair(cfg)
    return al.PruningSetting(lam0=cfg.lam0, lam=cfg.lam, base0=base0,
                             base1=base1, mu_norm=cfg.mu_norm,
                             flip_p=cfg.flip_p)


# ---------------------------------------------------------------------------
# artifact writers
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    v = float(value)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.17g}"


def write_csv(path: Path, rows: list[dict]) -> None:
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(col)) for col in CSV_COLUMNS))
    path.write_text("\n".join(lines) + "\n")


def params_to_json(p0: Stage0Params | None, p1: Stage1Params | None) -> dict:
    out = {}
    if p0 is not None:
        out["stage0"] = p0.as_dict()
    if p1 is not None:
        out["stage1"] = p1.as_dict()
    return out


def params_from_json(doc: dict) -> tuple[Stage0Params | None, Stage1Params | None]:
    p0 = p1 = None
    if "stage0" in doc:
        s = doc["stage0"]
        p0 = Stage0Params(m0=np.array(s["m0"]), theta0=s["theta0"],
                          q0=s["q0"], V0=s["V0"])
    if "stage1" in doc:
        s = doc["stage1"]
        p1 = Stage1Params(m=np.array(s["m"]), theta=s["theta"], t=s["t"],
                          q=s["q"], V=s["V"], chi=s["chi"])
    return p0, p1


def _write_solutions(out_dir: Path, run_id: str, docs: list[dict]) -> None:
    if len(docs) == 1:
        (out_dir / f"{run_id}.solution.json").write_text(
            json.dumps(docs[0], indent=2, sort_keys=True) + "\n")
        return
    for i, doc in enumerate(docs):
        (out_dir / f"{run_id}.{i:03d}.solution.json").write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _sweep_row_dict(row: al.SweepRow) -> dict:
    d = {"psi": row.psi, "gamma": row.gamma, "alpha": row.alpha,
         "lambda0": row.lam0, "lambda": row.lam, "policy": row.policy,
         "kappa_minus": row.kappa_minus, "kappa_plus": row.kappa_plus,
         "egen_theory": row.egen_theory, "egen_sim_mean": row.egen_sim_mean,
         "egen_sim_std": row.egen_sim_std, "seeds_ok": row.seeds_ok,
         "residual": row.residual, "iters": row.iters}
    if row.p0 is not None:
        d.update(q0=row.p0.q0, theta0=row.p0.theta0, V0=row.p0.V0)
    if row.p1 is not None:
        d.update(q=row.p1.q, t=row.p1.t, theta=row.p1.theta,
                 chi=row.p1.chi, V=row.p1.V)
    return d


def _prune_row_dict(row: al.PruningRow, lam0: float, lam: float) -> dict:
    d = {"psi": 1.0, "gamma": row.kept_frac_theory, "alpha": row.alpha,
         "lambda0": lam0, "lambda": lam, "policy": row.policy,
         "kappa_minus": math.nan, "kappa_plus": row.kappa_plus,
         "egen_theory": row.egen_theory, "egen_sim_mean": row.egen_sim_mean,
         "egen_sim_std": row.egen_sim_std, "seeds_ok": row.seeds_ok,
         "residual": row.residual, "iters": row.iters}
    if row.p0 is not None:
        d.update(q0=row.p0.q0, theta0=row.p0.theta0, V0=row.p0.V0)
    if row.p1 is not None:
        d.update(q=row.p1.q, t=row.p1.t, theta=row.p1.theta,
                 chi=row.p1.chi, V=row.p1.V)
    return d


def _row_summary(d: dict) -> str:
    keys = ["psi", "gamma", "alpha", "policy", "egen_theory", "egen_sim_mean"]
    parts = []
    for k in keys:
        v = d.get(k)
        if isinstance(v, str):
            parts.append(f"{k}={v}")
        elif v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        else:
            parts.append(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}")
    return "  ".join(parts)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_validate(cfg: RunConfig) -> int:
    print(f"run id        : {cfg.run_id}")
    print(f"setting       : {cfg.setting}")
    print(f"loss          : {cfg.loss_name}")
    print(f"alpha         : {_fmt(cfg.alpha)}   lambda0={_fmt(cfg.lam0)}   lambda={_fmt(cfg.lam)}")
    if cfg.setting == "al":
        print(f"budget        : gamma={_fmt(cfg.gamma)} psi={_fmt(cfg.psi)}")
        print(f"policy        : {', '.join(cfg.policy_kinds)} "
              f"(smoothing={_fmt(cfg.smoothing)})")
        q0_init = 0.1   # solver initialization; thresholds shown before computing
        if cfg.policy_kind in ("small-margin", "mixed"):
            print(f"kappa_minus@init : {_fmt(al.kappa_minus(cfg.gamma, cfg.psi, q0_init))}")
        if cfg.policy_kind in ("large-margin", "mixed"):
            print(f"kappa_plus@init  : {_fmt(al.kappa_plus(cfg.gamma, cfg.psi, q0_init))}")
        if cfg.psi_grid:
            print(f"psi grid      : {[float(p) for p in cfg.psi_grid]}")
    if cfg.setting == "pruning":
        print(f"pruning       : variant={cfg.pruning_variant} mu_norm={_fmt(cfg.mu_norm)} "
              f"flip_p={_fmt(cfg.flip_p)} kappa_plus={_fmt(cfg.kappa_plus)}")
        print(f"alpha grid    : {[float(a) for a in cfg.alpha_grid]}")
    print(f"integrator    : nodes={cfg.integ.nodes} seed={cfg.integ.seed} "
          f"antithetic={cfg.integ.antithetic}")
    print(f"fixed point   : damping={_fmt(cfg.fp.damping)} tol={_fmt(cfg.fp.tol)} "
          f"max_iter={cfg.fp.max_iter}")
    if cfg.sim_d > 0:
        print(f"simulation    : d={cfg.sim_d} n={int(round(cfg.alpha * cfg.sim_d))} "
              f"seeds={cfg.sim_seeds} n_test={cfg.n_test}")
    print("validate: OK")
    return 0


def _policy_for_point(cfg: RunConfig, q0: float):
    if cfg.policy_kind == "constant":
        return constant_policy(cfg.policy_level)
    return al.build_policy(cfg.policy_kind, cfg.gamma, cfg.psi, q0,
                           width_rel=cfg.smoothing,
                           kappa_minus_frac=cfg.kappa_minus_frac)


def cmd_solve(cfg: RunConfig) -> int:
    if cfg.setting == "plain":
        spec = _plain_spec(cfg)
        res = solve(spec, cfg.fp, cfg.integ)
        egen = test_error_binary(res.p1, cfg.beta_norm_sq)
        row = {"psi": math.nan, "gamma": math.nan, "alpha": cfg.alpha,
               "lambda0": cfg.lam0, "lambda": cfg.lam, "policy": "none",
               "kappa_minus": math.nan, "kappa_plus": math.nan,
               "q0": res.p0.q0, "theta0": res.p0.theta0, "V0": res.p0.V0,
               "q": res.p1.q, "t": res.p1.t, "theta": res.p1.theta,
               "chi": res.p1.chi, "V": res.p1.V, "egen_theory": egen,
               "egen_sim_mean": math.nan, "egen_sim_std": math.nan,
               "seeds_ok": 0,
               "residual": max(res.diag0.residual, res.diag1.residual),
               "iters": res.diag0.iters + res.diag1.iters}
        doc = params_to_json(res.p0, res.p1)
        doc.update(egen_theory=egen, converged=res.converged,
                   diagnostics={"stage0_residual": res.diag0.residual,
                                "stage1_residual": res.diag1.residual,
                                "clipped_mass": res.diag0.clipped_mass
                                + res.diag1.clipped_mass,
                                "iters": [res.diag0.iters, res.diag1.iters]})
        rows, docs, converged = [row], [doc], res.converged
    elif cfg.setting == "al":
        setting = _al_setting(cfg)
        r = al.sweep_point(setting, cfg.psi, cfg.policy_kind,
                           width_rel=cfg.smoothing,
                           kappa_minus_frac=cfg.kappa_minus_frac,
                           fp=cfg.fp, integ=cfg.integ)
        rows = [_sweep_row_dict(r)]
        docs = [dict(params_to_json(r.p0, r.p1), psi=r.psi,
                     egen_theory=r.egen_theory, converged=r.converged,
                     diagnostics=r.diagnostics)]
        converged = r.converged
    else:
        setting = _pruning_setting(cfg)
        spec0 = al.pruning_problem(setting, cfg.alpha, constant_policy(1.0))
        p0, d0 = solve_stage0(spec0, cfg.fp, cfg.integ)
        width = cfg.smoothing * math.sqrt(max(p0.q0, 1e-12))
        policy = al._pruning_policy(cfg.pruning_variant, cfg.kappa_plus, width)
        r = al.pruning_point(setting, cfg.alpha, policy, cfg.fp, cfg.integ,
                             p0=p0, diag0=d0)
        rows = [_prune_row_dict(r, cfg.lam0, cfg.lam)]
        docs = [dict(params_to_json(r.p0, r.p1), alpha=r.alpha,
                     egen_theory=r.egen_theory, converged=r.converged)]
        converged = r.converged

    return _emit(cfg, rows, docs, converged)


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.sim_d <= 0 or cfg.sim_seeds <= 0:
        raise ConfigError("simulate needs sim.d and sim.seeds (or --dim/--seeds)")
    if cfg.setting == "al":
        setting = _al_setting(cfg)
        spec0 = al.al_problem(setting, cfg.psi, constant_policy(0.0))
        loss1_factory, selection_fn = al._sim_factories(
            setting, cfg.psi, cfg.policy_kind, cfg.kappa_minus_frac)
        pipe = erm_sim.PipelineConfig(n_test=cfg.n_test,
                                      loss1_factory=loss1_factory,
                                      selection_fn=selection_fn)
        stats = erm_sim.run_trials(spec0, cfg.sim_d, cfg.sim_seeds, pipe,
                                   seed0=cfg.integ.seed)
        mean, std = stats.test_error_stats()
        frac, _ = stats.mean_std(lambda r: r.selected_fraction)
        row = {"psi": cfg.psi, "gamma": cfg.gamma, "alpha": cfg.alpha,
               "lambda0": cfg.lam0, "lambda": cfg.lam,
               "policy": cfg.policy_kind,
               "kappa_minus": math.nan, "kappa_plus": math.nan,
               "egen_sim_mean": mean, "egen_sim_std": std,
               "seeds_ok": stats.n_ok, "residual": math.nan, "iters": 0}
        doc = {"per_seed": [
            {"seed": rec.seed, "test_error": rec.test_error,
             "test_error_se": rec.test_error_se,
             "selected_fraction": rec.selected_fraction,
             "overlaps": rec.overlaps.as_dict()} for rec in stats.records],
            "failures": stats.failures,
            "egen_sim_mean": mean, "egen_sim_std": std,
            "selected_fraction_mean": frac}
        converged = stats.n_ok == cfg.sim_seeds
        return _emit(cfg, [row], [doc], converged)
    raise ConfigError("simulate currently supports the al setting; "
                      "use prune for pruning simulations")


def cmd_sweep(cfg: RunConfig) -> int:
    if not cfg.psi_grid:
        raise ConfigError("sweep needs sweep.psi_grid")
    setting = _al_setting(cfg)
    rows, docs = [], []
    converged = True
    for kind in cfg.policy_kinds:
        result = al.sweep_psi(setting, cfg.psi_grid, kind,
                              width_rel=cfg.smoothing,
                              kappa_minus_frac=cfg.kappa_minus_frac,
                              fp=cfg.fp, integ=cfg.integ,
                              sim_d=cfg.sim_d, sim_seeds=cfg.sim_seeds,
                              n_test=cfg.n_test, sim_seed0=cfg.integ.seed)
        rows.extend(_sweep_row_dict(r) for r in result.rows)
        docs.extend(dict(params_to_json(r.p0, r.p1), psi=r.psi, policy=r.policy,
                         egen_theory=r.egen_theory, converged=r.converged,
                         error=r.error, diagnostics=r.diagnostics)
                    for r in result.rows)
        converged = converged and all(r.converged for r in result.rows)
    return _emit(cfg, rows, docs, converged)


def cmd_prune(cfg: RunConfig) -> int:
    setting = _pruning_setting(cfg)
    rows_raw = al.run_pruning_experiment(
        setting, cfg.pruning_variant, cfg.alpha_grid, kappa=cfg.kappa_plus,
        width_rel=cfg.smoothing, fp=cfg.fp, integ=cfg.integ,
        sim_d=cfg.sim_d, sim_seeds=cfg.sim_seeds, n_test=cfg.n_test,
        sim_seed0=cfg.integ.seed)
    rows = [_prune_row_dict(r, cfg.lam0, cfg.lam) for r in rows_raw]
    docs = [dict(params_to_json(r.p0, r.p1), alpha=r.alpha, policy=r.policy,
                 egen_theory=r.egen_theory, converged=r.converged,
                 error=r.error)
            for r in rows_raw]
    converged = all(r.converged for r in rows_raw)
    return _emit(cfg, rows, docs, converged)


def _emit(cfg: RunConfig, rows: list[dict], docs: list[dict],
          converged: bool) -> int:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.out_dir / f"{cfg.run_id}.csv"
    write_csv(csv_path, rows)
    _write_solutions(cfg.out_dir, cfg.run_id, docs)
    for row in rows:
        print(_row_summary(row))
    print(f"wrote {csv_path}")
    if not converged and not cfg.allow_nonconverged:
        print("error: at least one point flagged non-converged "
              "(rerun with --allow-nonconverged to accept)", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="itererm",
        description="two-stage ERM asymptotics: solve, simulate, sweep, prune")
    p.add_argument("subcommand",
                   choices=["solve", "simulate", "sweep", "prune", "validate"])
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--seeds", type=int, default=None, help="simulation seeds")
    p.add_argument("--dim", type=int, default=None, help="simulation dimension")
    p.add_argument("--nodes", type=int, default=None, help="Monte-Carlo nodes")
    p.add_argument("--allow-nonconverged", action="store_true")
    p.add_argument("--deterministic", action="store_true",
                   help="pin BLAS to one thread for bit-stable linear algebra")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.deterministic:
        try:
            from threadpoolctl import threadpool_limits
            threadpool_limits(1)
        except ImportError:
            warnings.warn("threadpoolctl unavailable; relying on fixed worker count")
    try:
        cfg = load_config(args.config, args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    handler = {"validate": cmd_validate, "solve": cmd_solve,
               "simulate": cmd_simulate, "sweep": cmd_sweep,
               "prune": cmd_prune}[args.subcommand]
    try:
        return handler(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
