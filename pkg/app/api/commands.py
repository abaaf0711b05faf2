import functools
from pathlib import Path
from typing import Annotated, Callable, List, Optional

import numpy as np
import typer
from loguru import logger
from pydantic import ValidationError

from app.errors import AuditFailureError, BranchwaveError, ConfigError
from app.models.wave_models import BranchingConfig
from app.schemas.run_schema import RunConfig, load_run_config, resolved_ini
from app.services import branching_engine as be
from app.services import moment_oracles as mo
from app.services.data_profiles import build_data_nets
from app.services.estimators import estimate
from app.services.reference_solutions import default_oracle
from app.services.stochastic_kernels import sample_rng
from app.services.wave_distiller import distill, plan_budget, verify_lightcone
from app.storage import result_store as store

router = typer.Typer(help="Branching Monte Carlo wave solver and ReLU distillation.")

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="INI run configuration")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", help="override [run] seed")]
WorkersOpt = Annotated[Optional[int], typer.Option("--workers", help="override [run] workers")]
OutOpt = Annotated[Optional[Path], typer.Option("--out", help="override [run] out directory")]
SetOpt = Annotated[Optional[List[str]], typer.Option("--set", help="section.key=value override (repeatable)")]


# -------------------------------------------------------------------
# 🛡️ Shared plumbing
# -------------------------------------------------------------------
def guarded(fn: Callable) -> Callable:
    """Map library errors to exit codes (2 precondition, 3 audit, 4 numerical, 1 anything else)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except typer.Exit:
            raise
        except ValidationError as exc:
            logger.error(f"❌ invalid configuration: {exc}")
            raise typer.Exit(code=2)
        except BranchwaveError as exc:
            logger.error(f"❌ {type(exc).__name__}: {exc}")
            raise typer.Exit(code=exc.exit_code)
        except Exception as exc:
            logger.exception(f"❌ unexpected failure: {exc}")
            raise typer.Exit(code=1)

    return wrapper


def _load(config: Optional[Path], seed: Optional[int], workers: Optional[int], out: Optional[Path], sets) -> RunConfig:
    overrides = list(sets or [])
    if seed is not None:
        overrides.append(f"run.seed={seed}")
    if workers is not None:
        overrides.append(f"run.workers={workers}")
    if out is not None:
        overrides.append(f"run.out={out}")
    return load_run_config(config, overrides)


def _prepare_out(cfg: RunConfig) -> Path:
    out = store.ensure_dir(cfg.run.out)
    store.write_text(resolved_ini(cfg), out / "resolved_config.ini")
    return out


def _coord_columns(point: np.ndarray) -> dict:
    return {f"x{i + 1}": float(v) for i, v in enumerate(point)}


# -------------------------------------------------------------------
# 🧮 Commands
# -------------------------------------------------------------------
@router.command("solve")
@guarded
def cmd_solve(config: ConfigOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None, set_: SetOpt = None):
    """Monte Carlo estimates over the configured t-grid and points."""
    cfg = _load(config, seed, workers, out, set_)
    out_dir = _prepare_out(cfg)
    problem = cfg.wave_problem()
    points = cfg.points()
    shifts = cfg.shift_values(points)
    rows = []
    for t in cfg.run.t:
        for point, shift in zip(points, shifts):
            rep = estimate(problem, t, point, cfg.run.M, cfg.run.seed, cfg.run.workers)
            rows.append(
                {
                    "t": t,
                    **_coord_columns(point),
                    "estimate": rep.estimate + float(shift),
                    "std_error": rep.std_error,
                    "M": rep.M,
                    "seed": rep.seed,
                    "accepted": rep.accepted,
                    "rejected_samples": rep.rejected_samples,
                    "max_abs_weight": rep.max_abs_weight,
                    "rate": rep.rate,
                    "method": rep.method,
                }
            )
    store.write_csv(rows, out_dir / "solve.csv")


@router.command("moments")
@guarded
def cmd_moments(config: ConfigOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None, set_: SetOpt = None):
    """Closed-form moment table, bound audits and optional conditioned-simulation checks."""
    cfg = _load(config, seed, workers, out, set_)
    p, rate = cfg.problem.p, cfg.problem.rate
    if p < 1:
        raise ConfigError("moments needs p >= 1 (the linear problem has no branching)")
    out_dir = _prepare_out(cfg)
    t = cfg.moments.t if cfg.moments.t is not None else cfg.run.t[0]
    table = mo.moment_table(p, rate, t, cfg.moments.n_max)

    rows = []
    for n in range(cfg.moments.n_max + 1):
        row = {"n": n, "I": table.I[n], "J": table.J[n], "pmf": table.pmf[n]}
        if table.a:
            row.update(a=table.a[n], b=table.b[n])
        rows.append(row)
    store.write_csv(rows, out_dir / "moments.csv")
    store.write_json({"p": p, "rate": rate, "t": t, "mean": table.mean, "second_moment": table.second_moment}, out_dir / "moments_summary.json")

    failed = 0
    if p >= 2:
        audits = mo.audit_moment_bounds(p, max(cfg.moments.n_max, 1))
        store.write_csv(
            [{**a.model_dump(exclude={"passed"}), "status": "pass" if a.passed else "fail"} for a in audits],
            out_dir / "moment_audits.csv",
        )
        failed = sum(not a.passed for a in audits)

    if cfg.moments.conditioned_M:
        checks = []
        for n in cfg.moments.conditioned_n:
            if p == 1:
                res = mo.chain_weight_moments(n, t, rate, cfg.moments.conditioned_M, cfg.run.seed)
                target = table.I[n] if n < len(table.I) else mo.I_n_chain(n, t)
            else:
                res = mo.tree_weight_moments(n, p, t, rate, cfg.moments.conditioned_M, cfg.run.seed)
                target = table.I[n] if n < len(table.I) else mo.I_np(n, p, t)
            checks.append({**res, "I_closed_form": target, "within_4_sigma": abs(res["mean"] - target) <= 4 * res["mean_std_error"]})
        store.write_csv(checks, out_dir / "moments_conditioned.csv")

    if failed:
        raise AuditFailureError(f"{failed} moment bound audits failed")


@router.command("lawcheck")
@guarded
def cmd_lawcheck(config: ConfigOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None, set_: SetOpt = None):
    """Empirical branch-count law against the analytic pmf."""
    cfg = _load(config, seed, workers, out, set_)
    p = cfg.problem.p
    if p < 1:
        raise ConfigError("lawcheck needs p >= 1")
    out_dir = _prepare_out(cfg)
    t = cfg.lawcheck.t if cfg.lawcheck.t is not None else cfg.run.t[0]
    rep = be.branch_count_lawcheck(p, cfg.problem.rate, t, cfg.lawcheck.M, cfg.run.seed, cfg.run.workers, cfg.problem.d)
    rows = [
        {"n": n, "count": c, "empirical": e, "analytic": a}
        for n, (c, e, a) in enumerate(zip(rep.counts, rep.empirical_pmf, rep.analytic_pmf))
    ]
    store.write_csv(rows, out_dir / "lawcheck.csv")
    store.write_json(rep.model_dump(exclude={"counts", "empirical_pmf", "analytic_pmf"}), out_dir / "lawcheck.json")


@router.command("distill")
@guarded
def cmd_distill(config: ConfigOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None, set_: SetOpt = None):
    """Freeze samples, assemble the ReLU network and audit it on the light cone."""
    cfg = _load(config, seed, workers, out, set_)
    if cfg.problem.f1 != "zero":
        raise ConfigError("distill supports zero initial position only (f1 = zero)")
    out_dir = _prepare_out(cfg)
    problem = cfg.wave_problem()
    t = cfg.first_time(cfg.distill.t)
    eps = cfg.distill.eps_target
    budget = plan_budget(problem, t, eps, cfg.distill.M or None)
    data_nets = build_data_nets(cfg.problem.f_profile(), cfg.problem.source_profile(), problem.d, problem.T, budget.delta)
    oracle = default_oracle(problem, t, cfg=cfg.quadrature if problem.p == 0 else None)
    report = distill(
        problem,
        t,
        data_nets,
        eps,
        seed=cfg.run.seed,
        M=budget.M,
        oracle=oracle,
        grid_n=cfg.distill.grid_n,
        workers=cfg.run.workers,
    )
    store.write_network(report.net, out_dir / cfg.distill.network)
    store.write_json({**report.model_dump(exclude={"net"}), "audit_flags": report.audit_flags()}, out_dir / "distill_report.json")
    if not report.audits_passed:
        failed = [k for k, ok in report.audit_flags().items() if not ok]
        raise AuditFailureError(f"distillation audits failed: {failed}")


@router.command("verify")
@guarded
def cmd_verify(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    workers: WorkersOpt = None,
    out: OutOpt = None,
    set_: SetOpt = None,
    network: Annotated[Optional[Path], typer.Option("--network", help="network JSON (default: [distill] network in out)")] = None,
):
    """Light-cone audit of a stored network against the problem's reference oracle."""
    cfg = _load(config, seed, workers, out, set_)
    out_dir = _prepare_out(cfg)
    path = network or out_dir / cfg.distill.network
    if not path.is_file():
        raise ConfigError(f"network file not found: {path}")
    net = store.read_network(path)
    problem = cfg.wave_problem()
    t = cfg.first_time(cfg.distill.t)
    oracle = default_oracle(problem, t, cfg=cfg.quadrature if problem.p == 0 else None)
    audit = verify_lightcone(net, oracle, t, cfg.distill.grid_n, problem.d)
    passed = audit.sup_error <= cfg.distill.eps_target
    store.write_json({**audit.model_dump(), "eps_target": cfg.distill.eps_target, "passed": passed}, out_dir / "verify_report.json")
    if not passed:
        raise AuditFailureError(f"sup error {audit.sup_error:.3e} exceeds eps_target {cfg.distill.eps_target:.3e}")


@router.command("export")
@guarded
def cmd_export(config: ConfigOpt = None, seed: SeedOpt = None, workers: WorkersOpt = None, out: OutOpt = None, set_: SetOpt = None):
    """Tree dumps of the first samples and the data networks."""
    cfg = _load(config, seed, workers, out, set_)
    out_dir = _prepare_out(cfg)
    problem = cfg.wave_problem()
    t = cfg.first_time(cfg.distill.t)
    if problem.p >= 1:
        trees_dir = store.ensure_dir(out_dir / "trees")
        bcfg = BranchingConfig(p=problem.p, t=t, x=cfg.points()[0], law=problem.law, d=problem.d)
        for i in range(cfg.export.count):
            store.write_text(be.dump_tree(be.simulate(bcfg, sample_rng(cfg.run.seed, i))), trees_dir / f"tree_{i:04d}.txt")
    if cfg.problem.f1 == "zero":
        delta = plan_budget(problem, t, cfg.distill.eps_target, cfg.distill.M or None).delta
        nets = build_data_nets(cfg.problem.f_profile(), cfg.problem.source_profile(), problem.d, problem.T, delta)
        store.write_network(nets.phi_f, out_dir / "f_net.json")
        store.write_network(nets.phi_c, out_dir / "c_net.json")
