from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
from rich import print

from volterrafk import backward, forward, linear_oracle, ppde
from volterrafk.coefficients import CoefficientSet, probe_adaptedness
from volterrafk.config import ExperimentConfig, MonteCarloConfig, out_dir, save_config
from volterrafk.errors import ConfigError
from volterrafk.families import builtin, dual_pair, fbm_kernel, linear_spec
from volterrafk.grid import BrownianBatch, TimeGrid, derive_seed, make_grid, sample_brownian
from volterrafk.parallel import pin_workers
from volterrafk.report import (
    Check,
    backward_table,
    check_at_most,
    check_flag,
    convergence_table,
    forward_table,
    write_report,
    write_tables,
)

log = logging.getLogger(__name__)


@dataclass
class Outcome:
    results: dict
    checks: list[Check] = field(default_factory=list)
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)
    runtime: float = 0.0
    directory: Path | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def _opt(cfg: ExperimentConfig, key: str, default: Any = None) -> Any:
    return cfg.options.get(key, default)


def _grid(cfg: ExperimentConfig) -> TimeGrid:
    return make_grid(cfg.grid.T, cfg.grid.N)


def _batch(cfg: ExperimentConfig, grid: TimeGrid, d: int = 1, seed: int | None = None) -> BrownianBatch:
    return sample_brownian(
        grid, cfg.mc.paths, d, cfg.mc.seed if seed is None else seed, antithetic=cfg.mc.antithetic
    )


def _coeffs(cfg: ExperimentConfig) -> CoefficientSet:
    return builtin(cfg.coeff, cfg.params)


def _num_option(cfg: ExperimentConfig, key: str, default: Any, kind: type = float) -> Any:
    val = _opt(cfg, key, default)
    if val is None:
        return None
    if isinstance(val, bool) or (kind is int and isinstance(val, float) and not val.is_integer()):
        raise ConfigError(f"option '{key}' must be {'an integer' if kind is int else 'a number'}, got {val!r}")
    try:
        return kind(val)
    except (TypeError, ValueError):
        raise ConfigError(f"option '{key}' must be {'an integer' if kind is int else 'a number'}, got {val!r}") from None


def _path_option(value, grid: TimeGrid, name: str) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float).reshape(-1)
    except (TypeError, ValueError):
        raise ConfigError(f"option '{name}' must be a number or a list of numbers, got {value!r}") from None
    if a.size == 1:
        return np.full(grid.N + 1, float(a[0]))
    if a.size != grid.N + 1:
        raise ConfigError(f"option '{name}' has {a.size} nodes, grid needs {grid.N + 1}")
    return a


def _index_option(cfg: ExperimentConfig, key: str, default: int, grid: TimeGrid) -> int:
    try:
        k = int(_opt(cfg, key, default))
    except (TypeError, ValueError):
        raise ConfigError(f"option '{key}' must be a grid index") from None
    if not 0 <= k <= grid.N:
        raise ConfigError(f"option '{key}'={k} outside 0..{grid.N}")
    return k


def _within(name: str, a: float, b: float, se: float, sigmas: float) -> Check:
    gap = abs(a - b)
    return Check(name, gap <= sigmas * se + 1e-10 * (1.0 + abs(b)), gap, sigmas * se)


def _backward_checks(cfg, bwd, fwd, coeffs, bw) -> list[Check]:
    ident = backward.check_identities(bwd, fwd, coeffs)
    checks = [check_flag("diagonal_identity_Y", ident["diagonal"]), check_flag("terminal_identity_Y", ident["terminal"])]
    i, k = bwd.stop, (bwd.stop + bwd.grid.N) // 2
    flow = backward.flow_residual(bwd, fwd, bw, coeffs, i, k)
    checks.append(check_at_most("flow_property_z", abs(flow["z"]), cfg.tolerances.sigmas))
    return checks


def simulate_forward(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    bw = _batch(cfg, grid, coeffs.d)
    x0 = _path_option(_opt(cfg, "x0", 0.0), grid, "x0")
    sol = forward.simulate(coeffs, grid, bw, x0)
    X = sol.X.values
    scale = max(1.0, float(np.max(np.abs(X))))
    worst = 0.0
    for i in range(grid.N + 1):
        again = forward.restart(sol, i, bw).values
        worst = max(worst, float(np.max(np.abs(again - X))) / scale)
    checks = [
        check_flag("diagonal_identity_X", np.array_equal(X, sol.Xtilde.diagonal())),
        check_at_most("restart_exactness", worst, cfg.tolerances.restart_rel),
        check_flag("adaptedness_probe", probe_adaptedness(coeffs, grid, np.random.default_rng(cfg.mc.seed))),
    ]
    results: dict[str, Any] = {"moments": forward.moment_report(sol), "mean_X_T": float(X[:, -1].mean())}
    if cfg.coeff == "fbm":
        kernel = fbm_kernel(coeffs.params)
        target = forward.fbm_variance_target(kernel, grid)
        sq = (X[:, -1] - x0[-1]) ** 2
        est, se = float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))
        results["variance"] = {"estimate": est, "stderr": se, **target}
        checks.append(_within("fbm_variance", est, target["discrete"], se, 4.0))
    tables = {"forward_paths.csv": forward_table(grid, X, _num_option(cfg, "csv_paths", 100, int))}
    return Outcome(results, checks, tables)


def _linear_check(cfg, coeffs, grid, bw, bwd) -> Check | None:
    if not coeffs.name.startswith("linear-volterra:"):
        return None
    spec = linear_spec(coeffs.params["spec"])
    cf = linear_oracle.closed_form(spec, grid, bw)
    ref = float(cf.values[0])
    rel = abs(float(bwd.meanY[0]) - ref) / max(abs(ref), 1e-12)
    return check_at_most("linear_oracle_rel", rel, cfg.tolerances.linear_rel)


def solve_bsvie(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    bw = _batch(cfg, grid, coeffs.d)
    fwd = forward.simulate(coeffs, grid, bw, _path_option(_opt(cfg, "x0", 0.0), grid, "x0"))
    bwd = backward.solve_type1(coeffs, fwd, bw, cfg.basis.spec(), implicit=bool(_opt(cfg, "implicit", False)))
    checks = _backward_checks(cfg, bwd, fwd, coeffs, bw)
    linear = _linear_check(cfg, coeffs, grid, bw, bwd)
    if linear is not None:
        checks.append(linear)
    results = {
        "Y0": float(bwd.meanY[0]),
        "Y0_stderr": float(bwd.stderrY[0]),
        "regression_stderr_max": float(np.max(bwd.reg_stderr)),
        "moments": backward.moment_report(bwd, fwd.x0),
    }
    return Outcome(results, checks, {"backward_mean.csv": backward_table(grid, bwd.meanY, bwd.stderrY)})


def solve_type2(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    bw = _batch(cfg, grid, coeffs.d)
    fwd = forward.simulate(coeffs, grid, bw, _path_option(_opt(cfg, "x0", 0.0), grid, "x0"))
    bwd = backward.solve_type2(coeffs, fwd, bw, cfg.basis.spec())
    checks = _backward_checks(cfg, bwd, fwd, coeffs, bw)
    ratio = backward.martingale_residual(bwd, bw)
    checks.append(check_at_most("martingale_representation", float(ratio.max()), cfg.tolerances.martingale_ratio))
    results = {
        "Y0": float(bwd.meanY[0]),
        "Y0_stderr": float(bwd.stderrY[0]),
        "martingale_ratio": ratio.tolist(),
        "moments": backward.moment_report(bwd, fwd.x0),
    }
    return Outcome(results, checks, {"backward_mean.csv": backward_table(grid, bwd.meanY, bwd.stderrY)})


def compare(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    spec_a = _coeffs(cfg)
    shifted = dict(cfg.params)
    for key, opt in (("f_const", "shift_f"), ("g_shift", "shift_g")):
        shift = _num_option(cfg, opt, 1.0 if opt == "shift_g" else 0.0)
        if shift:
            shifted[key] = float(cfg.params.get(key, 0.0)) + shift
    spec_b = builtin(cfg.coeff, shifted)
    bw = _batch(cfg, grid, spec_a.d)
    fwd = forward.simulate(spec_a, grid, bw, _path_option(_opt(cfg, "x0", 0.0), grid, "x0"))
    rep = backward.compare(spec_a, spec_b, fwd, bw, cfg.basis.spec(), sigmas=cfg.tolerances.sigmas, seed=cfg.mc.seed)
    checks = [
        check_flag("comparison_hypotheses", rep.certified),
        check_at_most("comparison_violations", rep.violations, 0),
    ]
    checks += _backward_checks(cfg, rep.a, fwd, spec_a, bw)
    tables = {
        "backward_mean.csv": backward_table(grid, rep.a.meanY, rep.a.stderrY),
        "backward_mean_shifted.csv": backward_table(grid, rep.b.meanY, rep.b.stderrY),
    }
    return Outcome({"comparison": rep.to_dict(), "shifted_params": shifted}, checks, tables)


def run_linear_oracle(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    spec = linear_spec(str(_opt(cfg, "spec", "full")), _opt(cfg, "spec_params"))
    coeffs = spec.coefficient_set()
    bw = _batch(cfg, grid)
    fwd = forward.simulate(coeffs, grid, bw, 0.0)
    bwd = backward.solve_type1(coeffs, fwd, bw, cfg.basis.spec())
    cf = linear_oracle.closed_form(spec, grid, bw)
    lhs, rhs = float(bwd.meanY[0]), float(cf.values[0])
    se = math.sqrt(float(bwd.stderrY[0]) ** 2 + float(cf.stderr[0]) ** 2)
    rel = abs(lhs - rhs) / max(abs(rhs), 1e-12)
    table = linear_oracle.resolvent_table(spec, grid, bw.take(slice(0, min(256, bw.n_paths))))
    identity = linear_oracle.resolvent_identity_residual(table.K1, table.Gamma, grid)
    checks = [
        check_at_most("linear_oracle_rel", rel, cfg.tolerances.linear_rel),
        check_at_most("resolvent_identity", identity, 1e-8 * (1.0 + float(np.max(np.abs(table.Gamma.data))))),
    ]
    checks += _backward_checks(cfg, bwd, fwd, coeffs, bw)
    results = {
        "spec": spec.name,
        "method": cf.method,
        "lhs": lhs,
        "rhs": rhs,
        "residual": abs(lhs - rhs),
        "stderr": se,
        "pass": rel <= cfg.tolerances.linear_rel,
    }
    if spec.exact is not None:
        results["exact"] = spec.exact(0.0, grid.T)
    return Outcome(results, checks, {"backward_mean.csv": backward_table(grid, bwd.meanY, bwd.stderrY)})


def run_duality_check(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    pair = dual_pair(str(_opt(cfg, "pair", "stochastic")), _opt(cfg, "pair_params"))
    bw = _batch(cfg, grid)
    res = linear_oracle.duality_check(pair, grid, bw, cfg.basis.spec(), sigmas=cfg.tolerances.sigmas)
    tol = cfg.tolerances.sigmas * res.stderr + 1e-8 * (1.0 + abs(res.lhs))
    checks = [Check("duality_residual", res.passed, res.residual, tol)]
    tables = {"backward_mean.csv": backward_table(grid, res.dual_mean, np.zeros(grid.N + 1))}
    return Outcome({"pair": pair.name, **res.to_dict()}, checks, tables)


def eval_ppde(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    t_idx = _index_option(cfg, "t", 0, grid)
    s_idx = _index_option(cfg, "s", t_idx, grid)
    x = _path_option(_opt(cfg, "x", 0.0), grid, "x")
    basis = cfg.basis.spec()
    u = ppde.eval_U(coeffs, grid, t_idx, s_idx, x, cfg.mc, basis)
    checks = [check_flag("estimate_finite", math.isfinite(u.estimate) and math.isfinite(u.stderr))]
    results = {**u.to_dict(), "x": x.tolist()}
    if coeffs.meta.state_dependent and s_idx > 0:
        gap = ppde.past_node_gap(coeffs, grid, u, cfg.mc, basis)
        results["past_node_gap"] = gap
        checks.append(check_at_most("past_nodes_ignored", gap, 1e-12 * (1.0 + abs(u.estimate))))
    return Outcome(results, checks)


def fk_check(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    bw = _batch(cfg, grid, coeffs.d)
    basis = cfg.basis.spec()
    fwd = forward.simulate(coeffs, grid, bw, _path_option(_opt(cfg, "x0", 0.0), grid, "x0"))
    bwd = backward.solve(coeffs, fwd, bw, basis)
    rng = np.random.default_rng(derive_seed(cfg.mc.seed, 1))
    points = _num_option(cfg, "points", 8, int)
    sample = [(int(rng.integers(0, bw.n_paths)), int(rng.integers(0, grid.N))) for _ in range(points)]
    inner = MonteCarloConfig(
        paths=_num_option(cfg, "inner_paths", min(cfg.mc.paths, 4096), int),
        seed=derive_seed(cfg.mc.seed, 2),
        antithetic=cfg.mc.antithetic,
        budget=cfg.mc.budget,
    )
    rep = ppde.fk_check(coeffs, fwd, bwd, sample, inner, basis, sigmas=cfg.tolerances.sigmas)
    checks = [Check("feynman_kac_consistency", rep.passed, rep.max_discrepancy, cfg.tolerances.sigmas)]
    checks += _backward_checks(cfg, bwd, fwd, coeffs, bw)
    table = pd.DataFrame(rep.rows)
    return Outcome({**rep.to_dict(), "inner_paths": inner.paths}, checks, {"fk_points.csv": table})


def path_derivative(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    t_idx = _index_option(cfg, "t", 0, grid)
    s_idx = _index_option(cfg, "s", t_idx, grid)
    x = _path_option(_opt(cfg, "x", 0.0), grid, "x")
    eta = _path_option(_opt(cfg, "eta", 1.0), grid, "eta")
    est = ppde.path_derivative(
        coeffs, coeffs.derivatives, grid, t_idx, s_idx, x, eta, cfg.mc, cfg.basis.spec(),
        eps=_num_option(cfg, "eps", None),
    )
    values = {
        "variational": (est.variational, est.variational_se),
        "fd": (est.finite_difference, est.fd_se),
        "resolvent": (est.resolvent, est.resolvent_se),
    }
    checks = []
    for pair, rel in est.discrepancies.items():
        a, b = pair.split("_vs_")
        (va, sa), (vb, sb) = values[a], values[b]
        within = abs(va - vb) <= cfg.tolerances.sigmas * math.sqrt(sa**2 + sb**2)
        checks.append(Check(pair, rel <= cfg.tolerances.fd_rel or within, rel, cfg.tolerances.fd_rel))
    checks.append(check_flag("richardson", est.richardson_ok))
    scale = 1e-10 * (1.0 + abs(est.variational))
    checks.append(check_at_most("variational_additivity", est.additivity_gap, scale))
    checks.append(check_at_most("variational_homogeneity", est.homogeneity_gap, scale))
    return Outcome({"t_idx": t_idx, "s_idx": s_idx, **est.to_dict()}, checks)


def solve_coupled(cfg: ExperimentConfig) -> Outcome:
    grid = _grid(cfg)
    coeffs = _coeffs(cfg)
    bw = _batch(cfg, grid, coeffs.d)
    x0 = _path_option(_opt(cfg, "x0", 0.0), grid, "x0")
    res = ppde.solve_coupled(
        coeffs,
        grid,
        bw,
        cfg.basis.spec(),
        x0=x0,
        tol=cfg.tolerances.picard_tol,
        max_iter=cfg.tolerances.max_iter,
        growth=_num_option(cfg, "growth", 1.0e3),
    )
    results = res.to_dict()
    checks = [
        Check("picard_converged", res.status == "converged", res.trace[-1] if res.trace else math.inf, cfg.tolerances.picard_tol),
        Check("picard_increments_decay", res.increments_decay, max(res.ratios, default=0.0), 1.0),
    ]
    tables = {}
    if res.status == "converged":
        results["fixed_point_residual"] = ppde.coupled_residual(res, coeffs, bw, cfg.basis.spec(), x0)
        tables["backward_mean.csv"] = backward_table(grid, res.bwd.meanY, res.bwd.stderrY)
    return Outcome(results, checks, tables)


# Convergence ladders

LADDER_PARAMS = {"N", "paths", "degree"}


def _linear_rung(cfg: ExperimentConfig, seed: int) -> tuple[float, float]:
    spec = linear_spec(str(_opt(cfg, "spec", "constant")), _opt(cfg, "spec_params"))
    grid = _grid(cfg)
    if spec.exact is not None:
        exact = spec.exact(0.0, grid.T)
    elif spec.deterministic_coefficients and spec.deterministic_xi:
        ref_grid = make_grid(grid.T, grid.N * _num_option(cfg, "reference_factor", 16, int))
        exact = float(linear_oracle.closed_form(spec, ref_grid, sample_brownian(ref_grid, 1)).values[0])
    else:
        raise ConfigError(f"linear spec '{spec.name}' has no oracle for an N ladder")
    coeffs = spec.coefficient_set()
    bw = _batch(cfg, grid, seed=seed)
    fwd = forward.simulate(coeffs, grid, bw, 0.0)
    est = float(backward.solve_type1(coeffs, fwd, bw, cfg.basis.spec()).meanY[0])
    return est, est - exact


def _fbm_rung(cfg: ExperimentConfig, seed: int) -> tuple[float, float]:
    grid = _grid(cfg)
    coeffs = builtin("fbm", cfg.params)
    kernel = fbm_kernel(coeffs.params)
    sol = forward.simulate(coeffs, grid, _batch(cfg, grid, seed=seed), 0.0)
    est = float(np.mean(sol.X.values[:, -1] ** 2))
    return est, est - forward.fbm_variance_target(kernel, grid)["discrete"]


def _fk_rung(cfg: ExperimentConfig, seed: int) -> tuple[float, float]:
    gap = fk_check(replace(cfg, mc=replace(cfg.mc, seed=seed))).results["mean_discrepancy"]
    return gap, gap


OPS: dict[str, Callable[[ExperimentConfig, int], tuple[float, float]]] = {
    "solve-bsvie": _linear_rung,
    "simulate-forward": _fbm_rung,
    "fk-check": _fk_rung,
}

DEFAULT_LADDER = {"solve-bsvie": "N", "simulate-forward": "paths", "fk-check": "degree"}


def _with(cfg: ExperimentConfig, param: str, value: float) -> ExperimentConfig:
    if param == "N":
        return replace(cfg, grid=replace(cfg.grid, N=int(value)))
    if param == "paths":
        return replace(cfg, mc=replace(cfg.mc, paths=int(value)))
    return replace(cfg, basis=replace(cfg.basis, degree=int(value)))


def converge(cfg: ExperimentConfig, ladder: list[float] | None = None) -> Outcome:
    """Error per rung of a parameter ladder with a fitted log-log slope."""
    op = str(_opt(cfg, "op", "solve-bsvie"))
    if op not in OPS:
        raise ConfigError(f"Unknown converge op: {op} (choose from {', '.join(OPS)})")
    param = str(_opt(cfg, "param", DEFAULT_LADDER[op]))
    if param not in LADDER_PARAMS:
        raise ConfigError(f"Unknown ladder parameter: {param} (choose from {', '.join(sorted(LADDER_PARAMS))})")
    values = list(ladder if ladder is not None else _opt(cfg, "values", []))
    if len(values) < 3 and param != "degree":
        raise ConfigError(f"ladder needs at least 3 rungs, got {len(values)}")
    if len(values) < 2:
        raise ConfigError(f"ladder needs at least 2 rungs, got {len(values)}")
    reps = _num_option(cfg, "replicates", 3, int)
    if reps < 1:
        raise ConfigError("replicates must be ≥ 1")

    rows = []
    for rung, value in enumerate(values):
        rcfg = _with(cfg, param, value)
        est, err = [], []
        for rep in range(reps):
            e, d = OPS[op](rcfg, derive_seed(cfg.mc.seed, rung, rep))
            est.append(e)
            err.append(d)
        rms = float(np.sqrt(np.mean(np.square(err))))
        log.info("converge %s %s=%s: error %.3e", op, param, value, rms)
        rows.append({"rung": rung, "value": value, "estimate": float(np.mean(est)), "error": rms})

    errors = np.array([r["error"] for r in rows])
    results: dict[str, Any] = {"op": op, "param": param, "replicates": reps, "rows": rows}
    checks: list[Check] = []
    if param == "degree":
        worst = max((b - a * 1.3 for a, b in zip(errors, errors[1:])), default=0.0)
        checks.append(Check("discrepancy_nonincreasing", worst <= 1e-12, float(worst), 0.0))
    elif np.all(errors > 0):
        slope = float(np.polyfit(np.log(np.asarray(values, dtype=float)), np.log(errors), 1)[0])
        results["slope"] = slope
        if param == "N":
            results["order"] = -slope
            checks.append(Check("empirical_order", -slope >= cfg.tolerances.min_order, -slope, cfg.tolerances.min_order))
        else:
            checks.append(Check("clt_rate", -0.6 <= slope <= -0.4, slope, -0.5))
    else:
        results["slope"] = None
        checks.append(check_flag("errors_positive", False))
    return Outcome(results, checks, {"convergence.csv": convergence_table(rows)})


COMMANDS: dict[str, Callable[[ExperimentConfig], Outcome]] = {
    "simulate-forward": simulate_forward,
    "solve-bsvie": solve_bsvie,
    "solve-type2": solve_type2,
    "compare": compare,
    "linear-oracle": run_linear_oracle,
    "duality-check": run_duality_check,
    "eval-ppde": eval_ppde,
    "fk-check": fk_check,
    "path-derivative": path_derivative,
    "solve-coupled": solve_coupled,
    "converge": converge,
}


def run(cfg: ExperimentConfig) -> Outcome:
    """Run one subcommand and write config.yaml, CSV tables and report.json."""
    if cfg.subcommand not in COMMANDS:
        raise ConfigError(f"Unknown subcommand: {cfg.subcommand} (choose from {', '.join(COMMANDS)})")
    pin_workers(cfg.mc.workers)
    start = time.perf_counter()
    out = COMMANDS[cfg.subcommand](cfg)
    out.runtime = time.perf_counter() - start

    d = out_dir(cfg.subcommand, cfg.output)
    save_config(cfg, d)
    write_tables(d, out.tables)
    write_report(d, cfg, out.results, out.checks, out.runtime)
    out.directory = d

    for c in out.checks:
        mark = "[green]pass[/green]" if c.passed else "[red]FAIL[/red]"
        print(f"  {mark} {c.name}: {c.value:.4g} (tolerance {c.tolerance:.4g})")
    colour = "green" if out.passed else "red"
    print(f"[{colour}]{cfg.subcommand}[/{colour}] finished in {out.runtime:.2f}s -> {d}")
    return out
