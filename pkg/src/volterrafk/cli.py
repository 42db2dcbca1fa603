from __future__ import annotations

import logging
from typing import Any, List, Optional

import typer
import yaml
from rich import print
from rich.logging import RichHandler

from volterrafk.config import resolve
from volterrafk.core import run
from volterrafk.errors import ConfigError, ContractError, NumericalError

app = typer.Typer(
    help="volterra-fk - forward/backward stochastic Volterra equations, path-dependent PDEs and their checks",
    add_completion=True,
)

CONFIG = typer.Option(None, "--config", "-c", help="YAML/JSON config file (flags win)")
COEFF = typer.Option(None, "--coeff", help="Coefficient family (zero/bm/fbm/linear-volterra/state-lipschitz/type2-linear/coupled)")
PARAM = typer.Option(None, "--param", "-p", help="Family parameter key=value (repeatable)")
KERNEL = typer.Option(None, "--kernel", help="Kernel of the fbm family, e.g. fractional:H=0.3,c=1 or exponential:c=1,lam=2")
T_OPT = typer.Option(None, "--T", help="Horizon T")
N_OPT = typer.Option(None, "--N", help="Number of grid steps")
PATHS = typer.Option(None, "--paths", help="Monte Carlo paths")
SEED = typer.Option(None, "--seed", help="Master seed")
ANTITHETIC = typer.Option(None, "--antithetic/--no-antithetic", help="Antithetic Brownian increments")
WORKERS = typer.Option(None, "--workers", help="Worker threads (capped by VOLTERRA_FK_THREADS)")
DEGREE = typer.Option(None, "--basis-degree", help="Polynomial degree of the regression basis")
PIVOTS = typer.Option(None, "--pivots", help="Frozen-future pivots in the regression basis")
RIDGE = typer.Option(None, "--ridge", help="Ridge penalty of the regression")
OUT = typer.Option(None, "--out", "-o", help="Output directory (default ./volterra-fk-out/<subcommand>)")
VERBOSE = typer.Option(False, "--verbose", "-v", help="Debug logging")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(rich_tracebacks=False, show_path=False)],
        force=True,
    )


def _value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _pairs(items: Optional[List[str]], flag: str) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep or not key.strip():
            raise typer.BadParameter(f"expected key=value, got '{item}'", param_hint=flag)
        out[key.strip()] = _value(val.strip())
    return out


def _path(text: Optional[str], flag: str = "path") -> Any:
    if text is None:
        return None
    try:
        parts = [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise typer.BadParameter(f"expected a number or comma-separated numbers, got '{text}'", param_hint=flag) from None
    return parts[0] if len(parts) == 1 else parts


def _drop_none(d: dict) -> dict:
    return {k: v for k, v in d.items() if v is not None}


def _execute(
    subcommand: str,
    *,
    config,
    coeff,
    param,
    kernel,
    T,
    N,
    paths,
    seed,
    antithetic,
    workers,
    degree,
    pivots,
    ridge,
    out,
    verbose,
    options: dict | None = None,
    tolerances: dict | None = None,
) -> None:
    _setup_logging(verbose)
    try:
        overrides: dict[str, Any] = {"subcommand": subcommand}
        if coeff is not None:
            overrides["coeff"] = coeff
        params = _pairs(param, "--param")
        if kernel is not None:
            params["kernel"] = kernel
        if params:
            overrides["params"] = params
        if out is not None:
            overrides["output"] = out
        for name, section in (
            ("grid", {"T": T, "N": N}),
            ("mc", {"paths": paths, "seed": seed, "antithetic": antithetic, "workers": workers}),
            ("basis", {"degree": degree, "pivots": pivots, "ridge": ridge}),
            ("tolerances", tolerances or {}),
            ("options", options or {}),
        ):
            section = _drop_none(section)
            if section:
                overrides[name] = section
        cfg = resolve(config, overrides)
        outcome = run(cfg)
    except ConfigError as e:
        print(f"[red]Config error:[/red] {e}")
        raise typer.Exit(2)
    except (NumericalError, ContractError) as e:
        print(f"[red]Numerical failure:[/red] {e}")
        raise typer.Exit(3)
    if not outcome.passed:
        failed = ", ".join(c.name for c in outcome.checks if not c.passed)
        print(f"[red]Checks failed:[/red] {failed}")
        raise typer.Exit(1)


@app.command("simulate-forward")
def simulate_forward(
    x0: Optional[str] = typer.Option(None, "--x0", help="Initial path: a constant or N+1 comma-separated values"),
    csv_paths: Optional[int] = typer.Option(None, "--csv-paths", help="Paths written to forward_paths.csv"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Euler scheme for the forward equation, with restart and moment checks."""
    _execute(
        "simulate-forward",
        options=_drop_none({"x0": _path(x0), "csv_paths": csv_paths}),
        **_common(locals()),
    )


@app.command("solve-bsvie")
def solve_bsvie(
    implicit: Optional[bool] = typer.Option(None, "--implicit/--explicit", help="Diagonal driver variant"),
    x0: Optional[str] = typer.Option(None, "--x0", help="Initial path"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Type-I backward equation by regression Monte Carlo."""
    _execute("solve-bsvie", options=_drop_none({"implicit": implicit, "x0": _path(x0)}), **_common(locals()))


@app.command("solve-type2")
def solve_type2(
    x0: Optional[str] = typer.Option(None, "--x0", help="Initial path"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Type-II backward equation with the martingale representation of Y."""
    _execute("solve-type2", options=_drop_none({"x0": _path(x0)}), **_common(locals()))


@app.command()
def compare(
    shift_f: Optional[float] = typer.Option(None, "--shift-f", help="Shift of f_const in the upper equation"),
    shift_g: Optional[float] = typer.Option(None, "--shift-g", help="Shift of g_shift in the upper equation (default 1)"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Comparison principle with common random numbers on a shifted pair."""
    _execute("compare", options=_drop_none({"shift_f": shift_f, "shift_g": shift_g}), **_common(locals()))


@app.command("linear-oracle")
def linear_oracle(
    spec: Optional[str] = typer.Option(None, "--spec", help="Linear spec (constant/deterministic/random-xi/full)"),
    spec_param: Optional[List[str]] = typer.Option(None, "--spec-param", help="Spec parameter key=value (repeatable)"),
    config: Optional[str] = CONFIG,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Regression solve of a linear equation against its closed form."""
    options = _drop_none({"spec": spec, "spec_params": _pairs(spec_param, "--spec-param") or None})
    _execute("linear-oracle", options=options, coeff=None, param=None, kernel=None, **_common(locals()))


@app.command("duality-check")
def duality_check(
    pair: Optional[str] = typer.Option(None, "--pair", help="Dual pair (decoupled/deterministic/stochastic)"),
    pair_param: Optional[List[str]] = typer.Option(None, "--pair-param", help="Pair parameter key=value (repeatable)"),
    config: Optional[str] = CONFIG,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Duality between a linear forward equation and its type-II adjoint."""
    options = _drop_none({"pair": pair, "pair_params": _pairs(pair_param, "--pair-param") or None})
    _execute("duality-check", options=options, coeff=None, param=None, kernel=None, **_common(locals()))


@app.command("eval-ppde")
def eval_ppde(
    t: Optional[int] = typer.Option(None, "--t", help="Grid index of t"),
    s: Optional[int] = typer.Option(None, "--s", help="Grid index of s (>= t)"),
    x: Optional[str] = typer.Option(None, "--x", help="Path x: a constant or N+1 comma-separated values"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """U(t, s, x) by restarting the forward-backward system at s."""
    _execute("eval-ppde", options=_drop_none({"t": t, "s": s, "x": _path(x)}), **_common(locals()))


@app.command("fk-check")
def fk_check(
    points: Optional[int] = typer.Option(None, "--points", help="Sampled (path, time) points"),
    inner_paths: Optional[int] = typer.Option(None, "--inner-paths", help="Paths of each nested evaluation"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Global Y against nested U evaluations at sampled points."""
    _execute("fk-check", options=_drop_none({"points": points, "inner_paths": inner_paths}), **_common(locals()))


@app.command("path-derivative")
def path_derivative(
    t: Optional[int] = typer.Option(None, "--t", help="Grid index of t"),
    s: Optional[int] = typer.Option(None, "--s", help="Grid index of s (>= t)"),
    x: Optional[str] = typer.Option(None, "--x", help="Path x"),
    eta: Optional[str] = typer.Option(None, "--eta", help="Direction: a constant or N+1 comma-separated values"),
    eps: Optional[float] = typer.Option(None, "--eps", help="Finite-difference step"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """<∂ₓU, eta> by three independent estimators."""
    options = _drop_none({"t": t, "s": s, "x": _path(x), "eta": _path(eta), "eps": eps})
    _execute("path-derivative", options=options, **_common(locals()))


@app.command("solve-coupled")
def solve_coupled(
    tol: Optional[float] = typer.Option(None, "--tol", help="Picard tolerance"),
    max_iter: Optional[int] = typer.Option(None, "--max-iter", help="Picard iteration cap"),
    x0: Optional[str] = typer.Option(None, "--x0", help="Initial path"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[int] = N_OPT,
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Picard iteration for the coupled forward-backward system."""
    _execute(
        "solve-coupled",
        options=_drop_none({"x0": _path(x0, "--x0")}),
        tolerances={"picard_tol": tol, "max_iter": max_iter},
        **_common(locals()),
    )


@app.command()
def converge(
    op: Optional[str] = typer.Option(None, "--op", help="solve-bsvie (N ladder) / simulate-forward (paths) / fk-check (degree)"),
    ladder: Optional[str] = typer.Option(None, "--ladder", help="Ladder parameter: N, paths or degree"),
    values: Optional[str] = typer.Option(None, "--values", help="Comma-separated rung values"),
    replicates: Optional[int] = typer.Option(None, "--replicates", help="Independent seeds per rung"),
    spec: Optional[str] = typer.Option(None, "--spec", help="Linear spec for the N ladder"),
    config: Optional[str] = CONFIG,
    coeff: Optional[str] = COEFF,
    param: Optional[List[str]] = PARAM,
    kernel: Optional[str] = KERNEL,
    T: Optional[float] = T_OPT,
    N: Optional[str] = typer.Option(None, "--N", help="Grid steps, or a comma-separated N ladder"),
    paths: Optional[int] = PATHS,
    seed: Optional[int] = SEED,
    antithetic: Optional[bool] = ANTITHETIC,
    workers: Optional[int] = WORKERS,
    degree: Optional[int] = DEGREE,
    pivots: Optional[int] = PIVOTS,
    ridge: Optional[float] = RIDGE,
    out: Optional[str] = OUT,
    verbose: bool = VERBOSE,
):
    """Errors over a parameter ladder and the fitted convergence order."""
    rungs = [_value(v.strip()) for v in values.split(",")] if values else None
    n_steps = None
    if N is not None:
        try:
            parts = [int(v) for v in N.split(",") if v.strip()]
        except ValueError:
            raise typer.BadParameter(f"expected an integer or comma-separated integers, got '{N}'", param_hint="--N") from None
        if len(parts) > 1:
            rungs, ladder = parts, ladder or "N"
        else:
            n_steps = parts[0]
    options = _drop_none({"op": op, "param": ladder, "values": rungs, "replicates": replicates, "spec": spec})
    common = _common(locals())
    common["N"] = n_steps
    _execute("converge", options=options, **common)


COMMON = ("config", "coeff", "param", "kernel", "T", "N", "paths", "seed", "antithetic", "workers", "degree", "pivots", "ridge", "out", "verbose")


def _common(scope: dict) -> dict:
    return {k: scope.get(k) for k in COMMON if k in scope}


if __name__ == "__main__":
    app()
