from __future__ import annotations

import math
from typing import Any, Callable, Mapping

import numpy as np

from volterrafk.coefficients import (
    CoefficientMeta,
    CoefficientSet,
    DerivativeWeights,
    KernelSpec,
    LinearBSVIESpec,
)
from volterrafk.errors import ConfigError
from volterrafk.linear_oracle import DualPairSpec, MeasureKernel


def _params(name: str, given: Mapping[str, Any] | None, defaults: dict[str, Any]) -> dict[str, Any]:
    out = dict(defaults)
    for key, val in (given or {}).items():
        if key not in defaults:
            raise ConfigError(f"Unknown parameter for '{name}': {key} (choose from {', '.join(defaults) or 'none'})")
        default = defaults[key]
        try:
            out[key] = type(default)(val) if not isinstance(default, str) else str(val)
        except (TypeError, ValueError):
            raise ConfigError(f"Invalid value for '{name}.{key}': {val!r}") from None
    return out


def _terminal_weights(scale: float) -> Callable:
    def dg(t, x):
        w = np.zeros(np.shape(x), dtype=float)
        w[:, -1] = scale
        return w

    return dg


def _zero(*_a, **_k) -> float:
    return 0.0


def _linear_terminal(p: dict) -> Callable:
    return lambda t, x: p["g_scale"] * x[:, -1] + p["g_shift"]


def _zero_family(params) -> CoefficientSet:
    p = _params("zero", params, {"f_const": 0.0, "g_scale": 1.0, "g_shift": 0.0})
    return CoefficientSet(
        name="zero",
        b=_zero,
        sigma=_zero,
        f=lambda t, r, x, y, z, z2: p["f_const"],
        g=_linear_terminal(p),
        meta=CoefficientMeta(monotone_in_y=True, state_dependent=True),
        params=p,
        derivatives=DerivativeWeights(_zero, _zero, _zero, _zero, _zero, _terminal_weights(p["g_scale"])),
    )


def _bm_family(params) -> CoefficientSet:
    p = _params("bm", params, {"d": 1, "f_const": 0.0, "g_scale": 1.0, "g_shift": 0.0})
    d = p["d"]
    if d < 1:
        raise ConfigError("d must be ≥ 1")
    row = np.full(d, 1.0 / math.sqrt(d))
    return CoefficientSet(
        name="bm",
        b=_zero,
        sigma=lambda t, r, x, y: row,
        f=lambda t, r, x, y, z, z2: p["f_const"],
        g=_linear_terminal(p),
        meta=CoefficientMeta(monotone_in_y=True, state_dependent=True),
        d=d,
        params=p,
        derivatives=DerivativeWeights(_zero, _zero, _zero, _zero, _zero, _terminal_weights(p["g_scale"])),
    )


def fbm_kernel(p: Mapping[str, Any]) -> KernelSpec:
    """The `kernel` parameter (e.g. "exponential:c=1,lam=2") when set, else the fractional kernel of H and c."""
    if p.get("kernel"):
        return KernelSpec.parse(p["kernel"])
    return KernelSpec("fractional", H=p["H"], c=p["c"])


def _fbm_family(params) -> CoefficientSet:
    p = _params("fbm", params, {"H": 0.5, "c": 1.0, "kernel": "", "f_const": 0.0, "g_scale": 1.0, "g_shift": 0.0})
    kernel = fbm_kernel(p)
    return CoefficientSet(
        name="fbm",
        b=_zero,
        sigma=lambda t, r, x, y: kernel(t, r),
        f=lambda t, r, x, y, z, z2: p["f_const"],
        g=_linear_terminal(p),
        meta=CoefficientMeta(monotone_in_y=True, state_dependent=True, singular_kernel=kernel.singular),
        params=p,
        derivatives=DerivativeWeights(_zero, _zero, _zero, _zero, _zero, _terminal_weights(p["g_scale"])),
    )


def _linear_volterra_family(params) -> CoefficientSet:
    p = _params("linear-volterra", params, {"spec": "full"})
    return linear_spec(p["spec"]).coefficient_set()


def _state_lipschitz_family(params) -> CoefficientSet:
    p = _params(
        "state-lipschitz",
        params,
        {
            "kb": 0.3,
            "s0": 0.5,
            "s1": 0.2,
            "lam": 1.0,
            "ay": 0.5,
            "az": 0.2,
            "cx": 0.5,
            "f_const": 0.0,
            "g_shift": 0.0,
        },
    )
    if p["ay"] < 0:
        raise ConfigError("state-lipschitz requires ay ≥ 0 (driver nondecreasing in y)")
    kb, s0, s1, lam = p["kb"], p["s0"], p["s1"], p["lam"]
    ay, az, cx = p["ay"], p["az"], p["cx"]

    def b(t, r, x, y):
        return kb * math.exp(-lam * (t - r)) * np.cos(x[:, -1])

    def sigma(t, r, x, y):
        return (s0 + s1 * np.sin(x[:, -1])) * math.exp(-lam * (t - r))

    def f(t, r, x, y, z, z2):
        return ay * y + az * z[:, 0] + cx * math.exp(-(r - t)) * np.sin(x[:, -1]) + p["f_const"]

    def g(t, x):
        return (1.0 + 0.5 * t) * np.sin(x[:, -1]) + p["g_shift"]

    def dg(t, x):
        w = np.zeros(np.shape(x), dtype=float)
        w[:, -1] = (1.0 + 0.5 * t) * np.cos(x[:, -1])
        return w

    weights = DerivativeWeights(
        db=lambda t, r, xr, y: -kb * math.exp(-lam * (t - r)) * np.sin(xr),
        dsigma=lambda t, r, xr, y: (s1 * np.cos(xr) * math.exp(-lam * (t - r)))[:, None],
        df_x=lambda t, r, xr, y, z: cx * math.exp(-(r - t)) * np.cos(xr),
        df_y=lambda t, r, xr, y, z: np.full(np.shape(xr), ay),
        df_z=lambda t, r, xr, y, z: np.full((np.shape(xr)[0], 1), az),
        dg=dg,
    )
    return CoefficientSet(
        name="state-lipschitz",
        b=b,
        sigma=sigma,
        f=f,
        g=g,
        meta=CoefficientMeta(lipschitz_y=ay, lipschitz_z=az, monotone_in_y=True, state_dependent=True),
        params=p,
        derivatives=weights,
    )


def _type2_linear_family(params) -> CoefficientSet:
    p = _params("type2-linear", params, {"a": 0.3, "c": 0.2, "e": 0.4, "g_shift": 0.0})
    a, c, e = p["a"], p["c"], p["e"]

    def f(t, r, x, y, z, z2):
        out = a * y + c * z[:, 0]
        if z2 is not None:
            out = out + e * z2[:, 0]
        return out

    return CoefficientSet(
        name="type2-linear",
        b=_zero,
        sigma=lambda t, r, x, y: 1.0,
        f=f,
        g=lambda t, x: x[:, -1] + p["g_shift"],
        meta=CoefficientMeta(lipschitz_y=abs(a), lipschitz_z=abs(c), monotone_in_y=a >= 0, state_dependent=True, type2=True),
        params=p,
    )


def _coupled_family(params) -> CoefficientSet:
    p = _params("coupled", params, {"kappa": 0.1, "ay": 0.0, "f_const": 0.0})
    kappa = p["kappa"]

    def b(t, r, x, y):
        return 0.0 if y is None else kappa * y

    return CoefficientSet(
        name="coupled",
        b=b,
        sigma=lambda t, r, x, y: 1.0,
        f=lambda t, r, x, y, z, z2: p["ay"] * y + p["f_const"],
        g=lambda t, x: x[:, -1],
        meta=CoefficientMeta(lipschitz_y=abs(p["ay"]), monotone_in_y=p["ay"] >= 0, state_dependent=True, coupled=kappa != 0.0),
        params=p,
    )


FAMILIES: dict[str, Callable[[Mapping[str, Any] | None], CoefficientSet]] = {
    "zero": _zero_family,
    "bm": _bm_family,
    "fbm": _fbm_family,
    "linear-volterra": _linear_volterra_family,
    "state-lipschitz": _state_lipschitz_family,
    "type2-linear": _type2_linear_family,
    "coupled": _coupled_family,
}


def builtin(name: str, params: Mapping[str, Any] | None = None) -> CoefficientSet:
    if name not in FAMILIES:
        raise ConfigError(f"Unknown coefficient family: {name} (choose from {', '.join(FAMILIES)})")
    return FAMILIES[name](params)


# Linear BSVIE specs. The Brownian path W is the forward state (b = 0, sigma = 1, x0 = 0).


def _constant_spec(params) -> LinearBSVIESpec:
    p = _params("constant", params, {"a": 0.5, "c": 1.0})
    a, c = p["a"], p["c"]
    return LinearBSVIESpec(
        name="constant",
        alpha=lambda t, r, w: a,
        beta=lambda t, r, w: 0.0,
        xi=lambda t, w: np.full(w.shape[0], c),
        deterministic_coefficients=True,
        deterministic_xi=True,
        exact=lambda t, T: c * math.exp(a * (T - t)),
    )


def _deterministic_spec(params) -> LinearBSVIESpec:
    p = _params("deterministic", params, {"a": 0.5})
    a = p["a"]
    return LinearBSVIESpec(
        name="deterministic",
        alpha=lambda t, r, w: a * math.exp(-(r - t)),
        beta=lambda t, r, w: 0.0,
        xi=lambda t, w: np.full(w.shape[0], 1.0 + t),
        deterministic_coefficients=True,
        deterministic_xi=True,
    )


def _random_xi_spec(params) -> LinearBSVIESpec:
    p = _params("random-xi", params, {"a": 0.5, "q": 0.25})
    a, q = p["a"], p["q"]
    return LinearBSVIESpec(
        name="random-xi",
        alpha=lambda t, r, w: a,
        beta=lambda t, r, w: 0.0,
        xi=lambda t, w: 1.0 + t + q * w[:, -1] ** 2,
        deterministic_coefficients=True,
    )


def _full_spec(params) -> LinearBSVIESpec:
    p = _params("full", params, {"a": 0.4, "b0": 0.3, "q": 0.25})
    a, b0, q = p["a"], p["b0"], p["q"]
    return LinearBSVIESpec(
        name="full",
        alpha=lambda t, r, w: a * math.exp(-(r - t)),
        beta=lambda t, r, w: b0 * (1.0 + 0.5 * t),
        xi=lambda t, w: 1.0 + t + q * w[:, -1] ** 2,
        deterministic_coefficients=True,
    )


LINEAR_SPECS: dict[str, Callable[[Mapping[str, Any] | None], LinearBSVIESpec]] = {
    "constant": _constant_spec,
    "deterministic": _deterministic_spec,
    "random-xi": _random_xi_spec,
    "full": _full_spec,
}


def linear_spec(name: str, params: Mapping[str, Any] | None = None) -> LinearBSVIESpec:
    if name not in LINEAR_SPECS:
        raise ConfigError(f"Unknown linear spec: {name} (choose from {', '.join(LINEAR_SPECS)})")
    return LINEAR_SPECS[name](params)


# Dual pairs for the state-dependent duality check.


def _decoupled_pair(params) -> DualPairSpec:
    _params("decoupled", params, {})
    return DualPairSpec(
        name="decoupled",
        eta=lambda t: 1.0 + t,
        b=lambda t, s: 0.0,
        sigma=lambda t, s: 0.0,
        g=lambda t, w: np.full(w.shape[0], math.cos(t)),
        deterministic_g=True,
    )


def _deterministic_pair(params) -> DualPairSpec:
    p = _params("deterministic", params, {"b0": 0.5})
    b0 = p["b0"]
    return DualPairSpec(
        name="deterministic",
        eta=lambda t: 1.0 + t,
        b=lambda t, s: b0,
        sigma=lambda t, s: 0.0,
        g=lambda t, w: np.full(w.shape[0], 1.0 + t * t),
        deterministic_g=True,
    )


def _stochastic_pair(params) -> DualPairSpec:
    p = _params("stochastic", params, {"b0": 0.5, "s0": 0.4, "gw": 0.5})
    b0, s0, gw = p["b0"], p["s0"], p["gw"]
    return DualPairSpec(
        name="stochastic",
        eta=lambda t: 1.0,
        b=lambda t, s: b0 * math.exp(-(t - s)),
        sigma=lambda t, s: s0,
        g=lambda t, w: 1.0 + t + gw * w[:, -1],
    )


DUAL_PAIRS: dict[str, Callable[[Mapping[str, Any] | None], DualPairSpec]] = {
    "decoupled": _decoupled_pair,
    "deterministic": _deterministic_pair,
    "stochastic": _stochastic_pair,
}


def dual_pair(name: str, params: Mapping[str, Any] | None = None) -> DualPairSpec:
    if name not in DUAL_PAIRS:
        raise ConfigError(f"Unknown dual pair: {name} (choose from {', '.join(DUAL_PAIRS)})")
    return DUAL_PAIRS[name](params)


def delayed_pair(theta: float, mu: float, mu_bar: float, sig: float, sig_bar: float) -> MeasureKernel:
    """Delayed-equation kernels as node-weight measures.

    Weight sits at the Dirac point s and, once s >= theta, at s - theta. Only
    the forward pairing consumes these kernels.
    """
    if theta <= 0:
        raise ConfigError("theta must be > 0")

    def weights(coef: float, coef_bar: float) -> Callable:
        def w(t, s, nodes):
            out = np.zeros(nodes.shape[0])
            k = int(np.searchsorted(nodes, s - 1e-12))
            out[k] += coef
            if s >= theta - 1e-12:
                kd = int(np.searchsorted(nodes, s - theta - 1e-12))
                out[kd] += coef_bar
            return out

        return w

    return MeasureKernel(b=weights(mu, mu_bar), sigma=weights(sig, sig_bar))
