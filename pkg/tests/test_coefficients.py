from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
import scipy.integrate

from volterrafk.coefficients import (
    KernelSpec,
    as_paths,
    as_paths_d,
    check_derivatives,
    derivative_weights,
    finite_difference_weights,
    probe_adaptedness,
    probe_monotonicity,
)
from volterrafk.errors import ConfigError, ContractError
from volterrafk.families import FAMILIES, builtin, linear_spec


class TestKernel:
    @pytest.mark.parametrize("H", [0.0, 1.0, -0.2, 1.5])
    def test_hurst_range(self, H):
        with pytest.raises(ConfigError, match=r"H must lie in \(0,1\)"):
            KernelSpec("fractional", H=H)

    def test_parse(self):
        k = KernelSpec.parse("fractional:H=0.3,c=2")
        assert (k.kind, k.H, k.c) == ("fractional", 0.3, 2.0)
        assert k.singular
        with pytest.raises(ConfigError, match="Unknown kernel parameter"):
            KernelSpec.parse("fractional:q=1")
        with pytest.raises(ConfigError, match="Unknown kernel kind"):
            KernelSpec.parse("gaussian")
        with pytest.raises(ConfigError, match="Invalid kernel parameter H"):
            KernelSpec.parse("fractional:H=low")

    def test_values(self):
        frac = KernelSpec("fractional", H=0.7, c=1.5)
        assert frac(1.0, 2.0) == 0.0, "kernel must vanish for r > t"
        assert frac(1.0, 0.75) == pytest.approx(1.5 * 0.25**0.2)
        assert KernelSpec("fractional", H=0.5)(0.3, 0.3) == 1.0
        assert KernelSpec("exponential", c=2.0, lam=3.0)(1.0, 0.5) == pytest.approx(2.0 * math.exp(-1.5))


class TestBroadcast:
    def test_scalar_and_vector(self):
        assert np.array_equal(as_paths(2.0, 3), [2.0, 2.0, 2.0])
        assert as_paths_d(1.0, 4, 2).shape == (4, 2)
        assert as_paths_d(np.arange(4.0), 4, 1).shape == (4, 1)
        assert np.array_equal(as_paths_d(np.array([1.0, 2.0]), 3, 2)[2], [1.0, 2.0])


class TestDerivatives:
    def test_analytic_weights_match_differences(self, grid):
        coeffs = builtin("state-lipschitz")
        gap = check_derivatives(coeffs, coeffs.derivatives, grid, np.random.default_rng(0))
        assert gap < 1e-6, f"analytic and finite-difference weights differ by {gap:.3g}"

    def test_each_coefficient_is_read_on_its_own_side_of_the_diagonal(self, grid):
        base = builtin("state-lipschitz")
        seen = {"forward": [], "backward": []}

        def logged(fn, side):
            def call(t, r, *rest):
                seen[side].append((t, r))
                return fn(t, r, *rest)

            return call

        w = base.derivatives
        coeffs = dataclasses.replace(
            base,
            b=logged(base.b, "forward"),
            sigma=logged(base.sigma, "forward"),
            f=logged(base.f, "backward"),
        )
        weights = dataclasses.replace(
            w,
            db=logged(w.db, "forward"),
            dsigma=logged(w.dsigma, "forward"),
            df_x=logged(w.df_x, "backward"),
            df_y=logged(w.df_y, "backward"),
            df_z=logged(w.df_z, "backward"),
        )
        rng = np.random.default_rng(4)
        assert check_derivatives(coeffs, weights, grid, rng) < 1e-6
        assert probe_adaptedness(coeffs, grid, rng)
        assert probe_monotonicity(coeffs, grid, rng)
        assert seen["forward"] and seen["backward"]
        assert all(t >= r for t, r in seen["forward"]), "b or sigma read with t < r"
        assert all(t <= r for t, r in seen["backward"]), "driver read with t > r"

    def test_finite_difference_fallback(self, grid):
        coeffs = dataclasses.replace(builtin("state-lipschitz"), derivatives=None)
        w = derivative_weights(coeffs, grid)
        assert not w.analytic
        xr = np.linspace(-1, 1, 5)
        exact = builtin("state-lipschitz").derivatives.db(0.5, 0.25, xr, None)
        assert np.allclose(w.db(0.5, 0.25, xr, None), exact, atol=1e-8)

    def test_time_integral_terminal_has_trapezoid_weights(self, grid):
        coeffs = dataclasses.replace(
            builtin("zero"),
            g=lambda t, x: scipy.integrate.trapezoid(x, dx=grid.dt, axis=1),
            derivatives=None,
        )
        x = np.random.default_rng(5).standard_normal((3, grid.N + 1))
        dg = derivative_weights(coeffs, grid).dg(grid.T, x)
        expected = np.full(grid.N + 1, grid.dt)
        expected[[0, -1]] = grid.dt / 2
        assert np.allclose(dg, expected, atol=1e-8), f"weights {dg[0]}"

    def test_path_dependent_without_weights(self, grid):
        coeffs = linear_spec("full").coefficient_set()
        with pytest.raises(ContractError, match="state-dependent"):
            derivative_weights(coeffs, grid)

    def test_terminal_weights_sit_on_last_node(self, grid):
        w = finite_difference_weights(builtin("bm"), grid)
        x = np.random.default_rng(1).standard_normal((3, grid.N + 1))
        dg = w.dg(0.0, x)
        assert np.allclose(dg[:, -1], 1.0) and np.allclose(dg[:, :-1], 0.0)


class TestProbes:
    @pytest.mark.parametrize("name", sorted(FAMILIES))
    def test_builtin_families_are_adapted(self, name, grid):
        assert probe_adaptedness(builtin(name), grid, np.random.default_rng(2)), f"'{name}' reads the future"

    def test_monotone_family_passes(self, grid):
        assert probe_monotonicity(builtin("state-lipschitz"), grid, np.random.default_rng(3))

    def test_decreasing_driver_is_caught(self, grid):
        coeffs = dataclasses.replace(builtin("zero"), f=lambda t, r, x, y, z, z2: -y)
        assert not probe_monotonicity(coeffs, grid, np.random.default_rng(3))


class TestCoefficientSet:
    def test_type1_driver_never_sees_z2(self):
        def f(t, r, x, y, z, z2):
            assert z2 is None
            return y

        coeffs = dataclasses.replace(builtin("zero"), f=f)
        n = 4
        out = coeffs.eval_f(0.0, 0.5, np.zeros((n, 2)), np.ones(n), np.zeros((n, 1)), np.ones((n, 1)))
        assert np.array_equal(out, np.ones(n))

    def test_linear_spec_driver(self):
        coeffs = linear_spec("full").coefficient_set()
        n = 3
        w = np.zeros((n, 2))
        y, z = np.full(n, 2.0), np.full((n, 1), 1.0)
        expected = 0.4 * math.exp(-0.5) * 2.0 + 0.3 * 1.0
        assert np.allclose(coeffs.eval_f(0.0, 0.5, w, y, z), expected)
