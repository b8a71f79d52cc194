import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hyperns.estimators import TestFunctional
from hyperns.inequalities import (
    HarnessError,
    basis_directions,
    check_gradient_estimate,
    entropy_gradient_check,
    entropy_threshold,
    entropy_time,
    exp_moment_check,
    gradient_bound_rhs,
    harnack_check,
    harnack_exponent,
    local_radius,
)
from hyperns.integrator import IntegratorConfig
from hyperns.model import Model

REPORT_KEYS = {"check", "variant", "params", "lhs_mean", "lhs_stderr", "rhs", "slack_policy", "pass", "seed"}


@pytest.fixture(scope="module")
def m():
    return Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)


@pytest.fixture(scope="module")
def x0(m):
    return m.space.field_from_modes({(1,): 0.5, (2,): 0.2j})


@pytest.fixture(scope="module")
def fpos(m):
    return TestFunctional("positive_tanh_sq", direction=m.space.field_from_modes({(1,): 1.0, (2,): 0.5}))


CFG = IntegratorConfig(0.5, 50)


# -- closed-form pieces ---------------------------------------------------------


def test_bracket_reference_value():
    m = Model.build(1, 8, 1.0, 1.0, 0.5, 1.0)
    k2 = 64 * math.pi**4 / 45
    q_hs = 2 * sum(k**-2.0 for k in range(1, 9))
    expected = 2 / 0.5 + 4 * k2 * (1.0 + q_hs * 0.5)
    assert gradient_bound_rhs(1.0, 0.5, m) == pytest.approx(expected, rel=1e-5)
    assert gradient_bound_rhs(1.0, 0.5, m) == pytest.approx(1404.56965552147, rel=1e-5)


def test_bracket_at_unit_time(m):
    c = m.constants
    assert gradient_bound_rhs(0.0, 1.0, m) == pytest.approx(2 * c.K1 + 4 * c.K2 * c.q_hs_norm_sq, rel=1e-15)


def test_bracket_linear_growth(m):
    c = m.constants
    slope = 4 * c.K2 * c.q_hs_norm_sq
    a, b = gradient_bound_rhs(0.0, 100.0, m), gradient_bound_rhs(0.0, 200.0, m)
    # the 2 K1/t term contributes (2K1/200 - 2K1/100)/100
    assert (b - a) / 100.0 == pytest.approx(slope - c.K1 / 1e4, rel=1e-9)


def test_bracket_rejects_nonpositive_time(m):
    with pytest.raises(HarnessError):
        gradient_bound_rhs(0.0, 0.0, m)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.01, 5), st.floats(1.0, 3.0))
def test_bracket_monotone(a, b, t, scale):
    m = Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)
    lo, hi = sorted((a, b))
    assert gradient_bound_rhs(lo, t, m) <= gradient_bound_rhs(hi, t, m)
    bigger = Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)
    bigger.constants = replace(m.constants, K2=m.constants.K2 * scale)
    assert gradient_bound_rhs(a, t, m) <= gradient_bound_rhs(a, t, bigger)


def test_entropy_threshold_value(m):
    c = m.constants
    assert entropy_threshold(m) == pytest.approx(4 * math.sqrt(c.K2), rel=1e-15)
    d0 = entropy_threshold(m)
    assert entropy_time(m, d0) == pytest.approx(d0**2 / (4 * math.e * c.K2), rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0001, 50.0), st.floats(1.0001, 50.0))
def test_local_radius_increases_with_alpha(a, b):
    m = Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)
    if a == b:
        return
    lo, hi = sorted((a, b))
    assert local_radius(m, lo) < local_radius(m, hi)


def test_local_radius_rejects_alpha_at_most_one(m):
    with pytest.raises(HarnessError):
        local_radius(m, 1.0)


def test_harnack_exponent_vanishes_on_diagonal(m, x0):
    assert harnack_exponent(m, x0, x0, 2.0, 0.5, "local") == 0.0
    assert harnack_exponent(m, x0, x0, 2.0, 0.5, "global") == 0.0


def test_basis_directions_normalized(m):
    dirs = basis_directions(m)
    assert dirs.shape == (8, 4, 1)
    np.testing.assert_allclose(m.space.norm(dirs, "V_theta"), 1.0, rtol=1e-14)


# -- gradient -------------------------------------------------------------------


def test_gradient_rejects_unnormalized(m, x0, fpos):
    with pytest.raises(HarnessError):
        check_gradient_estimate(m, x0, m.space.basis_direction(0)[None], fpos, CFG, 100, 0)


def test_gradient_constant_functional(m, x0):
    reps = check_gradient_estimate(m, x0, basis_directions(m), TestFunctional("constant"), CFG, 2000, 0)
    assert all(r["pass"] for r in reps)
    assert REPORT_KEYS <= set(reps[0])


def test_gradient_ou_linear_closed_form(m, x0):
    """Linear functional without convection: both sides are closed forms."""
    sp = m.space
    cfg = IntegratorConfig(0.5, 50, nonlinearity=False)
    h = basis_directions(m)[:1]
    e = sp.basis_direction(0)
    exact_lhs = (sp.inner(sp.semigroup(h[0], 0.5), e)) ** 2
    mean = sp.inner(sp.semigroup(x0, 0.5), e)
    # <X_t, e> = 2 Re X_t(k=1), whose variance is q^2 (1 - e^{-2 t lambda_1})
    var = (1 - math.exp(-2 * 0.5)) * float(m.space.q_eig[0]) ** 2
    exact_rhs = (mean**2 + var) * gradient_bound_rhs(float(sp.norm_sq(x0)), 0.5, m)
    assert exact_lhs <= exact_rhs
    rep = check_gradient_estimate(m, x0, h, TestFunctional("linear", direction=e), cfg, 20_000, 1)[0]
    assert rep["pass"]
    assert abs(rep["d_mean"] - math.sqrt(exact_lhs)) <= 3 * rep["d_stderr"]


def test_gradient_nonlinear_all_directions(m, x0):
    f = TestFunctional("bounded_tanh", direction=m.space.field_from_modes({(1,): 1.0, (2,): 0.5}))
    reps = check_gradient_estimate(m, x0, basis_directions(m), f, CFG, 5000, 2)
    assert len(reps) == 8
    assert all(r["pass"] for r in reps)


# -- entropy ----------------------------------------------------------------------


def test_entropy_local_rejects_small_weight(m, x0, fpos):
    with pytest.raises(HarnessError):
        entropy_gradient_check(m, x0, basis_directions(m)[0], fpos, 0.5 * entropy_threshold(m), "local", CFG, 100, 0)


def test_entropy_local_accepts_threshold(m, x0, fpos):
    rep = entropy_gradient_check(m, x0, basis_directions(m)[0], fpos, entropy_threshold(m), "local", CFG, 3000, 0)
    assert rep["pass"]
    assert REPORT_KEYS <= set(rep)


def test_entropy_constant_functional(m, x0):
    rep = entropy_gradient_check(
        m, x0, basis_directions(m)[0], TestFunctional("constant", level=2.0), entropy_threshold(m), "local", CFG, 2000, 0
    )
    assert rep["entropy"] == pytest.approx(0.0, abs=1e-12)
    assert rep["pass"]


def test_entropy_rejects_nonpositive_functional(m, x0):
    f = TestFunctional("bounded_tanh", direction=m.space.basis_direction(0))
    with pytest.raises(HarnessError):
        entropy_gradient_check(m, x0, basis_directions(m)[0], f, 100.0, "global", CFG, 500, 0)


def test_entropy_global_below_threshold(m, x0, fpos):
    rep = entropy_gradient_check(m, x0, basis_directions(m)[0], fpos, entropy_threshold(m) / 10, "global", CFG, 3000, 0)
    assert rep["pass"]
    assert rep["t_eff"] == pytest.approx(min(0.5, entropy_time(m, entropy_threshold(m) / 10)))


def test_entropy_estimate_nonnegative(m, x0, fpos):
    rep = entropy_gradient_check(m, x0, basis_directions(m)[0], fpos, 100.0, "global", CFG, 3000, 4)
    assert rep["entropy"] + 3 * rep["entropy_stderr"] >= 0


def test_entropy_unknown_variant(m, x0, fpos):
    with pytest.raises(HarnessError):
        entropy_gradient_check(m, x0, basis_directions(m)[0], fpos, 1.0, "semi", CFG, 100, 0)


# -- Harnack ----------------------------------------------------------------------


def test_harnack_rejects_outside_radius(m, x0, fpos):
    h = basis_directions(m)[0]
    with pytest.raises(HarnessError, match="outside local radius"):
        harnack_check(m, x0, x0 + 2 * local_radius(m, 2.0) * h, 2.0, fpos, "local", CFG, 100, 0)


def test_harnack_rejects_small_alpha(m, x0, fpos):
    with pytest.raises(HarnessError):
        harnack_check(m, x0, x0, 1.0, fpos, "global", CFG, 100, 0)


def test_harnack_rejects_signed_functional(m, x0):
    f = TestFunctional("bounded_tanh", direction=m.space.basis_direction(0))
    with pytest.raises(HarnessError):
        harnack_check(m, x0, x0, 2.0, f, "global", CFG, 100, 0)


def test_harnack_diagonal_is_jensen(m, x0, fpos):
    rep = harnack_check(m, x0, x0, 2.0, fpos, "local", CFG, 3000, 0)
    assert rep["exponent"] == 0.0
    assert rep["pass"]


def test_harnack_constant_functional(m, x0):
    f = TestFunctional("constant", level=0.7)
    y = x0 + 0.5 * local_radius(m, 3.0) * basis_directions(m)[1]
    rep = harnack_check(m, x0, y, 3.0, f, "local", CFG, 500, 0)
    assert rep["lhs_slacked"] == pytest.approx(0.7**3)
    assert rep["pass"]


@pytest.mark.parametrize("variant,factor", [("local", 0.5), ("global", 2.0)])
def test_harnack_variants(m, x0, fpos, variant, factor):
    y = x0 + factor * local_radius(m, 2.0) * basis_directions(m)[0]
    rep = harnack_check(m, x0, y, 2.0, fpos, variant, CFG, 5000, 3)
    assert rep["pass"]
    assert REPORT_KEYS <= set(rep)


# -- exponential moments ------------------------------------------------------------


def test_exp_moment_zero_noise_equality_edge(m):
    cfg = IntegratorConfig(0.5, 20, noise_amplitude=0.0)
    reps = exp_moment_check(m, m.space.zeros(), cfg, 50, 0)
    for r in reps:
        assert r["mean_G"] == 0.0
        assert r["log_rhs"] == 0.0
        assert r["pass"]


def test_exp_moment_from_rest(m):
    reps = exp_moment_check(m, m.space.zeros(), CFG, 3000, 1)
    assert [r["variant"] for r in reps] == ["dissipative", "time_scaled"]
    for r in reps:
        assert r["pass"]
        # the energy identity gives E G <= (|x|^2 + |Q|_HS^2 t)/2
        assert r["mean_G"] <= 0.5 * m.constants.q_hs_norm_sq * 0.5 + 3 * r["stderr_G"]
        assert {"top1pct_share", "heavy_tail_warning", "log_empirical_exp_moment"} <= set(r)


def test_reports_are_reproducible(m, x0, fpos):
    a = harnack_check(m, x0, x0, 2.0, fpos, "global", CFG, 500, 9)
    b = harnack_check(m, x0, x0, 2.0, fpos, "global", CFG, 500, 9)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
