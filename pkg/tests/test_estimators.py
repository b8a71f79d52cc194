import math

import numpy as np
import pytest

from hyperns.estimators import (
    TestFunctional,
    bismut_samples,
    bismut_weight,
    coupling_residual,
    estimate_gradient,
    eta_identity_error,
    fd_gradient_crn,
    fd_samples,
    girsanov_checks,
    ou_gradient_oracle,
)
from hyperns.integrator import Integrator, IntegratorConfig, NoiseStream
from hyperns.montecarlo import EstimatorResult


@pytest.fixture(scope="module")
def setup(request):
    from hyperns.model import Model

    m = Model.build(1, 4, 1.0, 1.0, 0.375, 1.0)
    sp = m.space
    x0 = sp.field_from_modes({(1,): 0.5, (2,): 0.2j})
    f = TestFunctional("bounded_tanh", direction=sp.field_from_modes({(1,): 1.0, (2,): 0.5}))
    return m, x0, f


def test_functional_contracts(burgers4):
    sp = burgers4.space
    with pytest.raises(ValueError):
        TestFunctional("cubic")
    with pytest.raises(ValueError):
        TestFunctional("bounded_tanh")
    u = sp.field_from_modes({(1,): 3.0})
    e = sp.basis_direction(0)
    assert TestFunctional("linear", direction=e)(sp, u) == pytest.approx(6.0)
    assert TestFunctional("positive_tanh_sq", direction=e)(sp, u) == pytest.approx(0.1 + math.tanh(6.0) ** 2)
    assert TestFunctional("gaussian_bump")(sp, u) == pytest.approx(math.exp(-18.0))
    assert TestFunctional("constant", level=2.0)(sp, u) == 2.0
    assert TestFunctional("positive_tanh_sq", direction=e).lower_bound == 0.1


def test_linear_functional_rejected_with_nonlinearity(setup):
    m, x0, _ = setup
    f = TestFunctional("linear", direction=m.space.basis_direction(0))
    with pytest.raises(ValueError):
        estimate_gradient(m, x0, m.space.basis_direction(0), f, IntegratorConfig(0.5, 10), 10, 0)


def test_ou_weight_closed_form(setup):
    m, x0, _ = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 20, nonlinearity=False)
    noise = NoiseStream(sp, cfg, 1)
    path = Integrator(sp, cfg).simulate(x0, noise, 4)
    h = sp.field_from_modes({(1,): 1.0, (3,): 0.5j})
    expected = sum(
        sp.inner(sp.apply_q_inverse(sp.semigroup(h, n * cfg.dt)) / cfg.t_final, path.increments[n])
        for n in range(cfg.n_steps)
    )
    assert bismut_weight(m, path, h, nonlinearity=False) == pytest.approx(float(expected), rel=1e-12)


def test_ou_weight_variance(setup):
    m, x0, _ = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 20, nonlinearity=False)
    h = sp.basis_direction(1)
    out = bismut_samples(m, x0, h, TestFunctional("constant"), cfg, 20_000, 3)
    w = out["weight"][:, 0]
    var = sum(
        cfg.dt * float(sp.norm_sq(sp.apply_q_inverse(sp.semigroup(h, n * cfg.dt)))) for n in range(cfg.n_steps)
    ) / cfg.t_final**2
    n = len(w)
    assert abs(w.var(ddof=1) - var) <= 3 * var * math.sqrt(2 / (n - 1))
    assert abs(w.mean()) <= 3 * w.std(ddof=1) / math.sqrt(n)


def test_last_step_integrand_has_no_convection_term(setup):
    from hyperns.estimators import BismutObserver

    m, x0, _ = setup
    cfg = IntegratorConfig(0.5, 10)
    h = m.space.basis_direction(0)
    obs = BismutObserver(m, h[None], cfg)
    at_end = obs.integrand(0.5, x0[None])[0, 0]
    expected = m.space.apply_q_inverse(m.space.semigroup(h, 0.5)) / 0.5
    np.testing.assert_allclose(at_end, expected, rtol=1e-15)


def test_observer_weights_match_path_weights(setup):
    m, x0, f = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 30)
    hs = np.stack([sp.basis_direction(0), sp.basis_direction(2, True)])
    batch = bismut_samples(m, x0, hs, f, cfg, 3, 9)["weight"]
    integ = Integrator(sp, cfg, m.conv)
    for i in range(3):
        path = integ.simulate(x0, NoiseStream(sp, cfg, 9), i)
        for j in range(2):
            assert batch[i, j] == pytest.approx(bismut_weight(m, path, hs[j]), rel=1e-12)


def test_constant_functional_has_zero_gradient(setup):
    m, x0, _ = setup
    cfg = IntegratorConfig(0.5, 50)
    r = estimate_gradient(m, x0, m.space.basis_direction(0), TestFunctional("constant", level=1.5), cfg, 5000, 4)
    assert abs(r.mean) <= 3 * r.stderr


def test_estimate_linear_in_direction(setup):
    m, x0, f = setup
    cfg = IntegratorConfig(0.5, 40)
    h = m.space.field_from_modes({(1,): 1.0, (2,): -0.3j})
    a = estimate_gradient(m, x0, h, f, cfg, 500, 11)
    b = estimate_gradient(m, x0, 2.5 * h, f, cfg, 500, 11)
    assert b.mean == pytest.approx(2.5 * a.mean, rel=1e-12)
    assert b.stderr == pytest.approx(2.5 * a.stderr, rel=1e-12)


def test_ou_gradient_matches_oracle(setup):
    m, x0, _ = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 50, nonlinearity=False)
    h = sp.basis_direction(0)
    r = estimate_gradient(m, x0, h, TestFunctional("linear", direction=h), cfg, 20_000, 5)
    exact = ou_gradient_oracle(m, h, h, 0.5)
    assert exact == pytest.approx(2 * math.exp(-0.5), rel=1e-15)
    assert abs(r.mean - exact) <= 3 * r.stderr


def test_fd_of_constant_is_exactly_zero(setup):
    m, x0, _ = setup
    out = fd_samples(m, x0, m.space.basis_direction(0), TestFunctional("constant"), IntegratorConfig(0.5, 20), 100, 0)
    assert not np.any(out["fd"])


def test_fd_linear_ou_has_no_noise(setup):
    m, x0, _ = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 50, nonlinearity=False)
    h = sp.basis_direction(0)
    out = fd_samples(m, x0, h, TestFunctional("linear", direction=h), cfg, 200, 0)
    # the discrete chain damps by its own factor; compare with the exact semigroup at t
    exact = ou_gradient_oracle(m, h, h, 0.5)
    np.testing.assert_allclose(out["fd"], exact, rtol=1e-9)


def test_fd_requires_positive_epsilon(setup):
    m, x0, f = setup
    with pytest.raises(ValueError):
        fd_samples(m, x0, m.space.basis_direction(0), f, IntegratorConfig(0.5, 10), 10, 0, eps=0.0)


def test_crn_variance_dominance(setup):
    m, x0, f = setup
    sp = m.space
    cfg = IntegratorConfig(0.5, 50)
    h = sp.basis_direction(0)
    eps = 1e-2
    crn = fd_samples(m, x0, h, f, cfg, 4000, 1, eps)
    other = fd_samples(m, x0, h, f, cfg, 4000, 2, eps)
    independent = (crn["f_up"] - other["f_down"]) / (2 * eps)
    assert crn["fd"].var() <= independent.var()


def test_fd_step_stability(setup):
    m, x0, f = setup
    cfg = IntegratorConfig(0.5, 50)
    h = m.space.basis_direction(0)
    a = fd_gradient_crn(m, x0, h, f, cfg, 5000, 3, eps=1e-2)
    b = fd_gradient_crn(m, x0, h, f, cfg, 5000, 3, eps=5e-3)
    assert abs(a.mean - b.mean) <= 3 * math.hypot(a.stderr, b.stderr)


def test_weighted_estimate_agrees_with_finite_difference(setup):
    m, x0, f = setup
    cfg = IntegratorConfig(0.5, 50)
    h = m.space.basis_direction(0)
    b = estimate_gradient(m, x0, h, f, cfg, 20_000, 7)
    d = fd_gradient_crn(m, x0, h, f, cfg, 20_000, 8)
    assert abs(b.mean - d.mean) <= 3 * math.hypot(b.stderr, d.stderr)


def test_weight_mean_zero_at_acceptance_setting(setup):
    m, x0, f = setup
    cfg = IntegratorConfig(0.5, 200)
    out = bismut_samples(m, x0, m.space.basis_direction(0), f, cfg, 100_000, 2024)
    w = EstimatorResult.from_samples(out["weight"][:, 0])
    assert abs(w.mean) <= 3 * w.stderr


# -- coupling and change of measure ------------------------------------------


def test_coupling_with_zero_step_is_exact(setup):
    m, x0, _ = setup
    cfg = IntegratorConfig(0.5, 50)
    assert coupling_residual(m, x0, m.space.basis_direction(0), 0.0, cfg, NoiseStream(m.space, cfg, 0)) == 0.0


def test_coupling_exponential_scheme_meets_at_final_time(setup):
    m, x0, _ = setup
    cfg = IntegratorConfig(0.5, 200)
    h = m.space.field_from_modes({(1,): 1.0, (2,): 1.0, (3,): 0.5j})
    res, xs, ys = coupling_residual(m, x0, h, 0.05, cfg, NoiseStream(m.space, cfg, 1), return_paths=True)
    assert res <= 1e-12
    assert float(m.space.norm(ys[-1] - xs[-1])) <= 1e-12


def test_coupling_semi_implicit_first_order(setup):
    m, x0, _ = setup
    h = m.space.basis_direction(0)
    res = []
    for steps in (200, 400, 800):
        cfg = IntegratorConfig(0.5, steps, "semi_implicit_euler")
        res.append(coupling_residual(m, x0, h, 0.05, cfg, NoiseStream(m.space, cfg, 2)))
    bound = 10 * (0.5 / 200) * 0.05 * float(m.space.norm(h, "V"))
    assert res[0] <= bound
    assert res[0] / res[1] >= 1.5
    assert res[1] / res[2] >= 1.5


def test_girsanov_trivial_at_zero_step(setup):
    m, x0, f = setup
    g = girsanov_checks(m, x0, m.space.basis_direction(0), 0.0, f, IntegratorConfig(0.5, 20), 2000, 0)
    assert g["mean_R"] == 1.0
    assert g["stderr_R"] == 0.0
    assert g["martingale_gap"] == 0.0
    assert g["martingale_pass"] and g["identity_pass"]


def test_girsanov_rejects_large_step(setup):
    m, x0, f = setup
    with pytest.raises(ValueError):
        girsanov_checks(m, x0, m.space.basis_direction(0), 0.2, f, IntegratorConfig(0.5, 20), 100, 0)


def test_girsanov_martingale_and_identity(setup):
    m, x0, f = setup
    g = girsanov_checks(m, x0, m.space.basis_direction(0), 0.05, f, IntegratorConfig(0.5, 50), 20_000, 5)
    assert g["martingale_pass"]
    assert g["identity_pass"]


@pytest.mark.parametrize("nonlinear", [True, False])
def test_eta_identity(setup, nonlinear):
    m, x0, _ = setup
    cfg = IntegratorConfig(0.5, 50, nonlinearity=nonlinear)
    path = Integrator(m.space, cfg, m.conv).simulate(x0, NoiseStream(m.space, cfg, 0))
    h = m.space.field_from_modes({(1,): 1.0, (2,): 0.4j})
    assert eta_identity_error(m, path, h, 0.05, nonlinear) <= 1e-10
