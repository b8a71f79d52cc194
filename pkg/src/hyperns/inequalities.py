"""Monte Carlo verification of gradient, entropy-gradient, Harnack and
exponential-moment bounds with their explicit constants.

Every estimated quantity gets a one-sided slack of ``n_sigma`` standard errors
in the direction that makes the inequality harder to satisfy: left-hand sides
are lowered, right-hand sides raised.  A pass therefore means the bound held
by a margin larger than the Monte Carlo noise.

The dual norm ``||D P_t f(x)||`` is a supremum over ``||h||_{V_theta} <= 1``;
only lower bounds of it are computable, so gradient-type bounds are asserted
direction by direction.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .estimators import TestFunctional, bismut_samples
from .integrator import EnergyObserver, Integrator, IntegratorConfig, NoiseStream
from .model import Model
from .montecarlo import EstimatorResult, derive_seed, sample_map

__all__ = [
    "SLACK_POLICY",
    "gradient_bound_rhs",
    "entropy_threshold",
    "local_radius",
    "basis_directions",
    "check_gradient_estimate",
    "entropy_gradient_check",
    "harnack_check",
    "exp_moment_check",
    "HarnessError",
    "functional_samples",
    "harnack_exponent",
    "entropy_time",
    "csv_row",
    "CSV_HEADER",
    "inequality_suite",
]

N_SIGMA = 3.0
SLACK_POLICY = "one-sided 3-stderr, against the inequality"


class HarnessError(ValueError):
    """A precondition of a check does not hold (threshold, radius, positivity)."""


def _params(model: Model, t: float, n_samples: int) -> dict:
    return {**model.describe(), "t": t, "samples": n_samples}


def _report(check, variant, model, t, n_samples, seed, lhs_mean, lhs_stderr, rhs, passed, **extra) -> dict:
    rec = {
        "check": check,
        "variant": variant,
        "params": _params(model, t, n_samples),
        "lhs_mean": float(lhs_mean),
        "lhs_stderr": float(lhs_stderr),
        "rhs": float(rhs),
        "slack_policy": SLACK_POLICY,
        "pass": bool(passed),
        "seed": seed,
    }
    rec.update(extra)
    return rec


def gradient_bound_rhs(x_norm_sq: float, t: float, model: Model) -> float:
    """``2 K1/t + 4 K2/lambda0^{2-theta} (||x||_H^2 + ||Q||_HS^2 t)``."""
    if not t > 0:
        raise HarnessError(f"t must be positive, got {t}")
    c, p = model.constants, model.params
    return 2 * c.K1 / t + 4 * c.K2 / p.lambda0 ** (2 - p.theta) * (x_norm_sq + c.q_hs_norm_sq * t)


def entropy_threshold(model: Model) -> float:
    """Smallest admissible entropy weight of the local gradient-entropy bound."""
    c, p = model.constants, model.params
    return 4 * math.sqrt(c.K2) * c.q_op_norm * p.lambda0 ** ((p.theta - 3) / 2)


def entropy_time(model: Model, delta_e: float) -> float:
    c, p = model.constants, model.params
    return delta_e**2 * p.lambda0 ** (3 - p.theta) / (4 * c.q_op_norm**2 * math.e * c.K2)


def local_radius(model: Model, alpha: float) -> float:
    """Largest ``||x - y||_{V_theta}`` admitted by the local Harnack inequality."""
    if not alpha > 1:
        raise HarnessError(f"alpha must exceed 1, got {alpha}")
    c, p = model.constants, model.params
    return (alpha - 1) * p.lambda0 ** ((3 - p.theta) / 2) / (4 * alpha * c.q_op_norm * math.sqrt(c.K2))


def basis_directions(model: Model) -> np.ndarray:
    """Real and imaginary unit directions of every half mode, normalized in ``V_theta``.

    Shape ``(2 n_half, n_half, d)``; for d=1, N=4 these are 8 directions.
    """
    sp = model.space
    dirs = []
    for j in range(sp.n_half):
        for imag in (False, True):
            h = sp.basis_direction(j, imag)
            dirs.append(h / sp.norm(h, "V_theta"))
    return np.stack(dirs)


def _upper(r: EstimatorResult, n_sigma: float) -> float:
    return r.mean + n_sigma * r.stderr


def _lower_abs(r: EstimatorResult, n_sigma: float) -> float:
    return max(0.0, abs(r.mean) - n_sigma * r.stderr)


def check_gradient_estimate(
    model: Model,
    x: np.ndarray,
    directions: np.ndarray,
    f: TestFunctional,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    samples: Optional[dict] = None,
    n_sigma: float = N_SIGMA,
) -> list[dict]:
    """``|D_h P_t f(x)|^2 <= P_t f^2(x) * bracket`` for each unit direction ``h``."""
    sp = model.space
    directions = np.asarray(directions, dtype=complex)
    norms = sp.norm(directions, "V_theta")
    if not np.allclose(norms, 1.0, rtol=1e-9, atol=0):
        raise HarnessError("directions must be normalized to ||h||_{V_theta} = 1")
    t = cfg.t_final
    if samples is None:
        samples = bismut_samples(model, x, directions, f, cfg, n_samples, seed, workers)
    bracket = gradient_bound_rhs(float(sp.norm_sq(x, "H")), t, model)
    f2 = EstimatorResult.from_samples(samples["f"] ** 2)
    out = []
    for j in range(directions.shape[0]):
        dh = EstimatorResult.from_samples(samples["f"] * samples["weight"][:, j])
        lhs = _lower_abs(dh, n_sigma) ** 2
        rhs = _upper(f2, n_sigma) * bracket
        out.append(
            _report(
                "gradient", "direction", model, t, n_samples, seed, dh.mean**2, 2 * abs(dh.mean) * dh.stderr, rhs,
                lhs <= rhs, direction=j, d_mean=dh.mean, d_stderr=dh.stderr, lhs_slacked=lhs, bracket=bracket,
            )
        )
    return out


def _entropy(fv: np.ndarray) -> EstimatorResult:
    """``P(f log f) - P f log P f`` with a delta-method standard error."""
    m = fv.mean()
    g = fv * np.log(fv)
    ent = float(g.mean() - m * math.log(m))
    infl = g - (math.log(m) + 1.0) * fv
    se = float(infl.std(ddof=1) / math.sqrt(len(fv)))
    return EstimatorResult(ent, se, len(fv))


def entropy_gradient_check(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    f: TestFunctional,
    delta_e: float,
    variant: str,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    samples: Optional[dict] = None,
    n_sigma: float = N_SIGMA,
) -> dict:
    """Gradient-entropy bound; ``variant`` is ``'local'`` (needs ``delta_e >= threshold``) or ``'global'``."""
    if variant not in ("local", "global"):
        raise HarnessError(f"variant must be 'local' or 'global', got {variant!r}")
    if not delta_e > 0:
        raise HarnessError("delta_e must be positive")
    d0 = entropy_threshold(model)
    if variant == "local" and delta_e < d0 * (1 - 1e-12):
        raise HarnessError(f"delta_e = {delta_e:.6g} is below the local threshold {d0:.6g}")
    sp, c, p = model.space, model.constants, model.params
    t = cfg.t_final
    h = np.asarray(h, dtype=complex)
    if samples is None:
        samples = bismut_samples(model, x, h, f, cfg, n_samples, seed, workers)
    fv = samples["f"]
    if np.min(fv) <= 0:
        raise HarnessError("entropy check needs a strictly positive functional")
    dh = EstimatorResult.from_samples(fv * samples["weight"][:, 0])
    pf = EstimatorResult.from_samples(fv)
    ent = _entropy(fv)
    if ent.mean + n_sigma * ent.stderr < 0:
        raise HarnessError("entropy estimate is negative beyond its slack")
    xsq = float(sp.norm_sq(x, "H"))
    h_scale = float(sp.norm(h, "V_theta"))
    if variant == "local":
        t_eff, k2_gain = t, 1.0
    else:
        t_eff, k2_gain = min(t, entropy_time(model, delta_e)), math.e
    brace = c.K1 / t_eff + 2 * k2_gain * c.K2 / p.lambda0 ** (1 - p.theta) * (xsq + c.q_hs_norm_sq * t)
    # bounds are stated for ||h||_{V_theta} <= 1; scale the right side for other norms
    rhs = h_scale * (delta_e * _upper(ent, n_sigma) + (2 / delta_e) * brace * _upper(pf, n_sigma))
    lhs = _lower_abs(dh, n_sigma)
    return _report(
        "entropy_gradient", variant, model, t, n_samples, seed, abs(dh.mean), dh.stderr, rhs, lhs <= rhs,
        delta_e=delta_e, delta_threshold=d0, entropy=ent.mean, entropy_stderr=ent.stderr, pf=pf.mean,
        lhs_slacked=lhs, t_eff=t_eff,
    )


class _FunctionalKernel:
    def __init__(self, model, x, f, cfg, seed):
        self.model, self.x, self.f, self.cfg, self.seed = model, x, f, cfg, seed

    def __call__(self, idx: range) -> dict:
        sp = self.model.space
        integ = Integrator(sp, self.cfg, self.model.conv)
        xt = integ.run(self.x, NoiseStream(sp, self.cfg, self.seed), idx)
        return {"f": self.f(sp, xt)}


def functional_samples(model, x, f, cfg, n_samples, seed, workers=1) -> np.ndarray:
    kernel = _FunctionalKernel(model, np.asarray(x, dtype=complex), f, cfg, seed)
    return sample_map(kernel, n_samples, workers)["f"]


def harnack_exponent(model: Model, x: np.ndarray, y: np.ndarray, alpha: float, t: float, variant: str) -> float:
    sp, c, p = model.space, model.constants, model.params
    r2 = float(sp.norm_sq(x - y, "V_theta"))
    big = max(float(sp.norm_sq(x, "H")), float(sp.norm_sq(y, "H"))) + c.q_hs_norm_sq * t
    if variant == "local":
        brace = c.K1 / t + 2 * c.K2 / p.lambda0 ** (1 - p.theta) * big
    else:
        cap = 4 * alpha**2 * c.q_op_norm**2 * math.e * c.K2 * r2 / ((alpha - 1) ** 2 * p.lambda0 ** (3 - p.theta))
        brace = c.K1 * max(1 / t, cap) + 2 * c.K2 * math.e / p.lambda0 ** (1 - p.theta) * big
    return 2 * alpha * r2 / (alpha - 1) * brace


def harnack_check(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    alpha: float,
    f: TestFunctional,
    variant: str,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    samples: Optional[tuple] = None,
    n_sigma: float = N_SIGMA,
) -> dict:
    """``(P_t f(x))^alpha <= P_t f^alpha(y) exp(exponent)``, local or global form.

    ``P_t f(x)`` and ``P_t f^alpha(y)`` are estimated from independent runs.
    """
    if variant not in ("local", "global"):
        raise HarnessError(f"variant must be 'local' or 'global', got {variant!r}")
    r0 = local_radius(model, alpha)
    sp = model.space
    x = np.asarray(x, dtype=complex)
    y = np.asarray(y, dtype=complex)
    dist = float(sp.norm(x - y, "V_theta"))
    if variant == "local" and dist > r0 * (1 + 1e-12):
        raise HarnessError(f"outside local radius: ||x-y||_V_theta = {dist:.6g} > r0 = {r0:.6g}")
    if f.lower_bound < 0:
        raise HarnessError("Harnack check needs a nonnegative functional")
    t = cfg.t_final
    if samples is None:
        fx = functional_samples(model, x, f, cfg, n_samples, seed, workers)
        fy = functional_samples(model, y, f, cfg, n_samples, derive_seed(seed, 2), workers)
    else:
        fx, fy = samples
    if min(fx.min(), fy.min()) < 0:
        raise HarnessError("functional took a negative value")
    px = EstimatorResult.from_samples(fx)
    pya = EstimatorResult.from_samples(fy**alpha)
    expo = harnack_exponent(model, x, y, alpha, t, variant)
    lhs = max(0.0, px.mean - n_sigma * px.stderr) ** alpha
    rhs = _upper(pya, n_sigma) * math.exp(expo)
    return _report(
        "harnack", variant, model, t, n_samples, seed, px.mean**alpha, alpha * px.mean ** (alpha - 1) * px.stderr,
        rhs, lhs <= rhs, alpha=alpha, distance=dist, local_radius=r0, exponent=expo, lhs_slacked=lhs,
        pf_alpha_y=pya.mean,
    )


class _EnergyKernel:
    def __init__(self, model, x, cfg, seed):
        self.model, self.x, self.cfg, self.seed = model, x, cfg, seed

    def __call__(self, idx: range) -> dict:
        sp = self.model.space
        integ = Integrator(sp, self.cfg, self.model.conv)
        obs = EnergyObserver(sp, self.cfg.dt, self.cfg.noise_amplitude)
        integ.run(self.x, NoiseStream(sp, self.cfg, self.seed), idx, [obs])
        return {"G": np.broadcast_to(obs.v_integral, (len(idx),)).astype(float)}


def exp_moment_check(
    model: Model,
    x: np.ndarray,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    n_sigma: float = N_SIGMA,
    tail_fraction: float = 0.01,
) -> list[dict]:
    """Exponential moments of ``G = int_0^t ||X_s||_V^2 ds``.

    Hard pass/fail uses the Jensen-weakened form ``exp(c E G) <= RHS``; the
    empirical ``E exp(c G)`` is reported with a heavy-tail flag, not asserted.
    """
    sp, c, p = model.space, model.constants, model.params
    t = cfg.t_final
    x = np.asarray(x, dtype=complex)
    g = sample_map(_EnergyKernel(model, x, cfg, seed), n_samples, workers)["G"]
    gr = EstimatorResult.from_samples(g)
    base = float(sp.norm_sq(x, "H")) + cfg.noise_amplitude**2 * c.q_hs_norm_sq * t
    q2 = c.q_op_norm**2
    forms = {
        "dissipative": (p.lambda0**2 / (2 * q2), p.lambda0**2 / (2 * q2) * base),
        "time_scaled": (2 / (q2 * math.e * t), 2 / (q2 * t) * base),
    }
    out = []
    for variant, (coef, log_rhs) in forms.items():
        lhs_log = coef * (gr.mean + n_sigma * gr.stderr)
        scaled = coef * g
        log_emp = float(logsumexp(scaled) - math.log(len(g)))
        top = np.sort(scaled)[-max(1, int(round(tail_fraction * len(g)))):]
        tail_share = float(math.exp(logsumexp(top) - logsumexp(scaled)))
        out.append(
            _report(
                "exp_moment", variant, model, t, n_samples, seed, math.exp(coef * gr.mean),
                coef * gr.stderr * math.exp(coef * gr.mean), math.exp(log_rhs), lhs_log <= log_rhs,
                log_lhs_slacked=lhs_log, log_rhs=log_rhs, mean_G=gr.mean, stderr_G=gr.stderr,
                log_empirical_exp_moment=log_emp, empirical_within_bound=bool(log_emp <= log_rhs),
                top1pct_share=tail_share, heavy_tail_warning=bool(tail_share > 0.5),
            )
        )
    return out


def csv_row(rec: dict) -> list:
    """Summary row: check, variant, d, N, t, samples, seed, lhs, stderr, rhs, pass."""
    pr = rec["params"]
    return [
        rec["check"], rec["variant"], pr["d"], pr["N"], pr["t"], pr["samples"], rec["seed"],
        rec["lhs_mean"], rec["lhs_stderr"], rec["rhs"], rec["pass"],
    ]


CSV_HEADER = ["check", "variant", "d", "N", "t", "samples", "seed", "lhs", "stderr", "rhs", "pass"]



def inequality_suite(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    f: TestFunctional,
    alpha: float,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    delta_entropy: Optional[float] = None,
) -> list[dict]:
    """All four checks at the standard settings.

    Gradient: every normalized basis direction.  Entropy: local at ``delta0``
    and ``2 delta0`` and global at ``delta0/10`` (or local and global at
    ``delta_entropy`` when given).  Harnack: ``y = x + r h/||h||_{V_theta}``
    with ``r = r0/2`` (local) and ``r = 2 r0`` (global).  Entropy and Harnack
    use the strictly positive ``0.1 + tanh^2`` companion of ``f``.
    """
    sp = model.space
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    h_unit = h / sp.norm(h, "V_theta")
    direction = f.direction if f.direction is not None else h_unit
    fpos = TestFunctional("positive_tanh_sq", direction=direction, gain=f.gain)

    reports = check_gradient_estimate(
        model, x, basis_directions(model), f, cfg, n_samples, derive_seed(seed, 10), workers
    )

    d0 = entropy_threshold(model)
    if delta_entropy is None:
        settings = [(d0, "local"), (2 * d0, "local"), (d0 / 10, "global")]
    else:
        settings = [(delta_entropy, "global")]
        if delta_entropy >= d0:
            settings.insert(0, (delta_entropy, "local"))
    ent_seed = derive_seed(seed, 11)
    ent_samples = bismut_samples(model, x, h_unit, fpos, cfg, n_samples, ent_seed, workers)
    for de, variant in settings:
        reports.append(
            entropy_gradient_check(model, x, h_unit, fpos, de, variant, cfg, n_samples, ent_seed, samples=ent_samples)
        )

    r0 = local_radius(model, alpha)
    for r, variant, tag in ((r0 / 2, "local", 12), (2 * r0, "global", 13)):
        reports.append(
            harnack_check(model, x, x + r * h_unit, alpha, fpos, variant, cfg, n_samples, derive_seed(seed, tag), workers)
        )

    reports.extend(exp_moment_check(model, x, cfg, n_samples, derive_seed(seed, 14), workers))
    return reports
