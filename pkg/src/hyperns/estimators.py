"""Derivative of the transition semigroup by path weights, and its oracles.

The derivative estimator reuses each path's own Brownian increments::

    D_h P_t f(x) ~ mean f(X_t) * sum_n < Q^{-1} [ e^{-s_n L} h / t
                                              - (t - s_n)/t * Bt(X_{s_n}, e^{-s_n L} h) ], dW_n >

with ``Bt(u, v) = B(u, v) + B(v, u)`` and Ito (left-point) evaluation.  For the
exponential Euler chain this weight is the exact derivative of the discrete
change of measure below, so the estimator is unbiased for the derivative of
the *discrete* semigroup and can be compared with a common-random-number
finite difference of the same chain.

The coupling behind it drives ``Y`` from ``x + eps h`` by the same noise with
the drift ``B(X) + (eps/t) e^{-sL} h``; then ``Y_s - X_s = Z_s :=
eps (t-s)/t e^{-sL} h`` and the two meet at time ``t``.  Reweighting by

    R_t = exp( -sum <Q^{-1} eta_n, dW_n> - 1/2 sum ||Q^{-1} eta_n||^2 dt ),
    eta_n = Bt(X_n, Z_n) + B(Z_n, Z_n) - (eps/t) e^{-s_n L} h

turns ``X_t`` into a sample of the chain started at ``x + eps h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .integrator import Integrator, IntegratorConfig, NoiseStream, PathRecord
from .model import Model
from .montecarlo import EstimatorResult, Timer, derive_seed, sample_map

__all__ = [
    "TestFunctional",
    "BismutObserver",
    "GirsanovObserver",
    "bismut_weight",
    "bismut_samples",
    "estimate_gradient",
    "fd_gradient_crn",
    "fd_samples",
    "coupling_residual",
    "eta_identity_error",
    "girsanov_checks",
    "ou_gradient_oracle",
]

FD_EPSILON = 1e-3
GIRSANOV_EPSILON = 0.05


@dataclass(frozen=True, eq=False)
class TestFunctional:
    """Test function ``f`` on H.

    ``bounded_tanh``: ``tanh(gain <u, direction>)``; ``gaussian_bump``:
    ``exp(-||u||_H^2)``; ``positive_tanh_sq``: ``0.1 + tanh^2(gain <u, direction>)``;
    ``constant``: ``level``; ``linear``: ``<u, direction>`` (unbounded, only
    admitted without the nonlinearity).
    """

    __test__ = False

    kind: str
    direction: Optional[np.ndarray] = None
    gain: float = 1.0
    level: float = 1.0

    KINDS = ("bounded_tanh", "gaussian_bump", "positive_tanh_sq", "constant", "linear")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown functional {self.kind!r}; expected one of {self.KINDS}")
        if self.kind in ("bounded_tanh", "positive_tanh_sq", "linear") and self.direction is None:
            raise ValueError(f"functional {self.kind!r} needs a direction")

    @property
    def bounded(self) -> bool:
        return self.kind != "linear"

    @property
    def lower_bound(self) -> float:
        """Infimum of ``f`` (``-inf`` when unbounded below)."""
        return {"bounded_tanh": -1.0, "gaussian_bump": 0.0, "positive_tanh_sq": 0.1, "constant": self.level}.get(
            self.kind, -np.inf
        )

    def __call__(self, space, u: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian_bump":
            return np.exp(-space.norm_sq(u, "H"))
        if self.kind == "constant":
            return np.full(u.shape[:-2], float(self.level))
        proj = space.inner(u, self.direction)
        if self.kind == "linear":
            return proj
        th = np.tanh(self.gain * proj)
        return th if self.kind == "bounded_tanh" else 0.1 + th**2


def _check_functional(f: TestFunctional, cfg: IntegratorConfig) -> None:
    if not f.bounded and cfg.nonlinearity:
        raise ValueError("the linear functional is unbounded and only admitted with the nonlinearity disabled")


def _check_noise(cfg: IntegratorConfig) -> None:
    if cfg.noise_amplitude == 0:
        raise ValueError("derivative weights need a nondegenerate noise (noise_amplitude != 0)")


class BismutObserver:
    """Accumulates the derivative weight for several directions at once.

    ``hs`` has shape ``(n_dirs, n_half, d)``; ``weight`` ends with shape
    ``(batch, n_dirs)``.
    """

    def __init__(self, model: Model, hs: np.ndarray, cfg: IntegratorConfig):
        self.model = model
        self.hs = np.asarray(hs, dtype=complex)
        self.t = cfg.t_final
        self.nonlinear = cfg.nonlinearity
        self.inv_amp = 1.0 / cfg.noise_amplitude
        self.weight = 0.0

    def integrand(self, s: float, x: np.ndarray) -> np.ndarray:
        """``Q^{-1}[e^{-sL}h/t - (t-s)/t Bt(x, e^{-sL}h)]``, shape ``(batch, n_dirs, n_half, d)``."""
        sp, conv, t = self.model.space, self.model.conv, self.t
        g = sp.semigroup(self.hs, s)
        out = np.broadcast_to(g / t, x.shape[:-2] + g.shape).copy()
        if self.nonlinear and s < t:
            out -= ((t - s) / t) * conv.tilde(x[..., None, :, :], g)
        return self.inv_amp * sp.apply_q_inverse(out)

    def __call__(self, n: int, s: float, x: np.ndarray, dw: np.ndarray) -> None:
        a = self.integrand(s, x)
        self.weight = self.weight + self.model.space.inner(a, dw[..., None, :, :])


def bismut_weight(model: Model, path: PathRecord, h: np.ndarray, nonlinearity: bool = True) -> float:
    """Derivative weight of one recorded path in direction ``h``."""
    t = path.t_final
    m = len(path.increments)
    cfg = IntegratorConfig(t, m, nonlinearity=nonlinearity, noise_amplitude=path.noise_amplitude)
    obs = BismutObserver(model, np.asarray(h)[None], cfg)
    for n in range(m):
        obs(n, float(path.times[n]), path.states[n][None], path.increments[n][None])
    return float(np.asarray(obs.weight)[0, 0])


class _BismutKernel:
    def __init__(self, model, x, hs, f, cfg, seed):
        self.model, self.x, self.hs, self.f, self.cfg, self.seed = model, x, hs, f, cfg, seed

    def __call__(self, idx: range) -> dict:
        integ = Integrator(self.model.space, self.cfg, self.model.conv)
        noise = NoiseStream(self.model.space, self.cfg, self.seed)
        obs = BismutObserver(self.model, self.hs, self.cfg)
        xt = integ.run(self.x, noise, idx, [obs])
        fx = self.f(self.model.space, xt)
        return {"f": fx, "weight": np.asarray(obs.weight).reshape(len(idx), -1)}


def bismut_samples(
    model: Model,
    x: np.ndarray,
    hs: np.ndarray,
    f: TestFunctional,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
) -> dict[str, np.ndarray]:
    """Per-sample ``f(X_t)`` (shape ``(n,)``) and weights (shape ``(n, n_dirs)``)."""
    _check_functional(f, cfg)
    _check_noise(cfg)
    hs = np.asarray(hs, dtype=complex)
    if hs.ndim == 2:
        hs = hs[None]
    kernel = _BismutKernel(model, np.asarray(x, dtype=complex), hs, f, cfg, seed)
    return sample_map(kernel, n_samples, workers)


def estimate_gradient(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    f: TestFunctional,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
) -> EstimatorResult:
    """Monte Carlo estimate of ``D_h P_t f(x)`` from path weights."""
    with Timer() as tm:
        out = bismut_samples(model, x, h, f, cfg, n_samples, seed, workers)
    return EstimatorResult.from_samples(out["f"] * out["weight"][:, 0], tm.elapsed)


class _FDKernel:
    def __init__(self, model, x, h, f, cfg, seed, eps):
        self.model, self.x, self.h, self.f, self.cfg, self.seed, self.eps = model, x, h, f, cfg, seed, eps

    def __call__(self, idx: range) -> dict:
        sp = self.model.space
        integ = Integrator(sp, self.cfg, self.model.conv)
        noise = NoiseStream(sp, self.cfg, self.seed)
        up = integ.run(self.x + self.eps * self.h, noise, idx)
        down = integ.run(self.x - self.eps * self.h, noise, idx)
        return {"fd": (self.f(sp, up) - self.f(sp, down)) / (2 * self.eps), "f_up": self.f(sp, up), "f_down": self.f(sp, down)}


def fd_samples(model, x, h, f, cfg, n_samples, seed, eps=FD_EPSILON, workers=1) -> dict[str, np.ndarray]:
    if not eps > 0:
        raise ValueError("finite-difference step must be positive")
    _check_functional(f, cfg)
    kernel = _FDKernel(model, np.asarray(x, dtype=complex), np.asarray(h, dtype=complex), f, cfg, seed, eps)
    return sample_map(kernel, n_samples, workers)


def fd_gradient_crn(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    f: TestFunctional,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    eps: float = FD_EPSILON,
    workers: int = 1,
) -> EstimatorResult:
    """Central difference with both trajectories driven by the same noise."""
    with Timer() as tm:
        out = fd_samples(model, x, h, f, cfg, n_samples, seed, eps, workers)
    return EstimatorResult.from_samples(out["fd"], tm.elapsed)


def ou_gradient_oracle(model: Model, h: np.ndarray, e: np.ndarray, t: float) -> float:
    """``<e^{-tL} h, e>_H``: the derivative of ``x -> E <X_t^x, e>`` without the nonlinearity."""
    sp = model.space
    return float(sp.inner(sp.semigroup(h, t), e))


def coupling_residual(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    eps: float,
    cfg: IntegratorConfig,
    noise: NoiseStream,
    sample_index: int = 0,
    return_paths: bool = False,
):
    """``max_n ||(Y_n - X_n) - Z_n||_H`` for the coupled pair driven by one noise path.

    ``Y`` starts at ``x + eps h`` and carries the drift
    ``B(X) + (eps/t) e^{-sL} h`` in place of ``B(Y)``; both chains use the
    configured scheme with the extra drift evaluated at the left point.
    """
    sp, integ = model.space, Integrator(model.space, cfg, model.conv)
    t, dt = cfg.t_final, cfg.dt
    h = np.asarray(h, dtype=complex)
    amp = noise.amplitudes([sample_index])[0]
    xs = np.asarray(x, dtype=complex)
    ys = xs + eps * h
    worst = 0.0
    xp, yp = [xs], [ys]
    for n in range(cfg.n_steps + 1):
        s = n * dt
        z = eps * (t - s) / t * sp.semigroup(h, s)
        worst = max(worst, float(sp.norm(ys - xs - z, "H")))
        if n == cfg.n_steps:
            break
        dw = amp[n][:, None] * sp.polarization
        bx = integ.drift(xs)
        common = -dt * bx + integ.noise_gain * dw
        xs = integ.factor * (xs + common)
        ys = integ.factor * (ys + common - dt * (eps / t) * sp.semigroup(h, s))
        if return_paths:
            xp.append(xs)
            yp.append(ys)
    if return_paths:
        return worst, np.stack(xp), np.stack(yp)
    return worst


class GirsanovObserver:
    """Accumulates ``log R_t`` along a batch for one direction ``h`` and step ``eps``."""

    def __init__(self, model: Model, h: np.ndarray, eps: float, cfg: IntegratorConfig):
        self.model = model
        self.h = np.asarray(h, dtype=complex)
        self.eps = eps
        self.t = cfg.t_final
        self.dt = cfg.dt
        self.nonlinear = cfg.nonlinearity
        self.inv_amp = 1.0 / cfg.noise_amplitude
        self.log_r = 0.0

    def eta(self, s: float, x: np.ndarray) -> np.ndarray:
        sp, conv, t, eps = self.model.space, self.model.conv, self.t, self.eps
        g = sp.semigroup(self.h, s)
        out = np.broadcast_to(-(eps / t) * g, x.shape).copy()
        if self.nonlinear:
            z = eps * (t - s) / t * g
            out += conv.tilde(x, z) + conv.bilinear(z, z)
        return out

    def __call__(self, n: int, s: float, x: np.ndarray, dw: np.ndarray) -> None:
        sp = self.model.space
        a = self.inv_amp * sp.apply_q_inverse(self.eta(s, x))
        self.log_r = self.log_r - sp.inner(a, dw) - 0.5 * self.dt * sp.norm_sq(a, "H")


def eta_identity_error(model: Model, path: PathRecord, h: np.ndarray, eps: float, nonlinearity: bool = True) -> float:
    """Largest relative defect of ``eta_s/eps = (t-s)/t Bt(X_s, g) - g/t + eps ((t-s)/t)^2 B(g, g)``.

    ``g = e^{-sL} h``; the check runs over every grid point of the recorded path.
    """
    sp, conv = model.space, model.conv
    t = path.t_final
    m = len(path.increments)
    cfg = IntegratorConfig(t, m, nonlinearity=nonlinearity)
    obs = GirsanovObserver(model, h, eps, cfg)
    worst = 0.0
    for n in range(m):
        s = float(path.times[n])
        x = path.states[n]
        g = sp.semigroup(np.asarray(h, dtype=complex), s)
        lhs = obs.eta(s, x) / eps
        rhs = -g / t
        if nonlinearity:
            w = (t - s) / t
            rhs = rhs + w * conv.tilde(x, g) + eps * w**2 * conv.bilinear(g, g)
        scale = max(float(sp.norm(rhs, "H")), float(sp.norm(lhs, "H")), np.finfo(float).tiny)
        worst = max(worst, float(sp.norm(lhs - rhs, "H")) / scale)
    return worst


class _GirsanovKernel:
    def __init__(self, model, x, h, eps, f, cfg, seed):
        self.model, self.x, self.h, self.eps, self.f, self.cfg, self.seed = model, x, h, eps, f, cfg, seed

    def __call__(self, idx: range) -> dict:
        sp = self.model.space
        integ = Integrator(sp, self.cfg, self.model.conv)
        noise = NoiseStream(sp, self.cfg, self.seed)
        obs = GirsanovObserver(self.model, self.h, self.eps, self.cfg)
        xt = integ.run(self.x, noise, idx, [obs])
        r = np.exp(np.broadcast_to(obs.log_r, (len(idx),)))
        return {"R": r, "f": self.f(sp, xt)}


class _PlainKernel:
    def __init__(self, model, x, f, cfg, seed):
        self.model, self.x, self.f, self.cfg, self.seed = model, x, f, cfg, seed

    def __call__(self, idx: range) -> dict:
        sp = self.model.space
        integ = Integrator(sp, self.cfg, self.model.conv)
        xt = integ.run(self.x, NoiseStream(sp, self.cfg, self.seed), idx)
        return {"f": self.f(sp, xt)}


def girsanov_checks(
    model: Model,
    x: np.ndarray,
    h: np.ndarray,
    eps: float,
    f: TestFunctional,
    cfg: IntegratorConfig,
    n_samples: int,
    seed: int,
    workers: int = 1,
    n_sigma: float = 3.0,
) -> dict:
    """Martingale check ``E R_t = 1`` and the identity ``P_t f(x + eps h) = E[R_t f(X_t^x)]``.

    The right-hand side is estimated from the reweighted paths; the left-hand
    side from an independent run started at ``x + eps h``.
    """
    if not 0 <= eps <= 0.1:
        raise ValueError("girsanov checks require 0 <= eps <= 0.1")
    _check_functional(f, cfg)
    _check_noise(cfg)
    x = np.asarray(x, dtype=complex)
    h = np.asarray(h, dtype=complex)
    with Timer() as tm:
        out = sample_map(_GirsanovKernel(model, x, h, eps, f, cfg, seed), n_samples, workers)
        ref = sample_map(_PlainKernel(model, x + eps * h, f, cfg, derive_seed(seed, 1)), n_samples, workers)
    r = EstimatorResult.from_samples(out["R"])
    rf = EstimatorResult.from_samples(out["R"] * out["f"])
    shifted = EstimatorResult.from_samples(ref["f"])
    martingale_gap = abs(r.mean - 1.0)
    identity_gap = abs(rf.mean - shifted.mean)
    combined = float(np.hypot(rf.stderr, shifted.stderr))
    return {
        "check": "girsanov",
        "eps": eps,
        "n_samples": n_samples,
        "seed": seed,
        "mean_R": r.mean,
        "stderr_R": r.stderr,
        "martingale_gap": martingale_gap,
        "martingale_pass": bool(martingale_gap <= n_sigma * r.stderr),
        "mean_Rf": rf.mean,
        "stderr_Rf": rf.stderr,
        "mean_f_shifted": shifted.mean,
        "stderr_f_shifted": shifted.stderr,
        "identity_gap": identity_gap,
        "identity_pass": bool(identity_gap <= n_sigma * combined),
        "elapsed": tm.elapsed,
    }
