"""Time stepping for ``dX = Q dW - (L X + B(X)) dt`` on the truncated lattice.

Both schemes treat the stiff linear part implicitly and keep the raw
Brownian increments in the update, so path functionals (energy balance,
derivative weights, change-of-measure densities) can be accumulated from the
very increments that drove the path::

    exponential_euler    X' = e^{-dt L} (X - dt B(X) + Q dW)
    semi_implicit_euler  X' = (I + dt L)^{-1} (X - dt B(X) + Q dW)

Noise is counter-based: the increments of sample ``i`` come from a Philox
stream keyed by ``(seed, i)`` and row ``n`` of that stream is step ``n``, so a
sample's path does not depend on which batch or worker computed it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .nonlinearity import Convection
from .spectral import Constants, SpectralSpace

__all__ = [
    "SCHEMES",
    "IntegratorConfig",
    "DivergenceError",
    "NoiseStream",
    "PathRecord",
    "Integrator",
    "EnergyObserver",
    "energy_identity_residual",
    "energy_residuals_batch",
]

SCHEMES = ("exponential_euler", "semi_implicit_euler")
DIVERGENCE_THRESHOLD = 1e12
_MASK64 = (1 << 64) - 1


class DivergenceError(RuntimeError):
    def __init__(self, sample_index: int, step: int, norm: float):
        super().__init__(
            f"sample {sample_index} diverged at step {step} (||X||_H = {norm:.3g}); reduce the step size"
        )
        self.sample_index = sample_index
        self.step = step
        self.norm = norm


@dataclass(frozen=True)
class IntegratorConfig:
    t_final: float
    n_steps: int
    scheme: str = "exponential_euler"
    nonlinearity: bool = True
    # test mode only: multiplies Q in the noise term (0 switches noise off)
    noise_amplitude: float = 1.0

    def __post_init__(self):
        if not self.t_final > 0:
            raise ValueError(f"t_final must be positive, got {self.t_final}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be an integer >= 1, got {self.n_steps}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps

    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


class NoiseStream:
    """Cylindrical Brownian increments on the truncated space.

    For each half mode ``k`` and step, ``dW_k = (xi + i zeta) sqrt(dt/2) p_k``
    with independent standard normals and ``p_k`` the unit polarization
    (``1`` when d=1, ``k_perp/|k|`` when d=2).  ``dW_{-k}`` is the conjugate.
    """

    def __init__(self, space: SpectralSpace, cfg: IntegratorConfig, seed: int):
        self.space = space
        self.n_steps = cfg.n_steps
        self.dt = cfg.dt
        self.seed = int(seed) & _MASK64

    def generator(self, sample_index: int) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=[self.seed, int(sample_index) & _MASK64]))

    def amplitudes(self, sample_indices: Sequence[int]) -> np.ndarray:
        """Scalar complex amplitudes, shape ``(len(indices), n_steps, n_half)``."""
        out = np.empty((len(sample_indices), self.n_steps, self.space.n_half), dtype=complex)
        scale = np.sqrt(self.dt / 2)
        for row, i in enumerate(sample_indices):
            z = self.generator(i).standard_normal((self.n_steps, self.space.n_half, 2))
            out[row] = scale * (z[..., 0] + 1j * z[..., 1])
        return out

    def increments(self, sample_index: int) -> np.ndarray:
        """Full increments of one sample, shape ``(n_steps, n_half, d)``."""
        return self.amplitudes([sample_index])[0][..., None] * self.space.polarization


@dataclass
class PathRecord:
    """One simulated trajectory with its increments and integrated functionals."""

    times: np.ndarray
    states: np.ndarray
    increments: np.ndarray
    v_integral: float
    stochastic_integral: float
    noise_amplitude: float = 1.0
    sample_index: int = 0
    seed: int = 0

    def __post_init__(self):
        if len(self.states) != len(self.times):
            raise ValueError("states and times must have equal length")

    @property
    def t_final(self) -> float:
        return float(self.times[-1])

    def dump_csv(self, path) -> None:
        """Write ``step, s, mode_index, re, im``; for d=2 ``mode_index = 2*j + component``."""
        d = self.states.shape[-1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "s", "mode_index", "re", "im"])
            for n, (s, x) in enumerate(zip(self.times, self.states)):
                for j in range(x.shape[0]):
                    for c in range(d):
                        w.writerow([n, repr(float(s)), j * d + c if d > 1 else j, repr(x[j, c].real), repr(x[j, c].imag)])


class EnergyObserver:
    """Left-point ``int ||X||_V^2 ds`` and ``2 sum <X_n, Q dW_n>`` for a batch."""

    def __init__(self, space: SpectralSpace, dt: float, amplitude: float = 1.0):
        self.space = space
        self.dt = dt
        self.amplitude = amplitude
        self.v_integral = 0.0
        self.stochastic_integral = 0.0

    def __call__(self, n: int, s: float, x: np.ndarray, dw: np.ndarray) -> None:
        sp = self.space
        self.v_integral = self.v_integral + self.dt * sp.norm_sq(x, "V")
        self.stochastic_integral = self.stochastic_integral + 2.0 * sp.inner(x, self.amplitude * sp.apply_q(dw))


class Integrator:
    def __init__(self, space: SpectralSpace, cfg: IntegratorConfig, convection: Optional[Convection] = None):
        self.space = space
        self.cfg = cfg
        self.conv = convection if convection is not None else Convection(space)
        dt = cfg.dt
        if cfg.scheme == "exponential_euler":
            factor = np.exp(-dt * space.l_eig)
        else:
            factor = 1.0 / (1.0 + dt * space.l_eig)
        self.factor = factor[:, None]
        self.noise_gain = (cfg.noise_amplitude * space.q_eig)[:, None]

    def drift(self, x: np.ndarray) -> np.ndarray:
        if not self.cfg.nonlinearity:
            return np.zeros_like(x)
        return self.conv(x)

    def step(self, x: np.ndarray, dw: np.ndarray, forcing: Optional[np.ndarray] = None) -> np.ndarray:
        """One update; ``forcing`` is an extra drift ``g`` entering as ``+dt*g``.

        The nonlinear term is evaluated at ``x`` (left point).
        """
        dt = self.cfg.dt
        rhs = x - dt * self.drift(x) + self.noise_gain * dw
        if forcing is not None:
            rhs = rhs + dt * forcing
        return self.factor * rhs

    def run(
        self,
        x0: np.ndarray,
        noise: NoiseStream,
        sample_indices: Sequence[int],
        observers: Iterable = (),
        record: bool = False,
    ):
        """Advance a batch of samples from ``x0`` and return the final states.

        ``observers`` are called as ``obs(n, s_n, X_n, dW_n)`` before each step.
        With ``record=True`` the state history ``(n_steps+1, B, n_half, d)`` is
        returned alongside.
        """
        sp = self.space
        observers = list(observers)
        amp = noise.amplitudes(sample_indices)
        pol = sp.polarization
        batch = len(sample_indices)
        x = np.broadcast_to(x0, (batch, sp.n_half, sp.d)).astype(complex)
        history = [x] if record else None
        dt = self.cfg.dt
        for n in range(self.cfg.n_steps):
            dw = amp[:, n, :, None] * pol
            for obs in observers:
                obs(n, n * dt, x, dw)
            x = self.step(x, dw)
            self._guard(x, n + 1, sample_indices)
            if record:
                history.append(x)
        if record:
            return x, np.stack(history)
        return x

    def _guard(self, x: np.ndarray, step: int, sample_indices: Sequence[int]) -> None:
        norms = self.space.norm(x, "H")
        bad = ~(norms <= DIVERGENCE_THRESHOLD)
        if np.any(bad):
            j = int(np.flatnonzero(bad)[0])
            raise DivergenceError(int(sample_indices[j]), step, float(norms[j]))

    def simulate(self, x0: np.ndarray, noise: NoiseStream, sample_index: int = 0) -> PathRecord:
        """Single trajectory with full state history and energy functionals."""
        energy = EnergyObserver(self.space, self.cfg.dt, self.cfg.noise_amplitude)
        _, hist = self.run(x0, noise, [sample_index], [energy], record=True)
        return PathRecord(
            times=self.cfg.times(),
            states=hist[:, 0],
            increments=noise.increments(sample_index),
            v_integral=float(energy.v_integral[0]),
            stochastic_integral=float(energy.stochastic_integral[0]),
            noise_amplitude=self.cfg.noise_amplitude,
            sample_index=sample_index,
            seed=noise.seed,
        )


def energy_identity_residual(path: PathRecord, space: SpectralSpace, constants: Constants) -> float:
    """``||X_t||^2 - ||x0||^2 - [-2 int ||X||_V^2 + ||Q||_HS^2 t + 2 sum <X, Q dW>]``.

    Uses the truncated Hilbert-Schmidt norm scaled by the squared noise
    amplitude, so the noise-free test mode drops the Ito correction.
    """
    e_final = float(space.norm_sq(path.states[-1], "H"))
    e_start = float(space.norm_sq(path.states[0], "H"))
    ito = path.noise_amplitude**2 * constants.q_hs_norm_sq * path.t_final
    return e_final - e_start - (-2.0 * path.v_integral + ito + path.stochastic_integral)


def energy_residuals_batch(
    integrator: Integrator, x0: np.ndarray, noise: NoiseStream, sample_indices: Sequence[int], constants: Constants
) -> np.ndarray:
    """Energy-identity residuals for a batch of independent paths."""
    sp = integrator.space
    cfg = integrator.cfg
    energy = EnergyObserver(sp, cfg.dt, cfg.noise_amplitude)
    xt = integrator.run(x0, noise, sample_indices, [energy])
    ito = cfg.noise_amplitude**2 * constants.q_hs_norm_sq * cfg.t_final
    return sp.norm_sq(xt, "H") - sp.norm_sq(x0, "H") - (-2.0 * energy.v_integral + ito + energy.stochastic_integral)
