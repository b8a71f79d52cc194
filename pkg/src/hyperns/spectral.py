"""Fourier lattice, field storage, norms and diagonal operators on the torus.

Fields live on the punctured lattice ``{k in Z^d : 0 < |k|_inf <= N}`` and are
stored on a half lattice: one representative per pair ``{k, -k}``, with the
partner coefficient implied by ``u_{-k} = conj(u_k)``.  A field is a complex
array of shape ``(..., n_half, d)``; any leading axes are batch axes, so the
same code serves single fields and Monte Carlo batches.

The half lattice keeps the modes whose first nonzero coordinate is positive,
enumerated in lexicographic order of the coordinates.

Conventions for a field ``u``::

    ||u||_H^2        = sum_k |u_k|^2                       (full lattice)
    ||u||_{V_a}^2    = sum_k (lambda0 |k|^{2(delta+1)})^a |u_k|^2
    ||u||_Q^2        = sum_k |k|^{4 sigma} |u_k|^2

and every full-lattice sum equals twice the corresponding half-lattice sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence, Union

import numpy as np

__all__ = [
    "ParameterError",
    "LatticeMismatchError",
    "LatticeSpec",
    "ModelParams",
    "SpectralSpace",
    "Constants",
    "validate_params",
    "compute_constants",
    "lattice_power_sum",
]

Space = Union[str, tuple]


class ParameterError(ValueError):
    """A model or lattice parameter lies outside its admissible range."""


class LatticeMismatchError(ValueError):
    """Two fields were built on different lattices."""


@dataclass(frozen=True)
class LatticeSpec:
    dimension: int
    cutoff: int

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ParameterError(f"dimension must be 1 or 2, got {self.dimension}")
        if int(self.cutoff) != self.cutoff or self.cutoff < 1:
            raise ParameterError(f"cutoff must be an integer >= 1, got {self.cutoff}")

    @cached_property
    def half_modes(self) -> np.ndarray:
        """Half-lattice modes, shape ``(n_half, d)``, lexicographic order."""
        n, d = self.cutoff, self.dimension
        axis = np.arange(-n, n + 1)
        grid = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1)
        modes = grid.reshape(-1, d)
        keep = []
        for k in modes:
            nz = np.flatnonzero(k)
            if nz.size and k[nz[0]] > 0:
                keep.append(k)
        out = np.array(keep, dtype=np.int64).reshape(-1, d)
        order = np.lexsort(out.T[::-1])
        out = out[order]
        out.setflags(write=False)
        return out

    @cached_property
    def full_modes(self) -> np.ndarray:
        """Full lattice as ``[half, -half]``; index ``j + n_half`` pairs with ``j``."""
        out = np.concatenate([self.half_modes, -self.half_modes])
        out.setflags(write=False)
        return out

    @property
    def n_half(self) -> int:
        return self.half_modes.shape[0]

    def index_of(self, k: Sequence[int]) -> tuple[int, bool]:
        """Return ``(half_index, conjugated)`` locating mode ``k``.

        ``conjugated`` is True when ``k`` is the negative of the stored
        representative, i.e. its coefficient is the conjugate of the stored one.
        """
        k = np.atleast_1d(np.asarray(k, dtype=np.int64))
        if k.shape != (self.dimension,):
            raise ValueError(f"mode {tuple(k)} has wrong dimension")
        hits = np.flatnonzero((self.full_modes == k).all(axis=1))
        if hits.size == 0:
            raise KeyError(f"mode {tuple(k)} is not in the truncated lattice")
        j = int(hits[0])
        return (j, False) if j < self.n_half else (j - self.n_half, True)


@dataclass(frozen=True)
class ModelParams:
    lambda0: float
    delta: float
    sigma: float
    theta: float


def validate_params(p: ModelParams, lat: LatticeSpec) -> ModelParams:
    """Check the admissible ranges and return ``p`` unchanged.

    Requires ``lambda0 > 0``, ``delta > d/2``, ``d/4 < sigma <= delta/2`` and
    ``(2 sigma + 1)/(delta + 1) <= theta <= 1``.
    """
    d = lat.dimension
    if not p.lambda0 > 0:
        raise ParameterError(f"lambda0 must be positive, got {p.lambda0}")
    if not p.delta > d / 2:
        raise ParameterError(f"delta must exceed d/2 = {d / 2}, got {p.delta}")
    if not d / 4 < p.sigma <= p.delta / 2:
        raise ParameterError(
            f"sigma must lie in (d/4, delta/2] = ({d / 4}, {p.delta / 2}], got {p.sigma}"
        )
    theta_min = (2 * p.sigma + 1) / (p.delta + 1)
    # small slack so that a theta computed as (2 sigma + 1)/(delta + 1) is accepted
    if not theta_min - 1e-12 <= p.theta <= 1:
        raise ParameterError(
            f"theta must lie in [(2 sigma+1)/(delta+1), 1] = [{theta_min}, 1], got {p.theta}"
        )
    return p


class SpectralSpace:
    """Operators and norms for one lattice and one parameter set.

    All per-mode eigenvalue arrays have shape ``(n_half,)`` and broadcast
    against fields of shape ``(..., n_half, d)``.
    """

    def __init__(self, lattice: LatticeSpec, params: ModelParams):
        validate_params(params, lattice)
        self.lattice = lattice
        self.params = params
        self.d = lattice.dimension
        self.n_half = lattice.n_half
        k = lattice.half_modes.astype(float)
        self.kvec = k
        self.k2 = np.einsum("ij,ij->i", k, k)
        kabs = np.sqrt(self.k2)
        self.l_eig = params.lambda0 * self.k2 ** (params.delta + 1)
        self.q_eig = self.k2 ** (-params.sigma)
        if self.d == 1:
            self.polarization = np.ones((self.n_half, 1))
        else:
            self.polarization = np.stack([-k[:, 1], k[:, 0]], axis=1) / kabs[:, None]
        # real degrees of freedom of H carried by each {k, -k} pair, per complex unit
        self.polarizations = 1 if self.d == 1 else self.d - 1

    # -- construction -------------------------------------------------------

    def zeros(self, batch: tuple = ()) -> np.ndarray:
        return np.zeros(tuple(batch) + (self.n_half, self.d), dtype=complex)

    def field_from_modes(self, modes: Mapping) -> np.ndarray:
        """Build a field from ``{k: coefficient}``; ``k`` may be either of ``k, -k``.

        Coefficients are scalars (d=1) or length-d vectors.  The result is
        Leray-projected, so non-solenoidal input is silently made solenoidal.
        """
        u = self.zeros()
        for k, val in modes.items():
            j, conj = self.lattice.index_of(k)
            val = np.broadcast_to(np.asarray(val, dtype=complex), (self.d,))
            u[j] += np.conj(val) if conj else val
        return self.project(u)

    def basis_direction(self, index: int, imaginary: bool = False) -> np.ndarray:
        """Unit-coefficient direction at half mode ``index`` along its polarization."""
        u = self.zeros()
        u[index] = (1j if imaginary else 1.0) * self.polarization[index]
        return u

    def random_field(self, rng: np.random.Generator, batch: tuple = (), decay: bool = True) -> np.ndarray:
        """Complex Gaussian coefficients, optionally damped by ``|k|^-(delta+2)``, projected."""
        shape = tuple(batch) + (self.n_half, self.d)
        u = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        if decay:
            u *= (self.k2 ** (-(self.params.delta + 2) / 2))[:, None]
        return self.project(u)

    # -- projections --------------------------------------------------------

    def project(self, u: np.ndarray) -> np.ndarray:
        """Leray projection of a half-lattice field: ``u_k - k (k.u_k)/|k|^2``."""
        if self.d == 1:
            return np.array(u, dtype=complex, copy=True)
        kdotu = np.einsum("...jd,jd->...j", u, self.kvec)
        return u - (kdotu / self.k2)[..., None] * self.kvec

    def leray_project(self, raw: Union[Mapping, np.ndarray]) -> np.ndarray:
        """Project raw Fourier data onto the truncated divergence-free space.

        ``raw`` is either a mapping ``{k: coefficient}`` (may contain ``k=0``),
        or a box array of shape ``(2N+1,)*d + (d,)`` indexed by ``k + N``.  The
        zero mode is discarded.  Input is assumed to satisfy the reality
        pairing; the stored representative of each pair is taken as given.
        """
        if isinstance(raw, Mapping):
            raw = {k: v for k, v in raw.items() if np.any(np.atleast_1d(k) != 0)}
            return self.field_from_modes(raw)
        raw = np.asarray(raw, dtype=complex)
        n = self.lattice.cutoff
        idx = tuple((self.lattice.half_modes + n).T)
        return self.project(raw[idx])

    # -- norms and pairings -------------------------------------------------

    def _weights(self, space: Space) -> np.ndarray:
        p = self.params
        if isinstance(space, tuple):
            name, power = space
        else:
            name, power = space, None
        if name == "H":
            return np.ones(self.n_half)
        if name == "V":
            return self.l_eig
        if name in ("V_theta", "Vtheta"):
            power = p.theta if power is None else power
            return self.l_eig ** power
        if name == "Q":
            return self.k2 ** (2 * p.sigma)
        raise ValueError(f"unknown space {space!r}")

    def norm_sq(self, u: np.ndarray, space: Space = "H") -> np.ndarray:
        """Squared norm over the full lattice; ``space`` is ``'H'``, ``'V'``, ``'Q'``
        or ``('V_theta', a)``."""
        w = self._weights(space)
        return 2.0 * np.einsum("...jd,j->...", np.abs(u) ** 2, w)

    def norm(self, u: np.ndarray, space: Space = "H") -> np.ndarray:
        return np.sqrt(self.norm_sq(u, space))

    def inner(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Real inner product of H: ``sum_k u_k . conj(v_k)`` over the full lattice."""
        return 2.0 * np.einsum("...jd,...jd->...", u, np.conj(v)).real

    # -- diagonal operators -------------------------------------------------

    def semigroup_factor(self, s: float) -> np.ndarray:
        if s < 0:
            raise ValueError("semigroup time must be nonnegative")
        return np.exp(-s * self.l_eig)

    def semigroup(self, u: np.ndarray, s: float) -> np.ndarray:
        """``e^{-sL} u``."""
        return u * self.semigroup_factor(s)[:, None]

    def apply_q(self, u: np.ndarray) -> np.ndarray:
        return u * self.q_eig[:, None]

    def apply_q_inverse(self, u: np.ndarray) -> np.ndarray:
        return u / self.q_eig[:, None]

    def l_power(self, u: np.ndarray, beta: float) -> np.ndarray:
        return u * (self.l_eig ** beta)[:, None]

    def apply_diagonal(self, u: np.ndarray, op: str, arg: float = 0.0) -> np.ndarray:
        """Dispatch on ``op`` in ``{'semigroup', 'Q', 'Q_inverse', 'L_power'}``."""
        if op == "semigroup":
            return self.semigroup(u, arg)
        if op == "Q":
            return self.apply_q(u)
        if op == "Q_inverse":
            return self.apply_q_inverse(u)
        if op == "L_power":
            return self.l_power(u, arg)
        raise ValueError(f"unknown diagonal operator {op!r}")

    def divergence_defect(self, u: np.ndarray) -> np.ndarray:
        """``max_k |k.u_k| / (|k| |u_k|)`` (0 for empty modes)."""
        if self.d == 1:
            return np.zeros(u.shape[:-2])
        kdotu = np.abs(np.einsum("...jd,jd->...j", u, self.kvec))
        scale = np.sqrt(self.k2) * np.linalg.norm(u, axis=-1)
        ratio = np.divide(kdotu, scale, out=np.zeros_like(kdotu), where=scale > 0)
        return ratio.max(axis=-1)


def lattice_power_sum(d: int, p: float, radius: int) -> tuple[float, float]:
    """``sum_{0<|k|_inf<=R} |k|^-p`` and an upper bound on the remaining tail.

    The tail bound uses ``|k| >= |k|_inf = n`` and the shell counts ``2`` (d=1)
    and ``8n`` (d=2), compared against ``int_R^inf``.
    """
    if p <= d:
        raise ParameterError(f"lattice sum of |k|^-{p} diverges in dimension {d}")
    axis = np.arange(-radius, radius + 1, dtype=float)
    grid = np.meshgrid(*([axis] * d), indexing="ij")
    r2 = sum(g**2 for g in grid).ravel()
    r2 = r2[r2 > 0]
    partial = float(np.sum(np.sort(r2 ** (-p / 2))))
    if d == 1:
        tail = 2.0 * radius ** (1 - p) / (p - 1)
    elif d == 2:
        tail = 8.0 * radius ** (2 - p) / (p - 2)
    else:
        raise ParameterError("only d in {1, 2} is supported")
    return partial, tail


@dataclass(frozen=True)
class Constants:
    K1: float
    K2: float
    C_A2: float
    q_op_norm: float
    q_hs_norm_sq: float
    q_hs_norm_sq_infinite: float
    K2_proof: float
    sum_radius: int
    tails: dict = field(default_factory=dict)

    @property
    def K2_assert(self) -> float:
        return max(self.K2, self.K2_proof)

    def as_dict(self) -> dict:
        return {
            "K1": self.K1,
            "K2": self.K2,
            "K2_proof": self.K2_proof,
            "C_A2": self.C_A2,
            "q_op_norm": self.q_op_norm,
            "q_hs_norm_sq": self.q_hs_norm_sq,
            "q_hs_norm_sq_infinite": self.q_hs_norm_sq_infinite,
            "sum_radius": self.sum_radius,
            "tails": dict(self.tails),
        }


def compute_constants(p: ModelParams, lat: LatticeSpec) -> Constants:
    """Constants of the assumption inequalities, with lattice sums rounded up."""
    validate_params(p, lat)
    d = lat.dimension
    radius = max(64, 8 * lat.cutoff)
    p_k2 = 2 * (p.delta + 1) * p.theta
    s_k2, t_k2 = lattice_power_sum(d, p_k2, radius)
    s_c, t_c = lattice_power_sum(d, 2 * p.delta, radius)
    s_q, t_q = lattice_power_sum(d, 4 * p.sigma, radius)
    lam_sum = s_k2 + t_k2
    K2 = 4 ** (2 * p.delta * p.theta + 1) / p.lambda0 ** (2 * p.theta) * lam_sum
    K2_proof = (
        2 * (4 ** ((p.delta + 1) * p.theta - 1) + 4 ** ((p.delta + 1) * p.theta))
        / p.lambda0 ** (2 * p.theta)
        * lam_sum
    )
    space = SpectralSpace(lat, p)
    pol = space.polarizations
    q_hs_trunc = float(2 * pol * np.sum(space.q_eig**2))
    return Constants(
        K1=p.lambda0 ** (-p.theta),
        K2=K2,
        C_A2=(s_c + t_c) / p.lambda0,
        q_op_norm=float(space.q_eig.max()),
        q_hs_norm_sq=q_hs_trunc,
        q_hs_norm_sq_infinite=pol * (s_q + t_q),
        K2_proof=K2_proof,
        sum_radius=radius,
        tails={"K2": t_k2, "C_A2": t_c, "q_hs": t_q},
    )

