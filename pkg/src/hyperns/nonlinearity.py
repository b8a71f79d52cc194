"""Galerkin-truncated convection term and runtime checks of its structural bounds.

The bilinear form is evaluated by direct convolution over the truncated lattice::

    B(u, v)_l = i * sum_{m, l-m in lattice} (u_{l-m} . m) v_m ,   |l|_inf <= N

followed by the Leray projection.  Output modes outside the lattice are
dropped.  The triad index lists are built once per lattice, so a product costs
one gather, one elementwise product and one small matrix multiply, for any
number of leading batch axes.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .spectral import Constants, LatticeMismatchError, SpectralSpace

__all__ = ["Convection", "AssumptionViolation", "check_assumptions"]


class AssumptionViolation(AssertionError):
    """A structural inequality failed on a sampled pair of fields.

    Since the inequalities are theorems for this model, a violation means an
    implementation defect.  ``witness`` holds the offending pair as nested
    ``[re, im]`` lists.
    """

    def __init__(self, inequality: str, ratio: float, witness: dict):
        super().__init__(f"{inequality} violated: ratio {ratio:.6g} (witness attached)")
        self.inequality = inequality
        self.ratio = ratio
        self.witness = witness


def _serialize(u: np.ndarray) -> list:
    return np.stack([u.real, u.imag], axis=-1).tolist()


class Convection:
    """``B`` and its symmetrization on one lattice."""

    def __init__(self, space: SpectralSpace):
        self.space = space
        lat = space.lattice
        full = lat.full_modes
        lookup = {tuple(k): j for j, k in enumerate(full)}
        out, m_idx, lm_idx = [], [], []
        for a, l in enumerate(lat.half_modes):
            for b, m in enumerate(full):
                j = lookup.get(tuple(l - m))
                if j is not None:
                    out.append(a)
                    m_idx.append(b)
                    lm_idx.append(j)
        self.m_idx = np.array(m_idx, dtype=np.intp)
        self.lm_idx = np.array(lm_idx, dtype=np.intp)
        self.mvec = full[self.m_idx].astype(float)
        # triads are grouped by output mode, so the scatter is a segmented sum
        counts = np.bincount(np.array(out, dtype=np.intp), minlength=lat.n_half)
        self._rows = np.flatnonzero(counts)
        self._starts = np.concatenate([[0], np.cumsum(counts)[:-1]])[self._rows]

    def _full(self, u: np.ndarray) -> np.ndarray:
        return np.concatenate([u, np.conj(u)], axis=-2)

    def _check(self, u: np.ndarray) -> None:
        if u.shape[-2:] != (self.space.n_half, self.space.d):
            raise LatticeMismatchError(
                f"field of shape {u.shape[-2:]} does not live on lattice "
                f"(n_half={self.space.n_half}, d={self.space.d})"
            )

    def bilinear(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``B(u, v)`` with Galerkin truncation and Leray projection."""
        self._check(u)
        self._check(v)
        uf = np.take(self._full(u), self.lm_idx, axis=-2)
        vf = np.take(self._full(v), self.m_idx, axis=-2)
        dot = uf[..., 0] * self.mvec[:, 0]
        for c in range(1, self.space.d):
            dot = dot + uf[..., c] * self.mvec[:, c]
        out = np.zeros(np.broadcast_shapes(u.shape, v.shape), dtype=complex)
        if self._rows.size:
            out[..., self._rows, :] = 1j * np.add.reduceat(dot[..., None] * vf, self._starts, axis=-2)
        return self.space.project(out)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.bilinear(u, u)

    def tilde(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """``B(u, v) + B(v, u)``."""
        return self.bilinear(u, v) + self.bilinear(v, u)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def check_assumptions(
    space: SpectralSpace,
    constants: Constants,
    n_samples: int = 1000,
    rng_seed: int = 0,
    skew_tol: float = 1e-10,
) -> list[dict]:
    """Sample field pairs and test the four structural inequalities.

    Each of ``n_samples`` pairs is drawn with the decaying envelope and again
    without it.  Returns one record per inequality with the worst observed
    ratio (left side over right side; the skew-symmetry record compares
    against ``skew_tol`` instead of 1).  Raises :class:`AssumptionViolation`
    on the first failure.
    """
    conv = Convection(space)
    rng = np.random.default_rng(rng_seed)
    c = constants
    worst: dict[str, float] = {"A0": 0.0, "A1": 0.0, "A2": 0.0, "A3": 0.0, "A3_theorem_K2": 0.0, "A3_proof_K2": 0.0}
    for decay in (True, False):
        u = space.random_field(rng, (n_samples,), decay=decay)
        v = space.random_field(rng, (n_samples,), decay=decay)
        buv = conv.bilinear(u, v)
        bvv = conv.bilinear(v, v)
        h_u, h_v = space.norm_sq(u, "H"), space.norm_sq(v, "H")
        vv = space.norm_sq(v, "V")
        th_u, th_v = space.norm_sq(u, "V_theta"), space.norm_sq(v, "V_theta")
        checks = {
            "A0": (_ratio(space.norm_sq(u, "Q"), c.K1 * th_u), 1.0),
            "A1": (_ratio(np.abs(space.inner(v, bvv)), np.sqrt(h_v) * vv), skew_tol),
            "A2": (_ratio(space.norm_sq(buv, "H"), c.C_A2 * h_u * vv), 1.0),
            "A3": (_ratio(space.norm_sq(buv, "Q"), c.K2_assert * th_u * th_v), 1.0),
        }
        q_buv = space.norm_sq(buv, "Q")
        worst["A3_theorem_K2"] = max(worst["A3_theorem_K2"], float(_ratio(q_buv, c.K2 * th_u * th_v).max()))
        worst["A3_proof_K2"] = max(worst["A3_proof_K2"], float(_ratio(q_buv, c.K2_proof * th_u * th_v).max()))
        for name, (ratios, limit) in checks.items():
            j = int(np.argmax(ratios))
            worst[name] = max(worst[name], float(ratios[j]))
            if ratios[j] > limit:
                raise AssumptionViolation(
                    name, float(ratios[j]), {"u": _serialize(u[j]), "v": _serialize(v[j]), "decay": decay}
                )
    params = {"d": space.d, "N": space.lattice.cutoff, **asdict(space.params)}
    limits = {"A1": skew_tol}
    return [
        {
            "inequality": name,
            "worst_ratio": ratio,
            "limit": limits.get(name, 1.0),
            "n_samples": n_samples,
            "seed": rng_seed,
            "params": params,
        }
        for name, ratio in worst.items()
    ]


def report_json(records: list[dict]) -> str:
    return "\n".join(json.dumps(r, sort_keys=True) for r in records)
