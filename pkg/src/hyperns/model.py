from __future__ import annotations

from dataclasses import asdict

from .nonlinearity import Convection
from .spectral import LatticeSpec, ModelParams, SpectralSpace, compute_constants


class Model:
    """Lattice, operators, convection term and constants for one parameter set."""

    def __init__(self, lattice: LatticeSpec, params: ModelParams):
        self.lattice = lattice
        self.params = params
        self.space = SpectralSpace(lattice, params)
        self.conv = Convection(self.space)
        self.constants = compute_constants(params, lattice)

    @classmethod
    def build(cls, dimension: int, cutoff: int, lambda0: float, delta: float, sigma: float, theta: float) -> "Model":
        return cls(LatticeSpec(dimension, cutoff), ModelParams(lambda0, delta, sigma, theta))

    def describe(self) -> dict:
        return {"d": self.lattice.dimension, "N": self.lattice.cutoff, **asdict(self.params)}

    def __repr__(self) -> str:
        return f"Model({self.describe()})"
