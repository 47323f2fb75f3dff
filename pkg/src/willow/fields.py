"""Lazy bundle of the deterministic fields a model's samplers and checks share."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .girsanov import HomogenizationData, homogenize, sigma_field, tilde_model
from .model import MultitypeModel
from .numerics import ScalarField, normalize_field, solve_dv, solve_v
from .spectral import SpectralData, generalized_eigen


@dataclass
class FieldSet:
    """Per-model cache: spectral data, homogenization, v/dv for the model,
    its unit-alpha transform, and the eigenfunction normalizations."""

    model: MultitypeModel
    T: float
    t0: float = 1e-6
    _cache: dict = field(default_factory=dict)

    def _get(self, key, builder):
        if key not in self._cache:
            self._cache[key] = builder()
        return self._cache[key]

    @property
    def spectral(self) -> SpectralData:
        return self._get("spectral", lambda: generalized_eigen(self.model))

    @property
    def homog(self) -> HomogenizationData:
        return self._get("homog", lambda: homogenize(self.model))

    @property
    def tilde(self) -> MultitypeModel:
        return self._get("tilde", lambda: tilde_model(self.model))

    @property
    def v(self) -> ScalarField:
        return self._get("v", lambda: solve_v(self.model, self.T, self.t0))

    @property
    def dv(self) -> ScalarField:
        return self._get("dv", lambda: solve_dv(self.model, self.v))

    @property
    def v_tilde(self) -> ScalarField:
        return self._get("v_tilde", lambda: solve_v(self.tilde, self.T, self.t0))

    @property
    def dv_tilde(self) -> ScalarField:
        return self._get("dv_tilde", lambda: solve_dv(self.tilde, self.v_tilde))

    @property
    def sigma(self) -> ScalarField:
        return self._get("sigma", lambda: sigma_field(self.homog, self.v_tilde))

    @property
    def v_phi(self) -> ScalarField:
        return self._get("v_phi", lambda: normalize_field(self.v, self.spectral.phi0,
                                                          kind="v-phi0"))

    @property
    def dv_phi(self) -> ScalarField:
        return self._get("dv_phi", lambda: normalize_field(self.dv, self.spectral.phi0,
                                                           kind="dv-phi0"))

    def require_horizon(self, T: float) -> None:
        if T > self.T + 1e-9:
            raise ValueError(f"FieldSet horizon {self.T:.6g} too short for T={T:.6g}; "
                             "rebuild with a larger T")

    def v_at(self, t, k: int | None = None):
        vals = self.v(t)
        return vals if k is None else vals[..., k]


def make_fields(m: MultitypeModel, T: float, t0: float = 1e-6) -> FieldSet:
    return FieldSet(m, T, t0)
