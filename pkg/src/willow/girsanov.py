"""h-transform to the unit-quadratic superprocess, homogenization constants,
the Sigma comparison field, and the Girsanov / spine martingale weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .model import MultitypeModel
from .numerics import ScalarField, dv0_closed, v0_closed


@dataclass(frozen=True)
class HomogenizationData:
    L_tilde: np.ndarray    # generator of the transformed motion
    beta_tilde: np.ndarray
    beta0: float           # homogeneous drift dominating beta_tilde
    q: np.ndarray          # (beta0 - beta_tilde)/2 >= 0
    varphi: np.ndarray     # killing rate in the Girsanov weight, >= 0
    meta: dict = field(default_factory=dict)


def h_transform(m: MultitypeModel) -> tuple[np.ndarray, np.ndarray]:
    """Generator and drift of the 1/alpha-weighted superprocess.

    The weighted process is again a superprocess, with unit quadratic
    coefficient, jump rates alpha(i) q_ij / alpha(j) and drift
    beta - alpha * Q(1/alpha).
    """
    a = m.alpha
    L = m.Q * (a[:, None] / a[None, :])
    np.fill_diagonal(L, 0.0)
    np.fill_diagonal(L, -L.sum(axis=1))
    beta_tilde = m.beta - a * (m.Q @ (1.0 / a))
    return L, beta_tilde


def tilde_model(m: MultitypeModel) -> MultitypeModel:
    """The transformed model as a first-class (L~, beta~, 1) model."""
    L, bt = h_transform(m)
    return MultitypeModel(m.K, L, bt, np.ones(m.K),
                          name=(m.name + "-tilde") if m.name else None)


def homogenize(m: MultitypeModel) -> HomogenizationData:
    L, bt = h_transform(m)
    disc = bt * bt - 2.0 * (L @ bt)
    beta0 = float(np.max(np.maximum(bt, np.sqrt(np.maximum(disc, 0.0)))))
    q = (beta0 - bt) / 2.0
    varphi = (beta0 * beta0 - bt * bt + 2.0 * (L @ bt)) / 4.0
    # same quantity through the branching-mechanism route; exact algebra
    check = q * q + bt * q - L @ q
    if np.max(np.abs(varphi - check)) > 1e-10 * max(1.0, beta0 * beta0):
        raise NumericError("homogenization self-check failed")
    if varphi.min() < -1e-10:
        raise NumericError(f"varphi must be non-negative, got {varphi.min():.3g}")
    varphi = np.maximum(varphi, 0.0)
    if q.min() < -1e-12:
        raise NumericError("q must be non-negative")
    q = np.maximum(q, 0.0)
    return HomogenizationData(L, bt, beta0, q, varphi)


def sigma_field(hd: HomogenizationData, v_tilde: ScalarField) -> ScalarField:
    """Sigma_t(x) = 2 (v0_t + q(x) - v~_t(x)) on the v~ grid.

    Requires v_tilde computed for the transformed model (unit alpha).
    Satisfies 0 <= Sigma <= 2q up to integration tolerance.
    """
    t = v_tilde.grid.nodes
    v0 = v0_closed(hd.beta0, t)[:, None]
    dv0 = dv0_closed(hd.beta0, t)[:, None]
    values = 2.0 * (v0 + hd.q[None, :] - v_tilde.values)
    derivs = 2.0 * (dv0 - v_tilde.derivs)
    return ScalarField(v_tilde.grid, values, derivs,
                       meta={"kind": "sigma", "beta0": hd.beta0})


def girsanov_weight(measure_path, hd: HomogenizationData, t: float) -> float:
    """M_t = exp(X_0(q) - X_t(q) - int_0^t X_s(varphi) ds) along a measure path.

    The path must be sampled under the transformed (unit-alpha) law.  The
    time integral uses the exact event-level accumulator when the path
    carries one (particle runs record it), otherwise the trapezoid rule on
    the snapshot grid.
    """
    times = measure_path.times
    if t > times[-1] + 1e-12:
        raise NumericError(f"measure path ends at {times[-1]:.6g} < t={t:.6g}")
    masses = measure_path.masses
    i = int(np.searchsorted(times, t - 1e-12))
    i = min(i, len(times) - 1)
    x0q = float(masses[0] @ hd.q)
    xtq = float(masses[i] @ hd.q)
    acc = measure_path.meta.get("integral_weights")
    if acc is not None and np.allclose(acc, hd.varphi, rtol=0, atol=0):
        integrals = measure_path.meta["integral_values"]
        int_phi = float(np.interp(t, times, integrals))
    else:
        xphi = masses[: i + 1] @ hd.varphi
        int_phi = float(np.trapezoid(xphi, times[: i + 1]))
    return float(np.exp(x0q - xtq - int_phi))


def spine_weight(path, m: MultitypeModel, v: ScalarField, dv: ScalarField,
                 h: float, t: float) -> float:
    """Spine martingale weight at time t for the extinction-at-h transform.

    M_t = dv_{h-t}(Y_t)/dv_h(Y_0) * exp(-int_0^t (beta + 2 alpha v_{h-s})(Y_s) ds),
    the integral taken exactly along the pure-jump path (piecewise constant
    type, field integrated with its interpolation contract).
    """
    if t >= h:
        raise NumericError("need t < h")
    if t < 0 or path.t_end < t - 1e-12:
        raise NumericError("path too short for requested t")
    acc = 0.0
    for a, b, k in path.segments(0.0, t):
        acc += m.beta[k] * (b - a)
        acc += 2.0 * m.alpha[k] * float(v.integral(h - b, h - a)[k])
    num = float(dv(h - t)[path.type_at(t)])
    den = float(dv(h)[path.origin])
    return num / den * float(np.exp(-acc))
