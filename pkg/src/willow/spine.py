"""Spine laws: exact samplers and deterministic marginals.

Covers the extinction-conditioned spine (inhomogeneous chain driven by the
dv field), the limiting eigenfunction spine, the lineage-of-a-random-sample
spine at a fixed height, the time-reversed spine and its limiting weight.
All samplers are exact in distribution (Ogata thinning, no time binning)
and deterministic given a seeded generator.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .model import MultitypeModel
from .numerics import ScalarField, feynman_kac_field, normalize_field
from .spectral import SpectralData, qprocess_generator

_THINNING_SAFETY = 1.10


@dataclass(frozen=True)
class TypedPath:
    """Cadlag pure-jump path of types on [t_start, t_end]."""

    origin: int
    t_start: float
    t_end: float
    jump_times: np.ndarray
    jump_types: np.ndarray

    def __post_init__(self):
        jt = np.ascontiguousarray(self.jump_times, dtype=float)
        jy = np.ascontiguousarray(self.jump_types, dtype=np.int64)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jump_types", jy)
        if len(jt) != len(jy):
            raise ValueError("jump arrays must have equal length")
        if len(jt):
            if np.any(np.diff(jt) <= 0):
                raise ValueError("jump times must be strictly increasing")
            if jt[0] <= self.t_start or jt[-1] >= self.t_end:
                raise ValueError("jump times must lie strictly inside the interval")
            types = np.concatenate(([self.origin], jy))
            if np.any(types[1:] == types[:-1]):
                raise ValueError("consecutive types must differ")

    def type_at(self, t: float) -> int:
        if t < self.t_start - 1e-12 or t > self.t_end + 1e-12:
            raise NumericError(f"path query at t={t:.6g} outside [{self.t_start:.6g}, {self.t_end:.6g}]")
        i = int(np.searchsorted(self.jump_times, t, side="right"))
        return int(self.origin) if i == 0 else int(self.jump_types[i - 1])

    def segments(self, a: float | None = None, b: float | None = None):
        """(start, end, type) pieces of the path restricted to [a, b]."""
        a = self.t_start if a is None else max(a, self.t_start)
        b = self.t_end if b is None else min(b, self.t_end)
        cur_t, cur_k = a, self.type_at(a)
        for jt, jy in zip(self.jump_times, self.jump_types):
            if jt <= a:
                continue
            if jt >= b:
                break
            yield (cur_t, float(jt), cur_k)
            cur_t, cur_k = float(jt), int(jy)
        if b > cur_t:
            yield (cur_t, b, cur_k)

    def shifted(self, dt: float) -> "TypedPath":
        return TypedPath(self.origin, self.t_start + dt, self.t_end + dt,
                         self.jump_times + dt, self.jump_types)


@dataclass
class RateFunction:
    """Time-dependent jump-rate matrix of an inhomogeneous chain.

    ``matrix(t)`` returns the full KxK generator (diagonal = negative row
    sum); rates are only valid inside [t_lo, t_hi].
    """

    matrix: callable
    t_lo: float
    t_hi: float
    K: int
    meta: dict = field(default_factory=dict)

    def __call__(self, t: float) -> np.ndarray:
        if t < self.t_lo - 1e-12 or t > self.t_hi + 1e-12:
            raise NumericError(f"rate query at t={t:.6g} outside validity window "
                               f"[{self.t_lo:.6g}, {self.t_hi:.6g}]")
        return self.matrix(t)


def spine_rate_matrix(m: MultitypeModel, dv: ScalarField, h: float) -> RateFunction:
    """Rates of the extinction-at-h spine: q_ij * dv_{h-t}(j)/dv_{h-t}(i).

    Positive since dv < 0 componentwise; valid for t in [0, h - t0] where
    t0 is the dv-field cutoff.
    """
    if h > dv.T + 1e-12:
        raise NumericError(f"h={h:.6g} beyond the dv grid horizon {dv.T:.6g}")
    Q = m.Q

    def matrix(t: float) -> np.ndarray:
        w = dv(h - t)
        R = Q * (w[None, :] / w[:, None])
        np.fill_diagonal(R, 0.0)
        np.fill_diagonal(R, -R.sum(axis=1))
        return R

    return RateFunction(matrix, 0.0, h - dv.t0, m.K, meta={"h": h})


def _exit_rate_bound(rate: RateFunction, k: int, a: float, b: float, probes: int = 9) -> float:
    ts = np.linspace(a, b, probes)
    worst = 0.0
    for t in ts:
        R = rate(t)
        worst = max(worst, -float(R[k, k]))
    return worst * _THINNING_SAFETY


def sample_inhomogeneous_chain(rate: RateFunction, x: int, t_end: float,
                               rng: np.random.Generator, *, t_startvalue: float = 0.0,
                               lookahead: float = 0.5) -> TypedPath:
    """Exact thinning simulation of the chain with the given rate function."""
    if t_end > rate.t_hi + 1e-12:
        raise NumericError("t_end outside rate validity window")
    t, k = t_startvalue, int(x)
    jt, jy = [], []
    while t < t_end:
        w_end = min(t + lookahead, t_end)
        bound = _exit_rate_bound(rate, k, t, w_end)
        if bound <= 0.0:
            t = w_end
            continue
        dt = rng.exponential(1.0 / bound)
        if t + dt > w_end:
            t = w_end
            continue
        t = t + dt
        R = rate(t)
        exit_rate = -float(R[k, k])
        ratio = exit_rate / bound
        if ratio > 1.0 + 1e-9:
            raise NumericError(
                f"thinning bound violation at t={t:.6g} (ratio {ratio:.4f}); grid too coarse")
        if rng.random() < ratio:
            p = R[k].copy()
            p[k] = 0.0
            p /= p.sum()
            k_new = int(rng.choice(rate.K, p=p))
            jt.append(t)
            jy.append(k_new)
            k = k_new
    return TypedPath(int(x), t_startvalue, t_end, np.array(jt), np.array(jy, dtype=np.int64))


def sample_spine_h(m: MultitypeModel, v: ScalarField, dv: ScalarField, x: int,
                   h: float, rng: np.random.Generator) -> TypedPath:
    """Spine of the process conditioned to die at h, on [0, h - t0].

    The final t0-sliver below the dv regularization cutoff is truncated;
    callers treating the spine as living on [0, h) should freeze the last
    type across it (below any downstream grid resolution).
    """
    if h <= dv.t0:
        raise NumericError("h must exceed the field cutoff t0")
    rate = spine_rate_matrix(m, dv, h)
    return sample_inhomogeneous_chain(rate, x, h - dv.t0, rng)


def sample_spine_qprocess(m: MultitypeModel, spec: SpectralData, x: int, T: float,
                          rng: np.random.Generator) -> TypedPath:
    """Spine of the process conditioned on remote survival (eigenfunction chain)."""
    if spec.lambda0 < 0:
        import warnings
        warnings.warn("lambda0 < 0: the surviving-spine limit is not guaranteed",
                      stacklevel=2)
    R = qprocess_generator(m, spec)
    t, k = 0.0, int(x)
    jt, jy = [], []
    while True:
        exit_rate = -R[k, k]
        if exit_rate <= 0:
            break
        t = t + rng.exponential(1.0 / exit_rate)
        if t >= T:
            break
        p = R[k].copy()
        p[k] = 0.0
        p /= p.sum()
        k = int(rng.choice(m.K, p=p))
        jt.append(t)
        jy.append(k)
    return TypedPath(int(x), 0.0, T, np.array(jt), np.array(jy, dtype=np.int64))


def spine_marginal(rate: RateFunction, x: int, t_grid) -> np.ndarray:
    """Type-distribution rows p_t solving the forward equation from delta_x."""
    from scipy.integrate import solve_ivp

    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] < rate.t_lo - 1e-12 or t_grid[-1] > rate.t_hi + 1e-12:
        raise NumericError("marginal grid outside rate validity window")
    p0 = np.zeros(rate.K)
    p0[x] = 1.0
    if t_grid[0] > 0:
        t_eval = np.concatenate(([0.0], t_grid))
        drop_first = True
    else:
        t_eval = t_grid
        drop_first = False

    def rhs(t, p):
        return rate(t).T @ p

    sol = solve_ivp(rhs, (0.0, float(t_grid[-1])), p0, method="DOP853",
                    t_eval=t_eval, rtol=1e-11, atol=1e-13)
    if not sol.success:
        raise NumericError(f"forward equation failed: {sol.message}")
    out = sol.y.T
    if drop_first:
        out = out[1:]
    sums = out.sum(axis=1)
    if np.max(np.abs(sums - 1.0)) > 1e-10:
        raise NumericError("marginal mass conservation violated beyond 1e-10")
    return out


def bismut_rate_matrix(m: MultitypeModel, t: float, *, max_step: float = 0.01) -> RateFunction:
    """Rates of the lineage-of-a-random-sample chain at height t.

    Uses the exact time-dependent harmonic transform with
    g(s, y) = E_y[exp(-int_0^{t-s} beta(Y))], precomputed as a field.
    """
    G = feynman_kac_field(m, m.beta, np.ones(m.K), t, max_step=max_step)
    Q = m.Q

    def matrix(s: float) -> np.ndarray:
        g = G(t - s)
        R = Q * (g[None, :] / g[:, None])
        np.fill_diagonal(R, 0.0)
        np.fill_diagonal(R, -R.sum(axis=1))
        return R

    return RateFunction(matrix, 0.0, t, m.K, meta={"t": t})


def sample_bismut_spine(m: MultitypeModel, x: int, t: float, rng: np.random.Generator,
                        *, method: str = "transform", max_trials: int = 100000) -> TypedPath:
    """Ancestral lineage of an individual sampled at random at height t.

    Law: density exp(-int_0^t beta(Y)) / E_x[...] against the plain chain.
    Default is the exact harmonic-transform sampler; ``method="rejection"``
    draws plain chain paths and accepts with the exponential weight (exact
    too, but the envelope degenerates for large t * spread(beta)).
    """
    if t <= 0:
        raise NumericError("t must be positive")
    if method == "transform":
        rate = bismut_rate_matrix(m, t)
        return sample_inhomogeneous_chain(rate, x, t, rng)
    if method != "rejection":
        raise NumericError(f"unknown bismut sampler method '{method}'")
    bmin = float(m.beta.min())
    from .errors import BudgetError
    for trial in range(max_trials):
        path = _sample_plain_chain(m, x, t, rng)
        acc = sum((b - a) * m.beta[k] for a, b, k in path.segments())
        if rng.random() < np.exp(-(acc - bmin * t)):
            return path
    raise BudgetError(
        f"bismut rejection budget exceeded after {max_trials} trials "
        f"(acceptance ~ exp(-{(m.beta.max() - bmin) * t:.3g}))")


def _sample_plain_chain(m: MultitypeModel, x: int, T: float, rng: np.random.Generator) -> TypedPath:
    t, k = 0.0, int(x)
    jt, jy = [], []
    exit_rates = m.exit_rates
    while True:
        r = exit_rates[k]
        if r <= 0:
            break
        t = t + rng.exponential(1.0 / r)
        if t >= T:
            break
        p = m.Q[k].copy()
        p[k] = 0.0
        p /= p.sum()
        k = int(rng.choice(m.K, p=p))
        jt.append(t)
        jy.append(k)
    return TypedPath(int(x), 0.0, T, np.array(jt), np.array(jy, dtype=np.int64))


def reverse_spine(p: TypedPath, h: float) -> TypedPath:
    """View the path backward from its endpoint: time s maps to p(h' + s).

    Pure reindexing onto [-h', 0] where h' = p.t_end; applying it twice
    (with the matching horizon) restores the original path.
    """
    span = p.t_end - p.t_start
    if span > h + 1e-12:
        raise NumericError("path longer than the stated horizon h")
    return p.shifted(-p.t_end)


def backward_weight(m: MultitypeModel, spec: SpectralData, v_phi: ScalarField,
                    dv_phi: ScalarField, p: TypedPath, t: float) -> tuple[float, float]:
    """Unnormalized limiting weight of the time-reversed spine at -t.

    weight = exp(-2 int_{-T}^{-t} alpha phi0 v^{phi0}_{-s}(Y_s) ds) * |dv^{phi0}_t(Y_{-t})|
    with the path given on [-T, 0]; requires lambda0 > 0.  Returns the
    weight and a bound on the error from truncating the integral at -T,
    estimated from the exponential envelope of the v field.
    """
    if spec.lambda0 <= 0:
        raise NumericError("backward weight requires lambda0 > 0")
    if p.t_start > -t:
        raise NumericError("path must extend to the left of -t")
    T = -p.t_start
    aphi = m.alpha * spec.phi0
    acc = 0.0
    for a, b, k in p.segments(p.t_start, -t):
        # v^{phi0} evaluated at -s for s in [a, b]
        acc += 2.0 * aphi[k] * float(v_phi.integral(-b, -a)[k])
    w = float(np.exp(-acc) * abs(dv_phi(t)[p.type_at(-t)]))
    # tail envelope sup_x v^{phi0}(s) <= C4 e^{-lambda0 s} fitted on the grid tail
    nodes = v_phi.grid.nodes
    tail = nodes >= nodes[-1] / 2
    C4 = float(np.max(v_phi.values[tail] * np.exp(spec.lambda0 * nodes[tail][:, None])))
    trunc = 2.0 * float(aphi.max()) * C4 * np.exp(-spec.lambda0 * T) / spec.lambda0
    return w, trunc


def qprocess_stationary(spec: SpectralData) -> np.ndarray:
    return spec.pi.copy()


def phi_field(v: ScalarField, spec: SpectralData) -> ScalarField:
    """v normalized by the eigenfunction (same grid)."""
    return normalize_field(v, spec.phi0, kind="v-phi0")
