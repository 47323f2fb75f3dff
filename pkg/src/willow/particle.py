"""Branching-particle Monte-Carlo oracle with genealogy tracking.

Each particle carries mass epsilon, moves as the plain jump chain, and
branches at rate 2 alpha(type)/epsilon into 0 or 2 offspring with
p2 = (1 - eps beta/(2 alpha))/2.  This calibration reproduces the drift
-beta(x) X and quadratic variation rate 2 alpha(x) X of the quadratic
mechanism, so first moments are exact for every epsilon and distributions
converge as epsilon -> 0 (derivation in the README).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kern
from .errors import BudgetError, ModelError, NumericError
from .model import FiniteMeasure, MultitypeModel
from .spine import TypedPath

_DEF_MAX_TOTAL = 2_000_000


def offspring_probabilities(m: MultitypeModel, epsilon: float) -> np.ndarray:
    """p2 per type; raises if the calibration leaves [0, 1]."""
    p2 = (1.0 - epsilon * m.beta / (2.0 * m.alpha)) / 2.0
    if np.any(p2 < 0) or np.any(p2 > 1):
        bound = 2.0 * m.alpha.min() / max(np.abs(m.beta).max(), 1e-300)
        raise ModelError(
            f"simulate_particles precondition violated: epsilon={epsilon:.4g} "
            f"must be < 2 min(alpha)/max|beta| = {bound:.4g} "
            "(offspring probabilities left [0, 1])")
    return p2


def initial_counts(m: MultitypeModel, nu: FiniteMeasure, epsilon: float) -> np.ndarray:
    return np.ceil(nu.masses / epsilon - 1e-12).astype(np.int64)


@dataclass
class ParticleTrajectory:
    epsilon: float
    origin_counts: np.ndarray          # initial particles per type
    horizon: float
    extinction_time: float             # +inf if alive at the horizon
    snapshot_times: np.ndarray
    snapshots: np.ndarray              # (n, K) masses
    # event log: kind 0=jump(aux=new type), 1=death, 2=split(aux=first child)
    event_times: np.ndarray
    event_pids: np.ndarray
    event_kinds: np.ndarray
    event_aux: np.ndarray
    # per-particle genealogy
    parents: np.ndarray
    birth_times: np.ndarray
    death_times: np.ndarray
    birth_types: np.ndarray
    jump_heads: np.ndarray
    jump_times: np.ndarray
    jump_newtypes: np.ndarray
    jump_next: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_created(self) -> int:
        return len(self.parents)

    def particle_type_at(self, pid: int, t: float) -> int:
        if not (self.birth_times[pid] <= t <= min(self.death_times[pid], self.horizon)):
            raise NumericError(f"particle {pid} not alive at t={t:.6g}")
        ty = int(self.birth_types[pid])
        node = int(self.jump_heads[pid])
        while node >= 0 and self.jump_times[node] <= t:
            ty = int(self.jump_newtypes[node])
            node = int(self.jump_next[node])
        return ty


def simulate_particles(m: MultitypeModel, nu: FiniteMeasure, epsilon: float,
                       T: float, rng_or_seed, *, snapshot_times=None,
                       max_total: int = _DEF_MAX_TOTAL,
                       snapshot_step: float = 0.1) -> ParticleTrajectory:
    """One genealogy-tracked particle run up to T (or extinction)."""
    p2 = offspring_probabilities(m, epsilon)
    n0 = initial_counts(m, nu, epsilon)
    if snapshot_times is None:
        snapshot_times = np.arange(0.0, T + snapshot_step / 2, snapshot_step)
    snapshot_times = np.ascontiguousarray(snapshot_times, dtype=float)
    rb = 2.0 * m.alpha / epsilon
    seed = _as_seed(rng_or_seed)
    n_start = int(n0.sum())
    cap_p = max(4096, 64 * n_start)
    for _ in range(8):
        cap_j, cap_a, cap_e = cap_p, cap_p, 4 * cap_p
        out = kern.run_genealogy_full(m.Q, p2, rb, epsilon, n0, T, seed,
                                      snapshot_times, cap_p, cap_j, cap_a, cap_e)
        if out[0] != kern.BUDGET:
            break
        cap_p *= 4
    status = out[0]
    if status == kern.BUDGET:
        raise NumericError(f"population explosion guard: > {cap_p} particles created")
    (st, hm, ptype, pparent, pbirth, pdeath, pbtype, jhead, jtail,
     jt, jty, jnext, snaps, ev_t, ev_pid, ev_kind, ev_aux) = out
    ext = float(hm) if st == kern.OK else np.inf
    return ParticleTrajectory(
        epsilon=epsilon, origin_counts=n0, horizon=T, extinction_time=ext,
        snapshot_times=snapshot_times, snapshots=snaps,
        event_times=ev_t, event_pids=ev_pid, event_kinds=ev_kind, event_aux=ev_aux,
        parents=pparent, birth_times=pbirth, death_times=pdeath, birth_types=pbtype,
        jump_heads=jhead, jump_times=jt, jump_newtypes=jty, jump_next=jnext,
        meta={"seed": int(seed), "nu": nu.masses.tolist()})


def _as_seed(rng_or_seed) -> np.uint64:
    if isinstance(rng_or_seed, np.random.Generator):
        return np.uint64(rng_or_seed.integers(0, 2**63 - 1, dtype=np.int64))
    return np.uint64(int(rng_or_seed))


def empirical_extinction_time(traj: ParticleTrajectory) -> float:
    """Last death time, +inf sentinel when alive at the horizon, 0 if empty."""
    if traj.n_created == 0:
        return 0.0
    return traj.extinction_time


def extract_last_lineage(traj: ParticleTrajectory) -> TypedPath:
    """Ancestral type path of the particle with maximal death time.

    Requires full extinction before the horizon; ties broken by the
    smallest particle id.
    """
    if not np.isfinite(traj.extinction_time):
        raise NumericError("trajectory not extinct before its horizon")
    if traj.n_created == 0:
        raise NumericError("empty trajectory has no lineage")
    pid = int(np.argmax(traj.death_times))
    chain = []
    a = pid
    while a >= 0:
        chain.append(a)
        a = int(traj.parents[a])
    chain.reverse()
    jt, jy = [], []
    cur = int(traj.birth_types[chain[0]])
    origin = cur
    for a in chain:
        end = float(traj.death_times[a])
        node = int(traj.jump_heads[a])
        while node >= 0:
            t = float(traj.jump_times[node])
            if t >= end:
                break
            ty = int(traj.jump_newtypes[node])
            if ty != cur:
                jt.append(t)
                jy.append(ty)
                cur = ty
            node = int(traj.jump_next[node])
    return TypedPath(origin, 0.0, float(traj.extinction_time),
                     np.array(jt), np.array(jy, dtype=np.int64))


# ------------------------------------------------------------- batch APIs

def batch_extinction_times(m: MultitypeModel, nu: FiniteMeasure, epsilon: float,
                           T: float, seeds: np.ndarray,
                           max_total: int = _DEF_MAX_TOTAL) -> np.ndarray:
    """Extinction times over independent replicates (inf = alive at T)."""
    p2 = offspring_probabilities(m, epsilon)
    n0 = initial_counts(m, nu, epsilon)
    rb = 2.0 * m.alpha / epsilon
    out, status = kern.batch_extinction_times(m.Q, p2, rb, epsilon, n0, T,
                                              np.ascontiguousarray(seeds, dtype=np.uint64),
                                              max_total)
    if np.any(status == kern.EXPLOSION):
        raise NumericError("population explosion guard tripped in a replicate")
    return out


def batch_mass_snapshots(m: MultitypeModel, nu: FiniteMeasure, epsilon: float,
                         T: float, snapshot_times, seeds: np.ndarray, *,
                         weight_vector=None, max_total: int = _DEF_MAX_TOTAL):
    """Masses at fixed times over replicates, plus the exact time integral
    of the weighted mass when a weight vector is supplied.

    Returns (snapshots[reps, n, K], integrals[reps], extinction[reps])."""
    p2 = offspring_probabilities(m, epsilon)
    n0 = initial_counts(m, nu, epsilon)
    rb = 2.0 * m.alpha / epsilon
    w = np.zeros(m.K) if weight_vector is None else np.ascontiguousarray(weight_vector, dtype=float)
    snap = np.ascontiguousarray(snapshot_times, dtype=float)
    status, hmax, snaps, intw = kern.batch_counts(
        m.Q, p2, rb, epsilon, n0, T, snap, w,
        np.ascontiguousarray(seeds, dtype=np.uint64), max_total)
    if np.any(status == kern.EXPLOSION):
        raise NumericError("population explosion guard tripped in a replicate")
    ext = np.where(status == kern.OK, hmax, np.inf)
    return snaps, intw, ext


def batch_last_lineage_types(m: MultitypeModel, nu: FiniteMeasure, epsilon: float,
                             window: tuple[float, float], query_times, seeds, *,
                             cap_particles: int = 500_000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For replicates extinct inside ``window``: last-lineage types at the
    query times.  Returns (accepted mask, extinction times, types)."""
    lo, hi = window
    p2 = offspring_probabilities(m, epsilon)
    n0 = initial_counts(m, nu, epsilon)
    rb = 2.0 * m.alpha / epsilon
    q = np.ascontiguousarray(query_times, dtype=float)
    if np.any(q >= lo):
        raise NumericError("query times must precede the conditioning window")
    accepted, hmax, types, status = kern.batch_last_lineage(
        m.Q, p2, rb, epsilon, n0, lo, hi, q,
        np.ascontiguousarray(seeds, dtype=np.uint64),
        cap_particles, cap_particles, cap_particles)
    if np.any(status == kern.BUDGET):
        raise BudgetError("genealogy capacity exceeded in a replicate; raise cap_particles")
    return accepted.astype(bool), hmax, types
