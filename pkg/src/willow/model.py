"""Finite-type superprocess models, finite measures, time grids, file I/O.

A model is the triple (Q, beta, alpha) on K types: Q is the jump-rate
generator of the spatial motion (off-diagonal rates, rows summing to 0),
beta the linear branching drift and alpha > 0 the quadratic coefficient.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ModelError

_ROWSUM_TOL = 1e-12


@dataclass(frozen=True)
class MultitypeModel:
    K: int
    Q: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "Q", np.ascontiguousarray(self.Q, dtype=float))
        object.__setattr__(self, "beta", np.ascontiguousarray(self.beta, dtype=float))
        object.__setattr__(self, "alpha", np.ascontiguousarray(self.alpha, dtype=float))
        for arr in (self.Q, self.beta, self.alpha):
            arr.setflags(write=False)

    @property
    def exit_rates(self) -> np.ndarray:
        """Total jump rate out of each type."""
        return -np.diag(self.Q)

    def fingerprint(self) -> str:
        payload = json.dumps(
            {"K": self.K, "Q": self.Q.tolist(), "beta": self.beta.tolist(),
             "alpha": self.alpha.tolist()},
            sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    def as_dict(self) -> dict:
        d = {"K": self.K, "Q": self.Q.tolist(), "beta": self.beta.tolist(),
             "alpha": self.alpha.tolist()}
        if self.name:
            d["name"] = self.name
        return d

    def label(self) -> str:
        return self.name or self.fingerprint()


@dataclass(frozen=True)
class FiniteMeasure:
    masses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "masses", np.ascontiguousarray(self.masses, dtype=float))
        self.masses.setflags(write=False)
        if np.any(self.masses < 0) or not np.all(np.isfinite(self.masses)):
            raise ModelError("finite measure must have finite non-negative masses")

    def pair(self, g: np.ndarray) -> float:
        """Inner product nu(g) = sum_x nu(x) g(x)."""
        return float(self.masses @ np.asarray(g, dtype=float))

    @property
    def total(self) -> float:
        return float(self.masses.sum())

    @staticmethod
    def dirac(K: int, x: int, mass: float = 1.0) -> "FiniteMeasure":
        m = np.zeros(K)
        m[x] = mass
        return FiniteMeasure(m)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time nodes covering [t0, T].

    Spacing near the singular end grows geometrically (ratio bound) and is
    capped by ``max_step`` away from it, so cubic interpolation of 1/t-type
    singular fields stays accurate.
    """

    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        if nodes.ndim != 1 or len(nodes) < 2 or np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing, length >= 2")
        object.__setattr__(self, "nodes", nodes)
        self.nodes.setflags(write=False)

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @staticmethod
    def geometric(t0: float, T: float, max_step: float = 0.04, ratio: float = 0.004) -> "TimeGrid":
        if not (0 < t0 < T):
            raise ValueError("need 0 < t0 < T")
        nodes = [t0]
        t = t0
        while t < T:
            t = min(t + min(max_step, ratio * t), T)
            nodes.append(t)
        return TimeGrid(np.array(nodes))

    @staticmethod
    def uniform(t0: float, T: float, max_step: float = 0.04) -> "TimeGrid":
        n = max(2, int(np.ceil((T - t0) / max_step)) + 1)
        return TimeGrid(np.linspace(t0, T, n))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        return "valid" if self.ok else "; ".join(self.violations)


def _strongly_connected(Q: np.ndarray) -> bool:
    adj = (Q > 0).astype(np.int8)
    np.fill_diagonal(adj, 0)
    n, _ = connected_components(csr_matrix(adj), directed=True, connection="strong")
    return n == 1


def validate_model(m: MultitypeModel) -> ValidationReport:
    """Report every violated admissibility condition (empty report = admissible)."""
    rep = ValidationReport()
    K = m.K
    if K < 1:
        rep.violations.append("K must be a positive integer")
        return rep
    if m.Q.shape != (K, K):
        rep.violations.append(f"Q must be {K}x{K}, got {m.Q.shape}")
        return rep
    if m.beta.shape != (K,):
        rep.violations.append(f"beta must have length {K}")
    if m.alpha.shape != (K,):
        rep.violations.append(f"alpha must have length {K}")
    if rep.violations:
        return rep
    off = m.Q - np.diag(np.diag(m.Q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        rep.violations.append(f"off-diagonal rate Q[{i},{j}] = {m.Q[i, j]} is negative")
    rowsums = m.Q.sum(axis=1)
    for i, s in enumerate(rowsums):
        if abs(s) > _ROWSUM_TOL:
            rep.violations.append(f"row {i} sums to {s:.3g}")
    if np.any(m.alpha <= 0):
        rep.violations.append("alpha must be strictly positive")
    if not np.all(np.isfinite(m.Q)) or not np.all(np.isfinite(m.beta)) or not np.all(np.isfinite(m.alpha)):
        rep.violations.append("all coefficients must be finite")
    if not rep.violations and not _strongly_connected(m.Q):
        rep.violations.append("Q is reducible (jump graph not strongly connected)")
    return rep


def load_model(path) -> MultitypeModel:
    """Load and validate a model from a JSON file (grammar in README)."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ModelError(f"cannot read model file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ModelError(f"parse error in {path} at line {e.lineno}: {e.msg}") from e
    return model_from_dict(raw, origin=str(path))


def model_from_dict(raw: dict, origin: str = "<dict>") -> MultitypeModel:
    if not isinstance(raw, dict):
        raise ModelError(f"{origin}: top level must be an object")
    for fieldname in ("K", "Q", "beta", "alpha"):
        if fieldname not in raw:
            raise ModelError(f"{origin}: missing required field '{fieldname}'")
    try:
        K = int(raw["K"])
        Q = np.array(raw["Q"], dtype=float)
        beta = np.array(raw["beta"], dtype=float)
        alpha = np.array(raw["alpha"], dtype=float)
    except (TypeError, ValueError) as e:
        raise ModelError(f"{origin}: malformed numeric field: {e}") from e
    m = MultitypeModel(K=K, Q=Q, beta=beta, alpha=alpha, name=raw.get("name"))
    rep = validate_model(m)
    if not rep.ok:
        raise ModelError(f"{origin}: invalid model: {rep}")
    return m


def save_model(m: MultitypeModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(m.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def reference_model(name: str) -> MultitypeModel:
    """Built-in reference models used throughout the verification battery."""
    key = name.lower().replace("_", "").replace("-", "")
    if key in ("m1", "ref1type", "refhomogeneous"):
        return MultitypeModel(1, np.zeros((1, 1)), np.array([1.0]), np.array([1.0]), name="m1")
    if key in ("m2", "ref2type"):
        return MultitypeModel(2, np.array([[-1.0, 1.0], [1.0, -1.0]]),
                              np.array([0.2, 0.8]), np.array([1.0, 2.0]), name="m2")
    if key in ("m3", "ref2typecritical"):
        return MultitypeModel(2, np.array([[-1.0, 1.0], [1.0, -1.0]]),
                              np.array([0.0, 0.0]), np.array([1.0, 2.0]), name="m3")
    raise ModelError(f"unknown reference model '{name}' (known: m1/ref1type, m2/ref2type, m3/ref2type-critical)")
