"""Perron-Frobenius eigendata of Diag(beta) - Q.

The generalized eigenvalue lambda0 is the (real, simple) eigenvalue of
A = Diag(beta) - Q carrying a strictly positive right eigenvector; for
these Metzler-negated matrices it is the eigenvalue of minimal real part.
Positivity of the refined eigenvector certifies the root independently of
any ordering of the dense spectrum.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .model import MultitypeModel, validate_model


@dataclass(frozen=True)
class SpectralData:
    lambda0: float
    phi0: np.ndarray         # right eigenvector, > 0, sup-norm 1
    phi0_tilde: np.ndarray   # left eigenvector, > 0, product-normalized
    pi: np.ndarray           # stationary law of the phi0-spine
    gap: float               # distance to the next eigenvalue's real part
    meta: dict = field(default_factory=dict)

    def residuals(self, m: MultitypeModel) -> tuple[float, float]:
        A = np.diag(m.beta) - m.Q
        r_right = np.max(np.abs(A @ self.phi0 - self.lambda0 * self.phi0))
        r_left = np.max(np.abs(self.phi0_tilde @ A - self.lambda0 * self.phi0_tilde))
        return float(r_right), float(r_left)


def _refine(A: np.ndarray, lam: float, vec: np.ndarray, iters: int = 40) -> tuple[float, np.ndarray]:
    """Shifted inverse power iteration with Rayleigh updates."""
    n = A.shape[0]
    v = vec / np.linalg.norm(vec)
    shift = lam
    scale = max(1.0, np.abs(A).max())
    for _ in range(iters):
        B = A - shift * np.eye(n)
        try:
            w = np.linalg.solve(B, v)
        except np.linalg.LinAlgError:
            # shift landed on the eigenvalue: nudge off and retry once
            B = A - (shift + 1e-13 * scale) * np.eye(n)
            w = np.linalg.solve(B, v)
        w /= np.linalg.norm(w)
        lam_new = float(w @ A @ w / (w @ w))
        v = w
        res = np.max(np.abs(A @ v - lam_new * v))
        shift = lam_new
        if res < 1e-13 * scale:
            break
    return shift, v


def generalized_eigen(m: MultitypeModel) -> SpectralData:
    """Eigenvalue/eigenvector data of Diag(beta) - Q with the willow
    normalization: phi0 > 0 with max entry 1, phi0_tilde > 0 scaled so
    sum phi0 * phi0_tilde = 1 (product criticality); pi = phi0 * phi0_tilde.
    """
    rep = validate_model(m)
    if not rep.ok:
        raise NumericError(f"inadmissible model: {rep}")
    A = np.diag(m.beta) - m.Q
    scale = max(1.0, np.abs(A).max())
    if m.K == 1:
        lam = float(A[0, 0])
        phi0 = np.array([1.0])
        phi0t = np.array([1.0])
        return SpectralData(lam, phi0, phi0t, np.array([1.0]), np.inf,
                            meta={"normalization": "max(phi0)=1, sum(phi0*phi0_tilde)=1"})
    eigvals = np.linalg.eigvals(A)
    order = np.argsort(eigvals.real)
    lam0 = eigvals[order[0]]
    gap = float(eigvals[order[1]].real - lam0.real)
    if abs(lam0.imag) > 1e-9 * scale or gap < 1e-10 * scale:
        raise NumericError(
            f"Perron root numerically degenerate (lambda={lam0:.6g}, gap={gap:.3g})")
    # dense-seeded refinement to 1e-13-level residuals
    seed = np.ones(m.K)
    lam_r, phi0 = _refine(A, float(lam0.real), seed)
    lam_l, phi0t = _refine(A.T, lam_r, seed)
    if abs(lam_l - lam_r) > 1e-9 * scale:
        raise NumericError("left/right eigenvalues disagree; degenerate spectrum")
    lam = 0.5 * (lam_r + lam_l)
    if phi0[np.argmax(np.abs(phi0))] < 0:
        phi0 = -phi0
    if phi0t[np.argmax(np.abs(phi0t))] < 0:
        phi0t = -phi0t
    if np.any(phi0 <= 0) or np.any(phi0t <= 0):
        raise NumericError("Perron eigenvector not strictly positive; model may be reducible")
    phi0 = phi0 / phi0.max()
    phi0t = phi0t / float(phi0 @ phi0t)
    pi = phi0 * phi0t
    return SpectralData(float(lam), phi0, phi0t, pi, gap,
                        meta={"normalization": "max(phi0)=1, sum(phi0*phi0_tilde)=1",
                              "sign": "phi0[0] > 0"})


def qprocess_generator(m: MultitypeModel, spec: SpectralData) -> np.ndarray:
    """Rate matrix of the phi0-spine chain: q_ij phi0(j)/phi0(i), rows sum 0."""
    R = m.Q * (spec.phi0[None, :] / spec.phi0[:, None])
    np.fill_diagonal(R, 0.0)
    np.fill_diagonal(R, -R.sum(axis=1))
    return R
