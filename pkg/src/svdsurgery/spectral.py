"""SVD with canonical signs, singular-value drift, subspace angles, alignment.

Tolerance constants used across the toolkit live here:

==============================  =======  ==========================================
constant                        value    meaning
==============================  =======  ==========================================
ORTHONORMALITY_BUILD_TOL        1e-10    guaranteed on bases this module constructs
ORTHONORMALITY_INPUT_TOL        1e-8     accepted on caller-supplied bases
RECONSTRUCTION_RTOL             1e-10    ||U diag(s) V^T - W||_F <= tol*(1+||W||_F)
DEGENERATE_GAP_RATIO            1e-6     gap below this fraction of sigma_1 flags an
                                         ill-conditioned subspace boundary
==============================  =======  ==========================================
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError

ORTHONORMALITY_BUILD_TOL = 1e-10
ORTHONORMALITY_INPUT_TOL = 1e-8
RECONSTRUCTION_RTOL = 1e-10
DEGENERATE_GAP_RATIO = 1e-6


def ensure_matrix(w: np.ndarray, what: str = "matrix") -> np.ndarray:
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{what} must be 2-D, got ndim={arr.ndim}")
    if arr.size == 0:
        raise ValidationError(f"{what} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains non-finite entries")
    return arr


@dataclass
class SvdTriple:
    """Thin SVD with descending singular values and canonical column signs.

    In each column of `u` the entry of largest magnitude is positive (ties
    broken by lowest row index); the matching column of `v` is flipped
    jointly so the reconstruction is unchanged.
    """

    u: np.ndarray  # (m, r)
    sigma: np.ndarray  # (r,) descending, non-negative
    v: np.ndarray  # (n, r)

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.u.shape[0], self.v.shape[0])


def sign_canonicalize(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip column pairs so each u-column's largest-magnitude entry is positive."""
    pivot = np.argmax(np.abs(u), axis=0)  # argmax returns lowest index on ties
    signs = np.sign(u[pivot, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, v * signs


def svd(w: np.ndarray) -> SvdTriple:
    """Thin SVD of `w`, canonicalized; deterministic for identical input."""
    arr = ensure_matrix(w)
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    u, v = sign_canonicalize(u, vt.T)
    return SvdTriple(u=u, sigma=s, v=v)


def reconstruct(t: SvdTriple, keep=None) -> np.ndarray:
    """Sum of sigma_i * u_i v_i^T over the kept rank indices (all by default)."""
    if keep is None:
        idx = np.arange(t.rank)
    else:
        idx = np.unique(np.asarray(list(keep), dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= t.rank):
            raise ValidationError(f"rank indices out of bounds for rank {t.rank}")
    if idx.size == 0:
        return np.zeros(t.shape)
    return (t.u[:, idx] * t.sigma[idx]) @ t.v[:, idx].T


# ---------------------------------------------------------------------------
# singular-value drift


@dataclass
class DeltaSpectrum:
    """Per-rank singular-value differences sigma(B) - sigma(A)."""

    sigma_a: np.ndarray
    sigma_b: np.ndarray
    delta: np.ndarray

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.delta)))

    @property
    def mean(self) -> float:
        return float(np.mean(self.delta))

    @property
    def rel_drift(self) -> float:
        """max |delta| relative to the leading singular value of A."""
        top = float(self.sigma_a[0])
        if top == 0.0:
            return 0.0 if self.max_abs == 0.0 else float("inf")
        return self.max_abs / top


def delta_sigma(a: np.ndarray, b: np.ndarray) -> DeltaSpectrum:
    a = ensure_matrix(a, "A")
    b = ensure_matrix(b, "B")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    sa = svd(a).sigma
    sb = svd(b).sigma
    return DeltaSpectrum(sigma_a=sa, sigma_b=sb, delta=sb - sa)


# ---------------------------------------------------------------------------
# principal angles between subspaces


@dataclass
class AngleSpectrum:
    """Canonical angles between two subspaces spanned by orthonormal columns.

    `cosines` descend, `angles_rad` ascend; angles near zero are evaluated
    through the orthogonal-complement residual, which stays accurate where
    arccos of a near-unit cosine loses half the working digits.
    """

    cosines: np.ndarray  # descending, in [0, 1]
    angles_rad: np.ndarray  # ascending, in [0, pi/2]
    side: str  # "left" or "right"
    rank: int

    @property
    def angles_deg(self) -> np.ndarray:
        return np.degrees(self.angles_rad)

    @property
    def max_rad(self) -> float:
        return float(self.angles_rad[-1])

    @property
    def min_rad(self) -> float:
        return float(self.angles_rad[0])


def _check_orthonormal(q: np.ndarray, what: str) -> np.ndarray:
    q = ensure_matrix(q, what)
    gram = q.T @ q
    err = np.linalg.norm(gram - np.eye(q.shape[1]))
    if err > ORTHONORMALITY_INPUT_TOL:
        raise ValidationError(
            f"{what} columns are not orthonormal (||Q^T Q - I||_F = {err:.3e})"
        )
    return q


def principal_angles(ua: np.ndarray, ub: np.ndarray, side: str = "left") -> AngleSpectrum:
    """Canonical angles from the SVD of the cross-Gram ua^T ub.

    Cosines are clamped to [-1, 1] and folded to [0, 1] before arccos.
    Angles with cosine^2 >= 1/2 are recomputed as arcsin of the singular
    values of (I - ua ua^T) ub, paired in ascending order.
    """
    ua = _check_orthonormal(ua, "first basis")
    ub = _check_orthonormal(ub, "second basis")
    if ua.shape != ub.shape:
        raise ValidationError(f"basis shape mismatch: {ua.shape} vs {ub.shape}")

    gram = ua.T @ ub
    cosines = np.abs(np.clip(np.linalg.svd(gram, compute_uv=False), -1.0, 1.0))
    angles = np.arccos(cosines)

    small = cosines**2 >= 0.5
    if np.any(small):
        resid = ub - ua @ gram
        sines = np.clip(np.linalg.svd(resid, compute_uv=False), -1.0, 1.0)[::-1]
        angles[small] = np.arcsin(sines[small])

    return AngleSpectrum(cosines=cosines, angles_rad=angles, side=side, rank=ua.shape[1])


def matrix_angles(a: np.ndarray, b: np.ndarray) -> tuple[AngleSpectrum, AngleSpectrum]:
    """Left and right singular-subspace angles between two same-shape matrices."""
    a = ensure_matrix(a, "A")
    b = ensure_matrix(b, "B")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    ta, tb = svd(a), svd(b)
    left = principal_angles(ta.u, tb.u, side="left")
    right = principal_angles(ta.v, tb.v, side="right")
    return left, right


# ---------------------------------------------------------------------------
# orthogonal alignment


def procrustes(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||A R - B||_F, from the SVD of A^T B."""
    a = ensure_matrix(a, "A")
    b = ensure_matrix(b, "B")
    if a.shape != b.shape:
        raise ValidationError(f"shape mismatch: {a.shape} vs {b.shape}")
    u, _, vt = np.linalg.svd(a.T @ b, full_matrices=False)
    return u @ vt
