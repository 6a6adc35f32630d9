"""Symmetric eigendecompositions, trailing-subspace projectors and their derivatives.

Eigenvalues are sorted in descending order. Each eigenvector is signed so that
its largest-magnitude component is positive (ties go to the lowest index).
Algorithmic quantities only use projectors, so the sign choice matters for
diagnostics only.

Functions suffixed ``_batch`` work on stacks ``(m, d, d)``; the plain variants
take a single matrix and raise :class:`EigenGapTooSmall` on a degenerate gap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DerivativeBundle
from .errors import EigenGapTooSmall

DEFAULT_GAP_TOL = 1e-8


@dataclass(frozen=True)
class EigenSystem:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def d(self) -> int:
        return self.eigenvalues.size

    def gap_at(self, k: int) -> float:
        """``lambda_k - lambda_{k+1}`` with 1-based ``k``; infinite for ``k = 0``."""
        if k == 0:
            return np.inf
        return float(self.eigenvalues[k - 1] - self.eigenvalues[k])


@dataclass(frozen=True)
class TrailingProjection:
    v_perp: np.ndarray
    projector: np.ndarray
    k: int


def eig_desc_batch(H):
    """Descending eigenpairs of a stack of symmetric matrices.

    Returns ``(lam, V)`` with ``lam`` of shape ``(m, d)`` and column ``i`` of
    ``V[m]`` paired with ``lam[m, i]``.
    """
    H = np.asarray(H, dtype=float)
    if not np.all(np.isfinite(H)):
        raise ValueError("matrix has non-finite entries")
    S = 0.5 * (H + np.swapaxes(H, -1, -2))
    lam, V = np.linalg.eigh(S)
    lam = lam[..., ::-1]
    V = V[..., ::-1]
    idx = np.argmax(np.abs(V), axis=-2)
    sign = np.sign(np.take_along_axis(V, idx[..., None, :], axis=-2))
    sign[sign == 0] = 1.0
    return np.ascontiguousarray(lam), np.ascontiguousarray(V * sign)


def eig_desc(H) -> EigenSystem:
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError("expected a square matrix")
    lam, V = eig_desc_batch(H[None])
    return EigenSystem(lam[0], V[0])


def gap_ok(lam, k: int, gap_tol: float = DEFAULT_GAP_TOL) -> np.ndarray:
    """Row mask where ``lambda_k - lambda_{k+1} >= gap_tol``."""
    lam = np.atleast_2d(lam)
    if k == 0:
        return np.ones(lam.shape[0], dtype=bool)
    return (lam[:, k - 1] - lam[:, k]) >= gap_tol


def _check_k(k, d):
    if not 0 <= k <= d - 1:
        raise ValueError(f"ridge dimension k must be in 0..{d - 1}, got {k}")


def trailing_projector_batch(V, k: int) -> np.ndarray:
    Vp = V[..., :, k:]
    return Vp @ np.swapaxes(Vp, -1, -2)


def trailing(eigsys: EigenSystem, k: int, gap_tol: float = DEFAULT_GAP_TOL) -> TrailingProjection:
    """Projector onto the span of eigenvectors ``k+1..d``.

    ``k = 0`` is accepted and gives the identity (mode seeking).
    """
    _check_k(k, eigsys.d)
    gap = eigsys.gap_at(k)
    if gap < gap_tol:
        raise EigenGapTooSmall(gap, gap_tol)
    Vp = eigsys.eigenvectors[:, k:]
    return TrailingProjection(Vp, Vp @ Vp.T, k)


def projector_derivative_batch(lam, V, T, k: int) -> np.ndarray:
    """Derivative of the trailing projector along each axis.

    ``T`` holds third derivatives ``(m, d, d, d)``; slice ``[..., l]`` is the
    derivative of the Hessian along axis ``l``. Returns ``dP`` of shape
    ``(m, d, d, d)`` with ``dP[..., l]`` the derivative of ``P`` along ``l``.
    Uses first-order perturbation theory: only leading/trailing cross terms
    survive, weighted by ``1/(lambda_j - lambda_i)``.
    """
    lam = np.asarray(lam, dtype=float)
    d = lam.shape[-1]
    if k == 0:
        return np.zeros(lam.shape[:-1] + (d, d, d))
    # M[.., p, q, l] = V_p^T H_l V_q
    M = np.einsum("mip,mijl,mjq->mpql", V, T, V)
    diff = lam[:, None, :] - lam[:, :, None]  # diff[p, q] = lam_q - lam_p
    C = np.zeros_like(diff)
    lead, trail = slice(0, k), slice(k, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        C[:, lead, trail] = 1.0 / diff[:, lead, trail]
    C = C + np.swapaxes(C, 1, 2)
    with np.errstate(invalid="ignore"):
        A = M * C[..., None]
    return np.einsum("mip,mpql,mjq->mijl", V, A, V)


def projector_derivative(bundle: DerivativeBundle, eigsys: EigenSystem, k: int,
                         gap_tol: float = DEFAULT_GAP_TOL) -> np.ndarray:
    """``d^2 x d`` matrix whose column ``l`` is ``vec(dP/dx_l)`` (column-major vec)."""
    _check_k(k, eigsys.d)
    if bundle.order < 3 or bundle.third is None:
        raise ValueError("bundle must carry third derivatives")
    gap = eigsys.gap_at(k)
    if gap < gap_tol:
        raise EigenGapTooSmall(gap, gap_tol)
    d = eigsys.d
    dP = projector_derivative_batch(eigsys.eigenvalues[None], eigsys.eigenvectors[None],
                                    np.asarray(bundle.third)[None], k)[0]
    # column-major vec of each d x d slice
    return np.transpose(dP, (1, 0, 2)).reshape(d * d, d)
