"""Dense linear algebra and randomness used by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the checks the rest of the code relies on (finite input, matching shapes)
and provide a small deterministic SVD and a pivoted inverse whose failure modes
are explicit exceptions rather than silent garbage.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTensor, NonConvergence, NonFiniteInput, ShapeMismatch, Singular

RNG_ALGORITHM = "PCG64"

# Relative threshold used whenever a statement needs a numerical rank.
RANK_TOL = 1e-9


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Convert external input to a float64 array, rejecting NaN/Inf."""
    arr = np.array(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator; PCG64 streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order.

    ``np.einsum`` without path optimisation runs its own sequential loops, so
    the result does not depend on BLAS threading.
    """
    a = as_tensor(a, "a")
    b = as_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return np.einsum("ik,kj->ij", a, b, optimize=False)


def inf_norm(x) -> float:
    """Largest absolute entry."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise EmptyTensor("inf_norm of an empty tensor")
    return float(np.max(np.abs(x)))


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        k = len(self.sigma) if rank is None else min(rank, len(self.sigma))
        return (self.u[:, :k] * self.sigma[:k]) @ self.v[:, :k].T


def _complete_basis(q: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace columns of ``q`` where ``filled`` is False with orthonormal fill-ins."""
    m = q.shape[0]
    q = q.copy()
    candidates = iter(np.eye(m))
    for j in np.flatnonzero(~filled):
        while True:
            e = next(candidates)
            basis = q[:, filled]
            w = e - basis @ (basis.T @ e)
            w = w - basis @ (basis.T @ w)
            norm = np.linalg.norm(w)
            if norm > 1e-6:
                q[:, j] = w / norm
                filled = filled.copy()
                filled[j] = True
                break
    return q


def svd(w, tol: float = 1e-12, max_sweeps: int | None = None) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``u`` (m x k), ``sigma`` (k,), ``v`` (n x k) with k = min(m, n),
    singular values non-increasing and each u-column's largest-magnitude entry
    positive (first index wins ties).
    """
    w = as_tensor(w, "w")
    if w.ndim != 2:
        raise ShapeMismatch(f"svd expects a matrix, got shape {w.shape}")
    m, n = w.shape
    if m < n:
        r = svd(w.T, tol=tol, max_sweeps=max_sweeps)
        return _canonical_signs(r.v, r.sigma, r.u)
    if n == 0:
        return SvdResult(np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0)))

    a = w.copy()
    v = np.eye(n)
    cap = max_sweeps if max_sweeps is not None else 100 * n
    # columns below this squared norm are rounding residue; rotating them
    # against each other never settles
    floor = (1e-16 * np.linalg.norm(w)) ** 2
    for _ in range(cap):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = a[:, p]
                aq = a[:, q]
                alpha = ap @ ap
                beta = aq @ aq
                gamma = ap @ aq
                if alpha <= floor or beta <= floor or abs(gamma) <= tol * np.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                a[:, [p, q]] = np.column_stack((c * ap - s * aq, s * ap + c * aq))
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, [p, q]] = np.column_stack((c * vp - s * vq, s * vp + c * vq))
        if not rotated:
            break
    else:
        raise NonConvergence(f"one-sided Jacobi did not converge in {cap} sweeps")

    sigma = np.linalg.norm(a, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    a = a[:, order]
    v = v[:, order]
    scale = sigma[0] if sigma.size else 0.0
    filled = sigma > max(scale * 1e-13, 1e-300)
    u = np.zeros((m, n))
    u[:, filled] = a[:, filled] / sigma[filled]
    # columns with small sigma lose orthogonality; the fix-up moves the
    # reconstruction by at most sigma_j times the correction
    for j in np.flatnonzero(filled)[1:]:
        prev = u[:, :j]
        for _ in range(2):
            u[:, j] -= prev @ (prev.T @ u[:, j])
        u[:, j] /= np.linalg.norm(u[:, j])
    if not np.all(filled):
        u = _complete_basis(u, filled)
        sigma = np.where(filled, sigma, 0.0)
    return _canonical_signs(u, sigma, v)


def _canonical_signs(u: np.ndarray, sigma: np.ndarray, v: np.ndarray) -> SvdResult:
    u = u.copy()
    v = v.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return SvdResult(u, sigma, v)


def numerical_rank(w, rel_tol: float = RANK_TOL) -> int:
    """Count singular values above ``rel_tol * sigma_1``."""
    sigma = svd(w).sigma
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.sum(sigma > rel_tol * sigma[0]))


def inverse(w, rel_pivot: float = 1e-12) -> np.ndarray:
    """Gauss-Jordan inverse with partial pivoting.

    Raises ``Singular`` when a pivot falls below ``rel_pivot * ||w||_inf``
    (maximum absolute row sum).
    """
    w = as_tensor(w, "w")
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeMismatch(f"inverse expects a square matrix, got {w.shape}")
    n = w.shape[0]
    threshold = rel_pivot * float(np.max(np.sum(np.abs(w), axis=1))) if n else 0.0
    aug = np.hstack([w, np.eye(n)])
    for col in range(n):
        pivot_row = col + int(np.argmax(np.abs(aug[col:, col])))
        pivot = aug[pivot_row, col]
        if abs(pivot) <= threshold:
            raise Singular(f"pivot {pivot:.3e} at column {col} below {threshold:.3e}")
        if pivot_row != col:
            aug[[col, pivot_row]] = aug[[pivot_row, col]]
        aug[col] /= aug[col, col]
        factors = aug[:, col].copy()
        factors[col] = 0.0
        aug -= np.outer(factors, aug[col])
    return aug[:, n:]


def is_singular(w, rel_pivot: float = 1e-12) -> bool:
    try:
        inverse(w, rel_pivot)
    except Singular:
        return True
    return False


def spectral_norm(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        return 0.0
    return float(svd(w).sigma[0])
