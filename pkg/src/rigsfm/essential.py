"""Minimal five-point essential matrix solver and its RANSAC loop.

The solver follows the classic null-space + polynomial ideal construction:
the essential matrix is written as ``E = x E1 + y E2 + z E3 + E4`` over the
4-dimensional null space of the epipolar design matrix, the determinant and
trace constraints give ten cubic equations in (x, y, z), and the solutions
are read off the eigenvectors of a 10x10 action matrix over the monomial
basis of degree <= 2.  Epipolar convention: ``pb^T E pa = 0`` for normalized
homogeneous points pa (first frame) and pb (second frame).
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["solve_five_point", "sampson_distance", "essential_ransac"]

# monomial bases over (x, y, z): degree <= 1, <= 2, and <= 3
_MON1 = [(1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0)]
_MON2 = [
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1),
    (0, 0, 2), (1, 0, 0), (0, 1, 0), (0, 0, 1), (0, 0, 0),
]
_MON3_CUBIC = [
    (3, 0, 0), (2, 1, 0), (2, 0, 1), (1, 2, 0), (1, 1, 1),
    (1, 0, 2), (0, 3, 0), (0, 2, 1), (0, 1, 2), (0, 0, 3),
]
# columns: the ten degree-3 monomials first, then the quotient basis MON2
_MON3 = _MON3_CUBIC + _MON2
_M3_INDEX = {m: i for i, m in enumerate(_MON3)}


def _scatter_matrix(mons_a, mons_b, mons_out):
    out_index = {m: i for i, m in enumerate(mons_out)}
    S = np.zeros((len(mons_a) * len(mons_b), len(mons_out)))
    for i, ma in enumerate(mons_a):
        for j, mb in enumerate(mons_b):
            m = tuple(a + b for a, b in zip(ma, mb))
            S[i * len(mons_b) + j, out_index[m]] = 1.0
    return S


_S2 = _scatter_matrix(_MON1, _MON1, _MON2)        # deg1 * deg1 -> deg2
_S3 = _scatter_matrix(_MON2, _MON1, _MON3)        # deg2 * deg1 -> deg3

_ONE2 = np.zeros(10)
_ONE2[_MON2.index((0, 0, 0))] = 1.0


def _mul11(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.outer(a, b).reshape(-1) @ _S2


def _mul21(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.outer(a, b).reshape(-1) @ _S3


def solve_five_point(pa: np.ndarray, pb: np.ndarray) -> list[np.ndarray]:
    """All essential matrices consistent with five normalized correspondences.

    Args:
        pa: (5, 2) normalized coordinates in the first frame.
        pb: (5, 2) normalized coordinates in the second frame.

    Returns:
        Up to ten essential matrices with unit Frobenius norm; empty when the
        sample is degenerate.
    """
    pa_h = np.column_stack([pa, np.ones(len(pa))])
    pb_h = np.column_stack([pb, np.ones(len(pb))])
    A = np.einsum("ni,nj->nij", pb_h, pa_h).reshape(len(pa), 9)
    _, _, vt = np.linalg.svd(A)
    basis = vt[-4:][::-1].reshape(4, 3, 3)  # E = x B3 + y B2 ... keep order x,y,z,1

    # E entries as degree-1 polynomials over [x, y, z, 1]
    Epoly = np.transpose(basis, (1, 2, 0))  # (3, 3, 4)

    # EE^T entries (degree 2), all 9 at once
    EEt = np.einsum("ika,jkb->ijab", Epoly, Epoly).reshape(9, 16) @ _S2
    EEt = EEt.reshape(3, 3, 10)
    trace = EEt[0, 0] + EEt[1, 1] + EEt[2, 2]
    M2 = 2.0 * EEt
    for i in range(3):
        M2[i, i] -= trace

    # (2 EE^T - tr I) E, all 9 cubic rows at once
    rows = np.zeros((10, 20))
    rows[:9] = np.einsum("ika,kjb->ijab", M2, Epoly).reshape(9, 40) @ _S3
    # det(E) via cofactor expansion along the first row
    det = np.zeros(20)
    for j, sign in ((0, 1.0), (1, -1.0), (2, 1.0)):
        c1, c2 = [c for c in range(3) if c != j]
        minor = _mul11(Epoly[1, c1], Epoly[2, c2]) - _mul11(Epoly[1, c2], Epoly[2, c1])
        det += sign * _mul21(minor, Epoly[0, j])
    rows[9] = det

    A3 = rows[:, :10]
    B3 = rows[:, 10:]
    try:
        reduced = np.linalg.solve(A3, B3)
    except np.linalg.LinAlgError:
        return []
    if not np.all(np.isfinite(reduced)):
        return []

    # action matrix for multiplication by x over the basis MON2
    T = np.zeros((10, 10))
    for i, mon in enumerate(_MON2):
        prod = (mon[0] + 1, mon[1], mon[2])
        if sum(prod) <= 2:
            T[i, _MON2.index(prod)] = 1.0
        else:
            T[i] = -reduced[_MON3_CUBIC.index(prod)]

    try:
        eigvals, eigvecs = np.linalg.eig(T)
    except np.linalg.LinAlgError:
        return []

    solutions = []
    for idx in range(10):
        if abs(eigvals[idx].imag) > 1e-6:
            continue
        v = eigvecs[:, idx].real
        if abs(v[9]) < 1e-12:
            continue
        x, y, z = v[6] / v[9], v[7] / v[9], v[8] / v[9]
        E = x * basis[0] + y * basis[1] + z * basis[2] + basis[3]
        n = np.linalg.norm(E)
        if n < 1e-12 or not np.all(np.isfinite(E)):
            continue
        solutions.append(E / n)
    return solutions


def sampson_distance(E: np.ndarray, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """First-order epipolar distance in normalized coordinates, per match."""
    pa_h = np.column_stack([pa, np.ones(len(pa))])
    pb_h = np.column_stack([pb, np.ones(len(pb))])
    Epa = pa_h @ E.T           # (N, 3) rows of E @ pa
    Etpb = pb_h @ E            # (N, 3) rows of E^T @ pb
    err = np.sum(pb_h * Epa, axis=1)
    denom = Epa[:, 0] ** 2 + Epa[:, 1] ** 2 + Etpb[:, 0] ** 2 + Etpb[:, 1] ** 2
    denom = np.maximum(denom, 1e-18)
    return np.abs(err) / np.sqrt(denom)


def essential_ransac(
    pa: np.ndarray,
    pb: np.ndarray,
    threshold: float,
    rng: np.random.Generator,
    max_iterations: int = 200,
    min_iterations: int = 5,
    confidence: float = 0.9999,
) -> tuple[np.ndarray | None, np.ndarray]:
    """RANSAC over five-point samples; returns (E, inlier mask).

    Deterministic for a fixed generator state.  E is None when no sample
    produced a model with at least five inliers.
    """
    n = len(pa)
    if n < 5:
        return None, np.zeros(n, dtype=bool)
    best_E = None
    best_mask = np.zeros(n, dtype=bool)
    needed = max_iterations
    it = 0
    while it < min(max_iterations, max(needed, min_iterations)):
        sample = rng.choice(n, size=5, replace=False)
        for E in solve_five_point(pa[sample], pb[sample]):
            mask = sampson_distance(E, pa, pb) < threshold
            count = int(mask.sum())
            if count > int(best_mask.sum()):
                best_E, best_mask = E, mask
                ratio = count / n
                if ratio >= 1.0:
                    needed = 0
                elif ratio > 0:
                    fail = 1.0 - ratio ** 5
                    needed = math.ceil(math.log(1.0 - confidence) / math.log(fail)) if fail < 1.0 else max_iterations
        it += 1
    if best_E is not None and int(best_mask.sum()) < 5:
        return None, np.zeros(n, dtype=bool)
    return best_E, best_mask
