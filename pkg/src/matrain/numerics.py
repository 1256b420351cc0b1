"""Dense matrix helpers and a symmetric eigensolver.

Matrices are plain 2-D ``float64`` numpy arrays. The full decomposition uses
the cyclic Jacobi method with round-robin (Brent-Luk) pair ordering: every
round rotates n/2 disjoint index pairs at once, so a sweep is n-1 vectorised
rounds instead of n(n-1)/2 scalar rotations. The principal eigenpair has a
separate power-iteration path.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from matrain.errors import ConvergenceError, NumericError, ShapeError, SpectrumError

PSD_CLAMP_TOL = 1e-10
_OFFDIAG_TOL = 1e-15
_MAX_SWEEPS = 60


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Eigenvalues in descending order with matching eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0
    rotations: int = 0

    @property
    def size(self) -> int:
        return self.eigenvalues.shape[0]

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


class PrincipalPair(NamedTuple):
    value: float
    vector: np.ndarray
    degenerate: bool


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains non-finite entries")
    return m


def matmul_transpose(a) -> np.ndarray:
    """Return ``a @ a.T``, exactly symmetric."""
    a = as_matrix(a)
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise ShapeError(f"empty matrix of shape {a.shape}")
    g = a @ a.T
    upper = np.triu(g)
    return upper + np.triu(g, 1).T


def frobenius_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    d = (a - b).ravel()
    return math.sqrt(float(d @ d))


def _check_symmetric(m: np.ndarray, rel: float = 1e-10) -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"matrix is not square: {m.shape}")
    scale = np.linalg.norm(m)
    if np.linalg.norm(m - m.T) > rel * scale:
        raise ShapeError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


@functools.lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # circle method; odd n gets a bye slot that is dropped from each round
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [
            (min(players[i], players[m - 1 - i]), max(players[i], players[m - 1 - i]))
            for i in range(m // 2)
        ]
        pairs = [(p, q) for p, q in pairs if q < n]
        if pairs:
            p = np.array([pq[0] for pq in pairs], dtype=np.intp)
            q = np.array([pq[1] for pq in pairs], dtype=np.intp)
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _off_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def _rotate_rows(x: np.ndarray, p, q, c, s) -> None:
    rp = x[p, :]
    rq = x[q, :]
    x[p, :] = c[:, None] * rp - s[:, None] * rq
    x[q, :] = s[:, None] * rp + c[:, None] * rq


def _jacobi(a: np.ndarray, max_sweeps: int = _MAX_SWEEPS):
    n = a.shape[0]
    vt = np.eye(n)  # eigenvectors as rows, so every update is a row gather
    scale = float(np.linalg.norm(a))
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), vt.T, 0, 0
    rounds = _round_robin(n)
    rotations = 0
    for sweep in range(max_sweeps + 1):
        off = _off_norm(a)
        if off <= _OFFDIAG_TOL * scale:
            return np.diag(a).copy(), vt.T, sweep, rotations
        if sweep == max_sweeps:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            safe = np.where(active, apq, 1.0)
            tau = (a[q, q] - a[p, p]) / (2.0 * safe)
            t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = np.where(active, 1.0 / np.hypot(1.0, t), 1.0)
            s = np.where(active, t * c, 0.0)
            rotations += int(active.sum())
            # J^T A J == J^T (J^T A)^T for symmetric A
            _rotate_rows(a, p, q, c, s)
            a = np.ascontiguousarray(a.T)
            _rotate_rows(a, p, q, c, s)
            a[p, q] = 0.0
            a[q, p] = 0.0
            _rotate_rows(vt, p, q, c, s)
    raise ConvergenceError(
        f"Jacobi did not converge in {max_sweeps} sweeps", residual=off / scale
    )


def eig_sym(m, tol: float = PSD_CLAMP_TOL, psd: bool = False) -> Spectrum:
    """Full eigendecomposition of a real symmetric matrix.

    Eigenvalues come back in descending order; ties keep their diagonal
    order. With ``psd=True`` the input is treated as a Gram matrix:
    eigenvalues in ``[-tol * lam1, 0)`` are clamped to zero and anything
    more negative raises :class:`SpectrumError`.
    """
    a = _check_symmetric(as_matrix(m))
    w, v, sweeps, rotations = _jacobi(a.copy())
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = np.ascontiguousarray(v[:, order])
    if psd:
        floor = -tol * max(float(w[0]), 0.0)
        if w[-1] < floor:
            raise SpectrumError(
                f"matrix is not PSD: eigenvalue {w[-1]:.3e} below {floor:.3e}"
            )
        w = np.where(w < 0.0, 0.0, w)
    return Spectrum(w, v, sweeps, rotations)


def _start_vector(n: int) -> np.ndarray:
    x = np.random.default_rng(0x5EED).standard_normal(n)
    return x / np.linalg.norm(x)


def top_eigenpairs(
    m, k: int = 1, tol: float = 1e-10, max_iter: int = 20000
) -> list[tuple[float, np.ndarray]]:
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by power iteration.

    After each pair converges the matrix is deflated (Hotelling) and the
    iteration restarts. Convergence is declared when the residual
    ``||Mv - rho v||`` drops below ``tol * rho``.
    """
    a = _check_symmetric(as_matrix(m)).copy()
    n = a.shape[0]
    pairs = []
    for _ in range(min(k, n)):
        v = _start_vector(n)
        # keep the restart vector away from already-found directions
        for _, u in pairs:
            v -= (u @ v) * u
        v /= np.linalg.norm(v)
        rho = 0.0
        for _ in range(max_iter):
            w = a @ v
            rho = float(v @ w)
            norm_w = float(np.linalg.norm(w))
            if norm_w == 0.0:
                rho = 0.0
                break
            if np.linalg.norm(w - rho * v) <= tol * abs(rho):
                v = w / norm_w
                break
            v = w / norm_w
        else:
            raise ConvergenceError(
                "power iteration did not converge",
                residual=float(np.linalg.norm(a @ v - rho * v)) / max(abs(rho), 1e-300),
            )
        pairs.append((rho, v))
        a -= rho * np.outer(v, v)
    return pairs


def lambda_max(m, tol: float = 1e-8) -> PrincipalPair:
    """Principal eigenpair of a symmetric PSD matrix.

    A zero matrix gives value 0, an arbitrary unit vector and
    ``degenerate=True``.
    """
    a = as_matrix(m)
    if not np.any(a):
        _check_symmetric(a)
        return PrincipalPair(0.0, _start_vector(a.shape[0]), True)
    (value, vector), = top_eigenpairs(a, 1, tol=tol)
    return PrincipalPair(value, vector, False)


def effective_rank(singular_values: Sequence[float]) -> float:
    """exp of the Shannon entropy of the normalised value distribution."""
    s = np.asarray(singular_values, dtype=np.float64).ravel()
    if s.size == 0:
        raise SpectrumError("effective rank of an empty spectrum")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise SpectrumError("effective rank needs finite non-negative values")
    total = float(s.sum())
    if total == 0.0:
        raise SpectrumError("effective rank undefined for an all-zero spectrum")
    p = s / total
    p = p[p > 0]
    entropy = -float(np.sum(p * np.log(p)))
    return min(max(math.exp(entropy), 1.0), float(s.size))
