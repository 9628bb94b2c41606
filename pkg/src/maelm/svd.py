"""Singular values from the Gram matrix via cyclic Jacobi rotations.

Only singular values are ever needed, so the smaller Gram matrix
``m^T m`` (or ``m m^T``) is diagonalised and square-rooted. Rotations
follow a round-robin ordering: each round touches ``k/2`` disjoint index
pairs, which lets a whole round be applied with vectorised row/column
updates.
"""

from __future__ import annotations

import numpy as np


def _round_robin(k: int) -> list[tuple[np.ndarray, np.ndarray]]:
    players = list(range(k))
    rounds = []
    for _ in range(k - 1):
        p = np.array([players[i] for i in range(k // 2)])
        q = np.array([players[k - 1 - i] for i in range(k // 2)])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix, unsorted."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {a.shape}")
    if n == 1:
        return a[0].copy()
    a = 0.5 * (a + a.T)
    k = n + (n % 2)
    if k != n:
        a = np.pad(a, ((0, 1), (0, 1)))
    rounds = _round_robin(k)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= tol * scale:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            app, aqq = a[p, p], a[q, q]
            # a subnormal apq can push theta to inf; t then correctly becomes 0
            with np.errstate(over="ignore"):
                theta = np.where(active, (aqq - app) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                t = np.where(
                    active,
                    np.sign(theta + (theta == 0)) / (np.abs(theta) + np.hypot(theta, 1.0)),
                    0.0,
                )
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
    return np.diag(a)[:n].copy()


def singular_values(m) -> np.ndarray:
    """Descending singular values of ``m`` (``min(r, c)`` of them)."""
    m = np.asarray(getattr(m, "data", m), dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    r, c = m.shape
    gram = m.T @ m if c <= r else m @ m.T
    eig = jacobi_eigenvalues(gram)
    return np.sort(np.sqrt(np.clip(eig, 0.0, None)))[::-1]
