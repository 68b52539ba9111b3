"""Dense linear-algebra helpers and the seeded random generator.

Matrices are plain ``numpy.float64`` arrays; the functions here add the
shape checks and numerical guarantees the rest of the package relies on.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, ShapeError

NEG_INF = -1e9

JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-10


class Rng:
    """Seeded PCG64 stream; identical seeds give identical draws everywhere."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, size=None) -> np.ndarray | float:
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, seq, size=None, replace: bool = True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, n_or_seq):
        return self._gen.permutation(n_or_seq)

    def child(self, key: int) -> "Rng":
        """Independent sub-stream derived from this generator's seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max subtraction (safe for -1e9 mask entries)."""
    x = np.asarray(x, dtype=np.float64)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, eps: float = 1e-5) -> np.ndarray:
    """Mean-centred layer norm over the last axis, scaled by ``gain`` (no bias)."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"gain length {gain.shape[-1]} != feature length {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain


def off_diagonal_norm(m: np.ndarray) -> float:
    off = m - np.diag(np.diag(m))
    return float(np.sqrt(np.sum(off * off)))


def symmetric_eigenvalues(m, *, symmetry_tol: float = 1e-9) -> list[float]:
    """Eigenvalues of a real symmetric matrix, descending, by cyclic Jacobi.

    Sweeps until the off-diagonal Frobenius norm drops below
    ``1e-10 * max(1, ||m||_F)``; raises :class:`ConvergenceError` after
    100 sweeps.
    """
    a = as_matrix(m).copy()
    n, n2 = a.shape
    if n != n2:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    if n and np.max(np.abs(a - a.T)) > symmetry_tol:
        raise ShapeError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    tol = JACOBI_TOL * max(1.0, float(np.linalg.norm(a)))
    for _ in range(JACOBI_MAX_SWEEPS):
        if off_diagonal_norm(a) < tol:
            return sorted(np.diag(a).tolist(), reverse=True)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta**2 would overflow
                else:
                    t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
    if off_diagonal_norm(a) < tol:
        return sorted(np.diag(a).tolist(), reverse=True)
    raise ConvergenceError(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")
