"""Jitted Pade-13 scaling-and-squaring kernel.

Same algorithm and coefficients as the numpy path in expm.py; exists because
the solver's inner loop exponentiates thousands of small matrices per fit,
where per-call numpy/LAPACK overhead dominates the arithmetic.  The linear
solve is an explicit partial-pivot LU: at these dimensions (d <= ~30) a
LAPACK call costs more than the elimination itself.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_B = np.array(
    [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ]
)
_THETA13 = 5.371920351148152


@njit(cache=True)
def _solve_lu(M, R):
    """Partial-pivot LU solve of M X = R; M and R are overwritten, X ends in R."""
    d = M.shape[0]
    for c in range(d):
        piv = c
        big = abs(M[c, c])
        for r in range(c + 1, d):
            if abs(M[r, c]) > big:
                big = abs(M[r, c])
                piv = r
        if piv != c:
            for j in range(d):
                M[c, j], M[piv, j] = M[piv, j], M[c, j]
                R[c, j], R[piv, j] = R[piv, j], R[c, j]
        inv = 1.0 / M[c, c]
        for r in range(c + 1, d):
            f = M[r, c] * inv
            if f != 0.0:
                for j in range(c + 1, d):
                    M[r, j] -= f * M[c, j]
                for j in range(d):
                    R[r, j] -= f * R[c, j]
    for c in range(d - 1, -1, -1):
        inv = 1.0 / M[c, c]
        for j in range(d):
            acc = R[c, j]
            for r in range(c + 1, d):
                acc -= M[c, r] * R[r, j]
            R[c, j] = acc * inv
    return R


@njit(cache=True)
def pade13_batch(As):
    k, d, _ = As.shape
    out = np.empty_like(As)
    for i in range(k):
        A = As[i].copy()
        norm1 = 0.0
        for c in range(d):
            col = 0.0
            for r in range(d):
                col += abs(A[r, c])
            if col > norm1:
                norm1 = col
        s = 0
        if norm1 > _THETA13:
            s = int(np.ceil(np.log2(norm1 / _THETA13)))
            A = A / (2.0**s)
        A2 = np.dot(A, A)
        A4 = np.dot(A2, A2)
        A6 = np.dot(A2, A4)
        W = _B[13] * A6 + _B[11] * A4 + _B[9] * A2
        W2 = _B[7] * A6 + _B[5] * A4 + _B[3] * A2
        for r in range(d):
            W2[r, r] += _B[1]
        U = np.dot(A, np.dot(A6, W) + W2)
        V = np.dot(A6, _B[12] * A6 + _B[10] * A4 + _B[8] * A2) + _B[6] * A6 + _B[4] * A4 + _B[2] * A2
        for r in range(d):
            V[r, r] += _B[0]
        E = _solve_lu(V - U, V + U)
        for _ in range(s):
            E = np.dot(E, E)
        out[i] = E
    return out
