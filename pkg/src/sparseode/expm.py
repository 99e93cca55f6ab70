"""Dense matrix exponential, principal logarithm, and directional derivatives.

The exponential uses scaling-and-squaring with a fixed order-13 Pade
approximant and is vectorized over leading batch dimensions, so stacks of
small matrices (the typical workload here: one block matrix per parameter
coordinate) go through a single numpy pipeline.

First and second directional derivatives come from block-matrix identities:
exponentiating [[A, F], [0, A]] puts the first directional derivative
L(A, F) = int_0^1 e^{(1-u)A} F e^{uA} du in the (1,2) block, and the 3x3
block upper-triangular analogue puts the iterated integral H(A, F, G) in
the (1,3) block.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "expm",
    "expm_frechet",
    "expm_second",
    "grad_trace_expm",
    "hess_trace_expm_entry",
    "logm_principal",
    "frechet_stack",
    "second_stack",
]

# Pade-13 coefficients and the standard scaling threshold for that order.
_PADE13_B = np.array(
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


class DimensionError(ValueError):
    """Inputs have incompatible or non-square shapes."""


class LogmDomainError(ValueError):
    """Matrix has an eigenvalue on (or too close to) the closed negative real axis."""


def _check_square(A: np.ndarray, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise DimensionError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


try:  # optional numba backend: same Pade-13, far less per-call overhead
    from ._pade_numba import pade13_batch as _pade13_numba
except ImportError:  # pragma: no cover - numba not installed
    _pade13_numba = None

# above this stack size numpy's batched matmul/solve amortizes better than
# the per-matrix jitted loop
_NUMBA_MAX_STACK = 32


def _expm_numpy(A: np.ndarray) -> np.ndarray:
    norm1 = np.abs(A).sum(axis=-2).max(axis=-1)
    b = _PADE13_B
    d = A.shape[-1]
    if np.any(norm1 > _THETA13):
        with np.errstate(divide="ignore"):
            s = np.ceil(np.log2(norm1 / _THETA13))
        s = np.where(norm1 > _THETA13, s, 0.0).astype(int)
        As = A / np.exp2(s)[:, None, None]
    else:
        s = None
        As = A
    ident = np.zeros_like(As)
    ident[..., np.arange(d), np.arange(d)] = 1.0
    A2 = As @ As
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = As @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6
        + b[5] * A4
        + b[3] * A2
        + b[1] * ident
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6
        + b[4] * A4
        + b[2] * A2
        + b[0] * ident
    )
    E = np.linalg.solve(V - U, V + U)
    if s is not None:
        for j in range(int(s.max(initial=0))):
            mask = s > j
            E[mask] = E[mask] @ E[mask]
    return E


def _expm_core(A: np.ndarray) -> np.ndarray:
    """Pade-13 scaling-and-squaring on a (k, d, d) stack; no input validation."""
    if _pade13_numba is not None and A.shape[0] <= _NUMBA_MAX_STACK:
        return _pade13_numba(np.ascontiguousarray(A))
    return _expm_numpy(A)


def expm(A: np.ndarray) -> np.ndarray:
    """Matrix exponential of ``A``; batched over leading dimensions.

    Scaling-and-squaring with a fixed order-13 Pade approximant.  Each
    matrix in the batch gets its own scaling power based on its 1-norm.
    """
    A = _check_square(A)
    if A.ndim == 2:
        return _expm_core(A[None])[0]
    return _expm_core(A.reshape((-1,) + A.shape[-2:])).reshape(A.shape)


def _pair(A: np.ndarray, F: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray, int]:
    A = _check_square(A, "A")
    F = _check_square(F, name)
    if A.ndim != 2 or F.ndim != 2:
        raise DimensionError("directional-derivative inputs must be single matrices")
    if A.shape != F.shape:
        raise DimensionError(f"A {A.shape} and {name} {F.shape} differ in dimension")
    return A, F, A.shape[0]


def expm_frechet(A: np.ndarray, F: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(e^A, L(A, F))`` with L the directional derivative of exp at A.

    L(A, F) = int_0^1 e^{(1-u)A} F e^{uA} du, read off as the (1,2) block of
    exp([[A, F], [0, A]]).
    """
    A, F, d = _pair(A, F, "F")
    M = np.zeros((2 * d, 2 * d))
    M[:d, :d] = A
    M[:d, d:] = F
    M[d:, d:] = A
    E = expm(M)
    return E[:d, :d], E[:d, d:]


def frechet_stack(A: np.ndarray, Fs: np.ndarray) -> np.ndarray:
    """Directional derivatives L(A, F_i) for a stack of directions (k, d, d)."""
    A = _check_square(A)
    Fs = np.asarray(Fs, dtype=float)
    if Fs.ndim == 2:
        Fs = Fs[None]
    k, d, _ = Fs.shape
    if A.shape != (d, d):
        raise DimensionError(f"A {A.shape} does not match directions of dimension {d}")
    M = np.zeros((k, 2 * d, 2 * d))
    M[:, :d, :d] = A
    M[:, :d, d:] = Fs
    M[:, d:, d:] = A
    return expm(M)[:, :d, d:]


def expm_second(A: np.ndarray, F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Iterated integral H(A, F, G) from the (1,3) block of the 3x3 block exponential.

    H(A, F, G) = int_0^1 int_0^u e^{(1-u)A} F e^{(u-s)A} G e^{sA} ds du.
    """
    A, F, d = _pair(A, F, "F")
    _, G, _ = _pair(A, G, "G")
    M = np.zeros((3 * d, 3 * d))
    M[:d, :d] = A
    M[d : 2 * d, d : 2 * d] = A
    M[2 * d :, 2 * d :] = A
    M[:d, d : 2 * d] = F
    M[d : 2 * d, 2 * d :] = G
    return expm(M)[:d, 2 * d :]


def second_stack(A: np.ndarray, Fs: np.ndarray, G: np.ndarray) -> np.ndarray:
    """H(A, F_i, G) for a stack of first directions and a fixed second direction."""
    A = _check_square(A)
    Fs = np.asarray(Fs, dtype=float)
    if Fs.ndim == 2:
        Fs = Fs[None]
    k, d, _ = Fs.shape
    if A.shape != (d, d) or G.shape != (d, d):
        raise DimensionError("dimension mismatch in second_stack")
    M = np.zeros((k, 3 * d, 3 * d))
    M[:, :d, :d] = A
    M[:, d : 2 * d, d : 2 * d] = A
    M[:, 2 * d :, 2 * d :] = A
    M[:, :d, d : 2 * d] = Fs
    M[:, d : 2 * d, 2 * d :] = np.broadcast_to(G, (k, d, d))
    return expm(M)[:, :d, 2 * d :]


def grad_trace_expm(A: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Gradient of B -> tr(e^B M) at A: entry (k, l) is tr(d_{kl} e^A M) = L(A, M)_{l,k}."""
    A, M, _ = _pair(A, M, "M")
    _, L = expm_frechet(A, M)
    return L.T


def hess_trace_expm_entry(
    A: np.ndarray, M: np.ndarray, kl: tuple[int, int], hr: tuple[int, int]
) -> float:
    """Second partial of B -> tr(e^B M): tr(d_{hr} d_{kl} e^A M).

    Equals H(A, E_kl, M)_{r,h} + H(A, E_hr, M)_{l,k}.
    """
    A, M, d = _pair(A, M, "M")
    k, l = kl
    h, r = hr
    for idx in (k, l, h, r):
        if not 0 <= idx < d:
            raise IndexError(f"index {idx} out of range for dimension {d}")
    E_kl = np.zeros((d, d))
    E_kl[k, l] = 1.0
    E_hr = np.zeros((d, d))
    E_hr[h, r] = 1.0
    H1 = expm_second(A, E_kl, M)
    H2 = expm_second(A, E_hr, M)
    return float(H1[r, h] + H2[l, k])


def logm_principal(A: np.ndarray, *, axis_tol: float = 1e-10, roundtrip_tol: float = 1e-8) -> np.ndarray:
    """Principal matrix logarithm via complex eigendecomposition.

    Rejects matrices with an eigenvalue within ``axis_tol`` of the closed
    negative real axis, and guards the eigendecomposition with an
    exp-reconstruction check at relative tolerance ``roundtrip_tol``.
    """
    A = _check_square(A)
    if A.ndim != 2:
        raise DimensionError("logm_principal expects a single matrix")
    w, V = np.linalg.eig(A)
    on_axis = (w.real <= 0.0) & (np.abs(w.imag) < axis_tol)
    if np.any(on_axis):
        raise LogmDomainError(
            f"eigenvalue(s) {w[on_axis]} on the closed negative real axis"
        )
    logw = np.log(w.astype(complex))
    L = np.real(V @ (logw[:, None] * np.linalg.solve(V, np.eye(A.shape[0], dtype=complex))))
    scale = max(1.0, float(np.linalg.norm(A)))
    err = float(np.linalg.norm(expm(L) - A)) / scale
    if not np.isfinite(err) or err > roundtrip_tol:
        raise LogmDomainError(
            f"eigendecomposition logm failed reconstruction: relative error {err:.3e}"
        )
    return L
