"""Analytical weight matrices for unfolded block-sparse recovery.

A weight matrix B is feasible for a dictionary D when ``B[i]^T D[i] = I_d``
for every block; among feasible matrices one wants small cross block
coherence.  Minimizing the tractable surrogate ``(1/d) ||B^T D||_F^2`` over
the feasible set decouples into per-block equality-constrained least squares
problems whose KKT system is

    [ 2 D D^T   D[i] ] [ B[i]   ]   [ 0   ]
    [ D[i]^T    0    ] [ Lambda ] = [ I_d ],

solved in minimum norm by the Moore-Penrose inverse.  This module provides:

* the KKT pseudo-inverse oracle (reference route),
* the explicit block-partitioned closed form of that minimum-norm solution,
* a pseudo-inverse shortcut for d = 1,
* the Kronecker reduction: for D = K (x) I_d it suffices to solve at the
  d = 1 level and lift the result,
* an FFT solution for circulant K, where the dual spectrum is the
  conjugate reciprocal of the kernel spectrum (zeroed bins dropped, and the
  kernel rescaled by n/rank so the diagonal constraint still holds),
* a Toeplitz construction by circular extension of the kernel.

The closed form is implemented exactly as the block-partitioned formula
states, even though algebraic simplifications exist, so the KKT oracle stays
an independent correctness check rather than a shared code path.  Per-block
solves are independent and may run data-parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .blockcore import (
    BlockDictionary,
    MMVProblem,
    cross_block_coherence,
    kron_lift,
)

__all__ = [
    "WeightMethod",
    "AnalyticWeights",
    "UpperBoundReport",
    "solve_kkt_oracle",
    "kkt_weights",
    "closed_form_weights",
    "svd_weights_d1",
    "kron_weights",
    "circulant",
    "circulant_dual_kernel",
    "circulant_weights_fft",
    "toeplitz_weights_extend",
    "upper_bound_objective",
]

# Singular values below PINV_RTOL * sigma_max are truncated everywhere.
PINV_RTOL = 1e-10

# Feasibility demanded of every returned weight matrix (Frobenius, per block).
FEASIBILITY_TOL = 1e-8

# FFT bins below ZERO_BIN_TOL * max|k_hat| count as zero.
ZERO_BIN_TOL = 1e-10


class WeightMethod(Enum):
    KKT = "kkt"
    CLOSED_FORM = "closed_form"
    SVD_D1 = "svd_d1"
    KRONECKER = "kronecker"
    CIRCULANT_FFT = "circulant_fft"
    TOEPLITZ_EXT = "toeplitz_ext"


@dataclass(frozen=True)
class AnalyticWeights:
    """A feasible weight matrix together with its quality certificates.

    ``feasibility_residual`` is ``max_i ||B[i]^T D[i] - I_d||_F`` against the
    dictionary the weights were computed for, and ``cross_coherence`` the
    achieved cross block coherence.  ``kernel``/``rank`` are set by the
    circulant and Toeplitz routes; ``paired_dictionary`` is the dictionary
    matrix the Toeplitz construction manufactures alongside B.
    """

    B: BlockDictionary
    method: WeightMethod
    feasibility_residual: float
    cross_coherence: float
    kernel: np.ndarray | None = None
    rank: int | None = None
    paired_dictionary: np.ndarray | None = None


def _pinv(A: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(A, rcond=PINV_RTOL)


def _feasibility_residual(B: np.ndarray, D: np.ndarray, n: int, d: int) -> float:
    eye = np.eye(d)
    G = B.T @ D
    return max(
        float(np.linalg.norm(G[i * d : (i + 1) * d, i * d : (i + 1) * d] - eye))
        for i in range(n)
    )


def _assemble(
    Bmat: np.ndarray,
    D: BlockDictionary,
    method: WeightMethod,
    kernel: np.ndarray | None = None,
    rank: int | None = None,
    paired_dictionary: np.ndarray | None = None,
) -> AnalyticWeights:
    resid = _feasibility_residual(Bmat, D.data, D.n, D.d)
    if resid > FEASIBILITY_TOL:
        raise ValueError(
            f"computed weights are infeasible: max ||B[i]^T D[i] - I||_F = {resid:.3e}"
        )
    B = BlockDictionary(Bmat, n=D.n, d=D.d)
    coherence = cross_block_coherence(B, D) if D.n >= 2 else 0.0
    return AnalyticWeights(
        B=B,
        method=method,
        feasibility_residual=resid,
        cross_coherence=coherence,
        kernel=kernel,
        rank=rank,
        paired_dictionary=paired_dictionary,
    )


def _require_orthonormal_blocks(D: BlockDictionary) -> None:
    resid = D.max_block_gram_residual()
    if resid > FEASIBILITY_TOL:
        raise ValueError(
            f"dictionary blocks must be orthonormal: max ||D[i]^T D[i] - I||_F = {resid:.3e}"
        )


# ---------------------------------------------------------------------------
# KKT oracle and closed form


def solve_kkt_oracle(D: BlockDictionary, i: int) -> np.ndarray:
    """Minimum-norm solution of the per-block KKT system, via one dense
    pseudo-inverse of the stacked (n_y + d) x (n_y + d) matrix.

    Returns the n_y x d weight block; the multiplier rows are discarded.
    """
    if not 0 <= i < D.n:
        raise IndexError(f"block index {i} out of range [0, {D.n})")
    n_y, d = D.n_y, D.d
    Di = D.block(i)
    M = np.zeros((n_y + d, n_y + d))
    M[:n_y, :n_y] = 2.0 * D.data @ D.data.T
    M[:n_y, n_y:] = Di
    M[n_y:, :n_y] = Di.T
    rhs = np.zeros((n_y + d, d))
    rhs[n_y:, :] = np.eye(d)
    sol = _pinv(M) @ rhs
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError(f"pseudo-inverse of KKT system failed for block {i}")
    return sol[:n_y, :]


def kkt_weights(D: BlockDictionary) -> AnalyticWeights:
    """Concatenate the KKT oracle solutions of all blocks."""
    Bmat = np.hstack([solve_kkt_oracle(D, i) for i in range(D.n)])
    return _assemble(Bmat, D, WeightMethod.KKT)


def closed_form_weights(D: BlockDictionary) -> AnalyticWeights:
    """Explicit block-partitioned form of the minimum-norm KKT solution.

    With A = 2 D D^T the weight block is ``B[i] = K_i^+ (D[i] - E_i H_i)``
    where

        K_i = A^2 + D[i] D[i]^T,              E_i = A D[i],
        R_i = D[i] - A K_i^+ E_i,             S_i = -D[i]^T K_i^+ E_i,
        L_i = R_i^T R_i + S_i^T S_i,          M_i = K_i^+ E_i (I - L_i^+ L_i),
        H_i = L_i^+ S_i^T + (I - L_i^+ L_i) (I + M_i^T M_i)^{-1}
                (K_i^+ E_i)^T K_i^+ (D[i] - E_i L_i^+ S_i^T).

    All pseudo-inverses truncate singular values below 1e-10 relative to
    the largest.
    """
    _require_orthonormal_blocks(D)
    d = D.d
    A = 2.0 * D.data @ D.data.T
    A2 = A @ A
    eye_d = np.eye(d)
    cols = []
    for i in range(D.n):
        Di = D.block(i)
        Ki = A2 + Di @ Di.T
        Kp = _pinv(Ki)
        Ei = A @ Di
        KpEi = Kp @ Ei
        Ri = Di - A @ KpEi
        Si = -Di.T @ KpEi
        Li = Ri.T @ Ri + Si.T @ Si
        Lp = _pinv(Li)
        P = eye_d - Lp @ Li
        Mi = KpEi @ P
        Hi = Lp @ Si.T + P @ np.linalg.inv(eye_d + Mi.T @ Mi) @ KpEi.T @ Kp @ (
            Di - Ei @ Lp @ Si.T
        )
        cols.append(Kp @ (Di - Ei @ Hi))
    return _assemble(np.hstack(cols), D, WeightMethod.CLOSED_FORM)


# ---------------------------------------------------------------------------
# d = 1 shortcut and Kronecker reduction


def svd_weights_d1(D: np.ndarray) -> AnalyticWeights:
    """Pseudo-inverse shortcut for d = 1: transpose of D^+ with columns
    rescaled so that diag(B^T D) = 1."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ValueError(f"D must be 2-d, got shape {D.shape}")
    B0 = _pinv(D).T
    diag = np.einsum("ij,ij->j", B0, D)
    small = np.abs(diag) < 1e-12
    if np.any(small):
        bad = int(np.flatnonzero(small)[0])
        raise ValueError(
            f"cannot normalize: diagonal entry {bad} of B^T D is {diag[bad]:.3e}"
        )
    Bmat = B0 / diag
    Dd = BlockDictionary(D, n=D.shape[1], d=1)
    return _assemble(Bmat, Dd, WeightMethod.SVD_D1)


def kron_weights(P: MMVProblem, base: AnalyticWeights) -> AnalyticWeights:
    """Lift a d = 1 weight matrix for K to the MMV dictionary K (x) I_d.

    The lifted matrix ``base.B (x) I_d`` is feasible and optimal for the
    Frobenius surrogate without ever solving at the lifted dimensions.
    """
    if base.B.d != 1:
        raise ValueError("base weights must be at the d = 1 level")
    if base.B.n != P.n or base.B.n_y != P.m:
        raise ValueError(
            f"base weights are {base.B.n_y} x {base.B.n}, expected {P.m} x {P.n}"
        )
    diag = np.einsum("ij,ij->j", base.B.data, P.K)
    if np.max(np.abs(diag - 1.0)) > FEASIBILITY_TOL:
        raise ValueError(
            f"base weights infeasible for K: max |B[:,i]^T K[:,i] - 1| = "
            f"{np.max(np.abs(diag - 1.0)):.3e}"
        )
    if P.d == 1:
        return base
    D = kron_lift(P)
    Bmat = np.kron(base.B.data, np.eye(P.d))
    out = _assemble(Bmat, D, WeightMethod.KRONECKER)
    return out


# ---------------------------------------------------------------------------
# circulant and Toeplitz constructions


def circulant(v: np.ndarray) -> np.ndarray:
    """Square matrix whose i-th column is v cyclically shifted down by i."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    return np.stack([np.roll(v, i) for i in range(n)], axis=1)


def circulant_dual_kernel(k: np.ndarray, zero_tol: float = ZERO_BIN_TOL) -> tuple[np.ndarray, int]:
    """Unscaled dual kernel: spectrum conj(1/k_hat) with near-zero bins dropped.

    Returns ``(b, rank)`` where rank is the number of retained bins; the
    unscaled kernel satisfies ``b^T k = rank/n``.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 1 or k.size < 2:
        raise ValueError("kernel must be a 1-d vector of length >= 2")
    kh = np.fft.fft(k)
    mags = np.abs(kh)
    top = float(mags.max())
    if top == 0.0:
        raise ValueError("kernel spectrum is identically zero")
    keep = mags > zero_tol * top
    bh = np.zeros_like(kh)
    bh[keep] = 1.0 / np.conj(kh[keep])
    b = np.fft.ifft(bh).real
    return b, int(np.count_nonzero(keep))


def circulant_weights_fft(k: np.ndarray, zero_tol: float = ZERO_BIN_TOL) -> AnalyticWeights:
    """Circulant dual of circ(k), solved in the Fourier domain.

    For a rank-deficient kernel the retained-bin construction only reaches
    ``b^T k = rank/n``, so the kernel is rescaled by ``n/rank`` to restore
    the unit diagonal constraint.
    """
    b, rank = circulant_dual_kernel(k, zero_tol=zero_tol)
    n = b.size
    if rank < n:
        b = b * (n / rank)
    K = circulant(k)
    D = BlockDictionary(K, n=n, d=1)
    return _assemble(
        circulant(b), D, WeightMethod.CIRCULANT_FFT, kernel=b, rank=rank
    )


def toeplitz_weights_extend(
    k: np.ndarray, n: int, mode: str = "same"
) -> AnalyticWeights:
    """Weights for a banded convolution dictionary via circular extension.

    The kernel (length m_tilde < n) is zero-padded to length m and its
    circulant dual solved by FFT; columns of both the dictionary and the
    weights are cyclic shifts of the respective kernels, truncated to the
    m x n leading submatrix.  ``mode="same"`` uses m = n (the extension is
    then the full circulant); ``mode="full"`` uses m = n + m_tilde - 1,
    whose columns reproduce the linear-convolution Toeplitz matrix exactly.

    The extended circulant must have full rank; otherwise the cyclic-shift
    feasibility argument breaks down and the caller should adjust the grid
    or the kernel.
    """
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 1:
        raise ValueError("kernel must be a 1-d vector")
    m_tilde = k.size
    if not 1 <= m_tilde < n:
        raise ValueError(f"need 1 <= len(k) < n, got len(k)={m_tilde}, n={n}")
    if mode == "same":
        m = n
    elif mode == "full":
        m = n + m_tilde - 1
    else:
        raise ValueError(f"unknown mode {mode!r}, expected 'same' or 'full'")
    padded = np.zeros(m)
    padded[:m_tilde] = k
    b, rank = circulant_dual_kernel(padded)
    if rank < m:
        raise ValueError(
            f"extended circulant is rank deficient ({rank}/{m} bins); "
            "adjust the sampling grid or kernel so its spectrum has no zeros"
        )
    K = circulant(padded)[:, :n]
    B = circulant(b)[:, :n]
    D = BlockDictionary(K, n=n, d=1)
    return _assemble(
        B, D, WeightMethod.TOEPLITZ_EXT, kernel=b, rank=rank, paired_dictionary=K
    )


# ---------------------------------------------------------------------------
# surrogate objective diagnostics


@dataclass(frozen=True)
class UpperBoundReport:
    """Value of the Frobenius surrogate with its majorization chain.

    ``max_spectral_sq <= max_frob_sq <= value`` always holds: the squared
    spectral norm of any off-diagonal block is at most its squared Frobenius
    norm, which is at most the full sum over all blocks.
    """

    value: float
    max_spectral_sq: float
    max_frob_sq: float


def upper_bound_objective(B: BlockDictionary, D: BlockDictionary) -> UpperBoundReport:
    """(1/d) ||B^T D||_F^2 and the off-diagonal block norms it dominates."""
    if (B.n, B.d, B.n_y) != (D.n, D.d, D.n_y):
        raise ValueError("B and D must share shape and block structure")
    d = D.d
    G = B.data.T @ D.data
    value = float(np.linalg.norm(G) ** 2) / d
    max_spec = 0.0
    max_frob = 0.0
    for i in range(D.n):
        for j in range(D.n):
            if i == j:
                continue
            sub = G[i * d : (i + 1) * d, j * d : (j + 1) * d]
            max_spec = max(max_spec, float(np.linalg.norm(sub, 2) ** 2) / d)
            max_frob = max(max_frob, float(np.linalg.norm(sub) ** 2) / d)
    return UpperBoundReport(value=value, max_spectral_sq=max_spec, max_frob_sq=max_frob)
