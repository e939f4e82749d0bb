"""Block soft-thresholding and its derivative information.

The block soft-threshold eta_alpha scales every block by
``max(0, 1 - alpha/||z[i]||)``: it shrinks block norms by alpha and kills
blocks at or below the threshold.  It is the proximal operator of
``alpha * sum_i ||x[i]||_2``.

Besides the operator itself this module provides the pieces needed to
differentiate through it: Jacobian-vector products for backpropagation,
the derivative with respect to the threshold, and the Jacobian trace used
as the Onsager correction in approximate message passing.

Everything operates on raw arrays whose last axis has length ``n*d`` so
batched evaluation is a reshape away; thin wrappers accept
:class:`~blockunfold.blockcore.BlockVector`.  All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .blockcore import BlockVector

__all__ = [
    "ThresholdReport",
    "block_soft_threshold",
    "threshold_jvp",
    "threshold_vjp",
    "threshold_dalpha",
    "onsager_trace",
    "eta",
    "eta_jvp",
    "eta_dalpha",
    "eta_trace",
]


def _block_view(Z: np.ndarray, n: int, d: int) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[-1] != n * d:
        raise ValueError(f"last axis has length {Z.shape[-1]}, expected n*d = {n * d}")
    return Z.reshape(Z.shape[:-1] + (n, d))


def eta(Z: np.ndarray, alpha: float, n: int, d: int) -> np.ndarray:
    """Block soft-threshold of ``Z`` (last axis = n*d), batched over leading axes."""
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    Zb = _block_view(Z, n, d)
    r = np.linalg.norm(Zb, axis=-1, keepdims=True)
    safe = np.where(r > 0, r, 1.0)
    scale = np.maximum(0.0, 1.0 - alpha / safe)
    return (scale * Zb).reshape(Z.shape)


def eta_jvp(Z: np.ndarray, alpha: float, V: np.ndarray, n: int, d: int) -> np.ndarray:
    """Jacobian-vector product of the threshold at Z applied to V.

    Per active block (||z[i]|| > alpha) the Jacobian is
    ``(1 - alpha/r) I + (alpha/r) u u^T`` with ``u = z[i]/r``; inactive
    blocks (r <= alpha, including the kink) contribute the zero matrix,
    which keeps training gradients bounded.  The Jacobian is symmetric,
    so this is also the vector-Jacobian product.
    """
    Zb = _block_view(Z, n, d)
    Vb = _block_view(V, n, d)
    r = np.linalg.norm(Zb, axis=-1, keepdims=True)
    active = r > alpha
    safe = np.where(active, r, 1.0)
    U = np.where(active, Zb / safe, 0.0)
    radial = (U * Vb).sum(axis=-1, keepdims=True)
    out = np.where(active, (1.0 - alpha / safe) * Vb + (alpha / safe) * radial * U, 0.0)
    return out.reshape(Z.shape)


def eta_dalpha(Z: np.ndarray, alpha: float, n: int, d: int) -> np.ndarray:
    """Derivative of the threshold output with respect to alpha.

    Equals ``-z[i]/||z[i]||`` on active blocks and 0 on inactive ones
    (one-sided derivative at the kink).
    """
    Zb = _block_view(Z, n, d)
    r = np.linalg.norm(Zb, axis=-1, keepdims=True)
    active = r > alpha
    safe = np.where(active, r, 1.0)
    out = np.where(active, -Zb / safe, 0.0)
    return out.reshape(Z.shape)


def eta_trace(Z: np.ndarray, alpha: float, n: int, d: int) -> np.ndarray:
    """Trace of the threshold Jacobian, batched: sum over active blocks of
    ``d - alpha (d-1)/||z[i]||``."""
    Zb = _block_view(Z, n, d)
    r = np.linalg.norm(Zb, axis=-1)
    active = r > alpha
    safe = np.where(active, r, 1.0)
    per_block = np.where(active, d - alpha * (d - 1) / safe, 0.0)
    return per_block.sum(axis=-1)


@dataclass(frozen=True)
class ThresholdReport:
    """Threshold output with per-block activity and pre-threshold norms."""

    output: BlockVector
    active: np.ndarray
    block_norms: np.ndarray


def block_soft_threshold(z: BlockVector, alpha: float) -> ThresholdReport:
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    norms = z.block_norms()
    out = eta(z.data, alpha, z.n, z.d)
    return ThresholdReport(
        output=BlockVector(out, z.n, z.d),
        active=norms > alpha,
        block_norms=norms,
    )


def threshold_jvp(z: BlockVector, alpha: float, v: BlockVector) -> BlockVector:
    if (z.n, z.d) != (v.n, v.d):
        raise ValueError("z and v must share block structure")
    return BlockVector(eta_jvp(z.data, alpha, v.data, z.n, z.d), z.n, z.d)


# the block threshold Jacobian is symmetric
threshold_vjp = threshold_jvp


def threshold_dalpha(z: BlockVector, alpha: float) -> BlockVector:
    return BlockVector(eta_dalpha(z.data, alpha, z.n, z.d), z.n, z.d)


def onsager_trace(z: BlockVector, alpha: float, n_y: int) -> float:
    """Normalized divergence of the threshold at z: tr(d eta/d z) / n_y.

    ``n_y`` is the measurement dimension supplied by the caller; the AMP
    correction uses the divergence-per-measurement convention.
    """
    if alpha < 0:
        raise ValueError(f"threshold must be nonnegative, got {alpha}")
    if n_y < 1:
        raise ValueError(f"n_y must be positive, got {n_y}")
    return float(eta_trace(z.data, alpha, z.n, z.d)) / n_y
