"""Diagnostics for the recovery guarantees of analytically weighted networks.

For a network x{k+1} = eta_{a{k}}( x{k} - g{k} B^T (D x{k} - y) ) with a
feasible weight matrix B, thresholds that dominate the residual coupling,

    a{k} >= g{k} * mu * C_X{k} + C * sigma,          mu = d * mu_cross(B, D),

guarantee that iterates never activate blocks outside the true support,
and the worst l2 error over a bounded signal class obeys the per-layer
bound

    ||x{k} - x*||_2 <= exp(-sum_{t<k} a~(t)) s M
                       + C sigma (1 + sum_{t<k} exp(-sum_{r=t+1}^{k-1} a~(r)))

with contraction exponents a~(t) = -log( g{t} mu ((kappa+1)s - 1) + |1-g{t}| ),
valid while s < (1/mu + 1)/2 and every g{t} stays inside
(0, 2/(mu(2s-1)+1)).  Here C = sup_k max_j |g{k}| ||B[j]||_2 and C_X{k} is
the worst l2,1 error at layer k over the class; kappa >= 1 measures how far
the trained thresholds sit above the minimal compliant value.

The class suprema are uncomputable, so C_X{k} is measured as a max over a
finite test set; that under-estimate makes the kappa estimate an
over-estimate, the conservative direction for the threshold condition.
Likewise mu uses the achieved coherence of the supplied B, an upper bound
on the best possible value.  All analyses here are read-only and freely
parallel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .blockcore import (
    BlockDictionary,
    BlockVector,
    block_support,
    cross_block_coherence,
)
from .operators import eta
from .unfolding import ForwardPass, NetworkParams, NetworkVariant

__all__ = [
    "BoundConstants",
    "KappaEstimate",
    "ContainmentResult",
    "max_weight_block_norm",
    "measure_constants",
    "check_support_containment",
    "support_violation_layers",
    "estimate_kappa",
    "step_size_limit",
    "error_bound_curve",
    "lower_rate_constant",
    "calibrated_network",
    "write_verify_csv",
]


@dataclass(frozen=True)
class BoundConstants:
    """Measured quantities entering the recovery bounds.

    ``C_X[k]`` is the worst l2,1 error after k layers over the measured
    set, for k = 0..K (entry 0 is the worst ||x*||_{2,1}).
    """

    mu_tilde_b: float
    mu: float
    C: float
    C_X: np.ndarray
    sigma: float
    s: int
    M: float
    kappa: float | None = None


@dataclass(frozen=True)
class KappaEstimate:
    kappa: float
    min_ratio: float
    ratios: np.ndarray


@dataclass(frozen=True)
class ContainmentResult:
    contained: bool
    first_violation: int | None


def max_weight_block_norm(B: BlockDictionary) -> float:
    """max_j ||B[j]||_2 over the weight blocks."""
    return max(float(np.linalg.norm(B.block(j), 2)) for j in range(B.n))


def _l21_rows(X: np.ndarray, n: int, d: int) -> np.ndarray:
    return np.linalg.norm(X.reshape(X.shape[0], n, d), axis=2).sum(axis=1)


def measure_constants(
    params: NetworkParams,
    fp: ForwardPass,
    X_star: np.ndarray,
    sigma: float = 0.0,
    s: int | None = None,
) -> BoundConstants:
    """Measure mu, C and the per-layer error suprema on a finite test set.

    ``fp`` must be a forward pass of ``params`` on the measurements of
    ``X_star``.  The sparsity level defaults to the largest block support
    observed in the set.
    """
    if params.variant not in (
        NetworkVariant.ALBISTA,
        NetworkVariant.TIED_LBISTA_CP,
        NetworkVariant.UNTIED_LBISTA_CP,
    ):
        raise ValueError("constants are defined for the gradient-step variants")
    n, d = params.n, params.d
    D = BlockDictionary(params.dictionary, n=n, d=d)
    B = BlockDictionary(params.B if params.B is not None else params.B_layers[0], n=n, d=d)
    mu_tilde = cross_block_coherence(B, D)
    C = float(np.max(np.abs(params.gammas[: fp.depth]))) * max_weight_block_norm(B)
    X_star = np.atleast_2d(X_star)
    C_X = np.array(
        [float(_l21_rows(Xk - X_star, n, d).max()) for Xk in fp.iterates]
    )
    block_counts = np.count_nonzero(
        np.linalg.norm(X_star.reshape(X_star.shape[0], n, d), axis=2) > 0, axis=1
    )
    M = float(np.linalg.norm(X_star.reshape(X_star.shape[0], n, d), axis=2).max())
    return BoundConstants(
        mu_tilde_b=mu_tilde,
        mu=d * mu_tilde,
        C=C,
        C_X=C_X,
        sigma=sigma,
        s=int(block_counts.max()) if s is None else s,
        M=M,
    )


# ---------------------------------------------------------------------------
# support containment


def check_support_containment(
    iterates: Sequence[np.ndarray],
    x_star: np.ndarray,
    n: int,
    d: int,
    tol: float | None = None,
) -> ContainmentResult:
    """True iff every iterate's block support is inside supp(x*).

    On violation, reports the first offending layer index (0 = start).
    """
    star_support = block_support(BlockVector(np.asarray(x_star).ravel(), n, d), tol)
    for k, x in enumerate(iterates):
        supp = block_support(BlockVector(np.asarray(x).ravel(), n, d), tol)
        if not supp <= star_support:
            return ContainmentResult(contained=False, first_violation=k)
    return ContainmentResult(contained=True, first_violation=None)


def support_violation_layers(
    fp: ForwardPass, X_star: np.ndarray, n: int, d: int
) -> np.ndarray:
    """Per-sample first layer whose support escapes supp(x*); -1 if none.

    Uses the relative activity tolerance of :func:`blockcore.block_support`
    vectorized over the batch.
    """
    X_star = np.atleast_2d(X_star)
    batch = X_star.shape[0]
    star_norms = np.linalg.norm(X_star.reshape(batch, n, d), axis=2)
    star_tol = 1e-12 * np.maximum(1.0, np.linalg.norm(X_star, axis=1))
    star_active = star_norms > star_tol[:, None]
    first = np.full(batch, -1, dtype=int)
    for k, Xk in enumerate(fp.iterates):
        norms = np.linalg.norm(Xk.reshape(batch, n, d), axis=2)
        tol = 1e-12 * np.maximum(1.0, np.linalg.norm(Xk, axis=1))
        active = norms > tol[:, None]
        escaped = np.any(active & ~star_active, axis=1)
        newly = escaped & (first < 0)
        first[newly] = k
    return first


# ---------------------------------------------------------------------------
# threshold margin and error bound


def estimate_kappa(params: NetworkParams, constants: BoundConstants) -> KappaEstimate:
    """Margin of the trained thresholds over the minimal compliant value:
    ratios (a{k} - C sigma) / (g{k} mu C_X{k}), max over layers.

    The min ratio must be >= 1 for the guarantees to apply; one can always
    extract such a kappa from compliant trained parameters.
    """
    K = len(params.alphas)
    denom = params.gammas[:K] * constants.mu * constants.C_X[:K]
    if np.any(denom <= 0):
        bad = int(np.flatnonzero(denom <= 0)[0])
        raise ValueError(
            f"nonpositive threshold-condition denominator at layer {bad}: "
            f"gamma={params.gammas[bad]:.3g}, mu={constants.mu:.3g}, "
            f"C_X={constants.C_X[bad]:.3g}"
        )
    ratios = (params.alphas[:K] - constants.C * constants.sigma) / denom
    return KappaEstimate(
        kappa=float(ratios.max()), min_ratio=float(ratios.min()), ratios=ratios
    )


def step_size_limit(mu: float, s: int) -> float:
    """Upper end of the admissible step-size interval, 2/(mu(2s-1)+1)."""
    return 2.0 / (mu * (2 * s - 1) + 1.0)


def error_bound_curve(
    gammas: np.ndarray,
    constants: BoundConstants,
    kappa: float,
    depth: int | None = None,
) -> np.ndarray:
    """Per-layer right-hand side of the l2 error bound, k = 0..K.

    The inner noise accumulation uses the suffix sums
    ``sum_{r=t+1}^{k-1} a~(r)`` produced by unrolling the one-step
    contraction.  Hypothesis violations (step size outside the interval or
    s too large for mu) warn; the exponents may then be nonpositive and
    the curve loses its guarantee.
    """
    mu, s, M, sigma, C = constants.mu, constants.s, constants.M, constants.sigma, constants.C
    K = len(gammas) if depth is None else depth
    gammas = np.asarray(gammas, dtype=np.float64)[:K]
    if s >= (1.0 / mu + 1.0) / 2.0:
        warnings.warn(
            f"sparsity s={s} violates s < (1/mu + 1)/2 = {(1.0 / mu + 1.0) / 2.0:.3g}",
            stacklevel=2,
        )
    limit = step_size_limit(mu, s)
    if np.any((gammas <= 0) | (gammas >= limit)):
        warnings.warn(
            f"step sizes leave the admissible interval (0, {limit:.3g})", stacklevel=2
        )
    a = gammas * mu * ((kappa + 1) * s - 1) + np.abs(1.0 - gammas)
    a_tilde = -np.log(a)
    bound = np.empty(K + 1)
    bound[0] = s * M
    for k in range(1, K + 1):
        signal = np.exp(-np.sum(a_tilde[:k])) * s * M
        noise = 1.0 + sum(
            np.exp(-np.sum(a_tilde[t + 1 : k])) for t in range(k)
        )
        bound[k] = signal + C * sigma * noise
    return bound


def lower_rate_constant(
    B_layers: Sequence[BlockDictionary] | BlockDictionary,
    D: BlockDictionary,
    support: Sequence[int],
) -> float:
    """Escape-rate constant c = log 3 - log sigma_min_bar of the lower bound.

    sigma_min_bar is the smallest singular value of I - B[S]^T D[S] over
    the supplied layers, restricted to the support blocks; a singular
    restriction reports +inf (the bound degenerates).
    """
    support = sorted(set(int(i) for i in support))
    if len(support) < 2:
        raise ValueError("support must contain at least 2 blocks")
    if isinstance(B_layers, BlockDictionary):
        B_layers = [B_layers]
    d = D.d
    cols = np.concatenate([np.arange(i * d, (i + 1) * d) for i in support])
    DS = D.data[:, cols]
    eye = np.eye(len(cols))
    sigma_min = np.inf
    for B in B_layers:
        sv = np.linalg.svd(eye - B.data[:, cols].T @ DS, compute_uv=False)
        if sv[-1] <= 1e-12 * max(float(sv[0]), 1.0):
            return float("inf")
        sigma_min = min(sigma_min, float(sv[-1]))
    return float(np.log(3.0) - np.log(sigma_min))


# ---------------------------------------------------------------------------
# threshold calibration at the compliant lower edge


def calibrated_network(
    D: BlockDictionary,
    B: BlockDictionary,
    gamma: float,
    depth: int,
    X_star: np.ndarray,
    Y: np.ndarray,
    sigma: float = 0.0,
    s: int | None = None,
) -> tuple[NetworkParams, BoundConstants]:
    """Fixed-weight network with thresholds at the compliant lower edge.

    Builds layer by layer: a{k} = gamma * mu * C_X{k} + C * sigma with
    C_X{k} measured on the supplied signals, which realizes the threshold
    condition with kappa = 1 on that set.  Returns the network and the
    measured constants.
    """
    n, d = D.n, D.d
    mu_tilde = cross_block_coherence(B, D)
    mu = d * mu_tilde
    C = abs(gamma) * max_weight_block_norm(B)
    X_star = np.atleast_2d(X_star)
    Y = np.atleast_2d(Y)
    X = np.zeros_like(X_star)
    alphas = np.empty(depth)
    C_X = np.empty(depth + 1)
    for k in range(depth):
        C_X[k] = float(_l21_rows(X - X_star, n, d).max())
        alphas[k] = gamma * mu * C_X[k] + C * sigma
        Z = X - gamma * ((X @ D.data.T - Y) @ B.data)
        X = eta(Z, alphas[k], n, d)
    C_X[depth] = float(_l21_rows(X - X_star, n, d).max())
    params = NetworkParams(
        variant=NetworkVariant.ALBISTA,
        n=n,
        d=d,
        depth=depth,
        dictionary=D.data.copy(),
        alphas=alphas,
        gammas=np.full(depth, gamma),
        B=B.data.copy(),
    )
    block_counts = np.count_nonzero(
        np.linalg.norm(X_star.reshape(X_star.shape[0], n, d), axis=2) > 0, axis=1
    )
    M = float(np.linalg.norm(X_star.reshape(X_star.shape[0], n, d), axis=2).max())
    constants = BoundConstants(
        mu_tilde_b=mu_tilde,
        mu=mu,
        C=C,
        C_X=C_X,
        sigma=sigma,
        s=int(block_counts.max()) if s is None else s,
        M=M,
        kappa=1.0,
    )
    return params, constants


def write_verify_csv(
    path: str | Path,
    empirical_max_err: np.ndarray,
    bound_rhs: np.ndarray,
    params: NetworkParams,
    kappa_ratios: np.ndarray,
    notes: Sequence[str] = (),
) -> None:
    """Per-layer diagnostic report.

    The step-size interval quoted in notes is computed with mu = d * the
    achieved cross coherence, the constant the contraction argument
    actually uses.
    """
    K = len(params.alphas)
    with open(path, "w", encoding="utf-8") as f:
        f.write("# blockunfold-csv v1 verify\n")
        for note in notes:
            f.write(f"# {note}\n")
        f.write("layer,empirical_max_err,bound_rhs,alpha,gamma,kappa_ratio\n")
        for k in range(1, K + 1):
            f.write(
                f"{k},{empirical_max_err[k]:.17g},{bound_rhs[k]:.17g},"
                f"{params.alphas[k - 1]:.17g},{params.gammas[k - 1]:.17g},"
                f"{kappa_ratios[k - 1]:.17g}\n"
            )
