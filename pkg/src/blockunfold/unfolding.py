"""Unfolded block-ISTA networks: layered forward maps and their gradients.

Each network interprets K iterations of a thresholded gradient scheme as a
K-layer network with per-layer trainable parameters, always started at
x{0} = 0.  Five variants are provided; ``S``/``B`` denote the gain matrices
and alpha/gamma the per-layer threshold and step size:

    tied        x{k} = eta_{a{k-1}}( S x{k-1} + B^T y ),     shared S, B
    tied_cp     x{k} = eta_{a{k-1}}( x{k-1} - g{k-1} B^T (D x{k-1} - y) ),
                shared B, per-layer step sizes
    untied      as tied but with per-layer S{k}, B{k}
    untied_cp   as tied_cp but with per-layer B{k}; step sizes fixed
    albista     as tied_cp with B fixed to a precomputed analytical weight
                matrix; only the 2K scalars (a{k}, g{k}) are trained

Gradients are hand-derived reverse-mode passes through the layer recursion,
using the threshold Jacobian-vector products from :mod:`.operators`; at
block-norm kinks the zero-side subgradient is used.  Forward and backward
operate on row batches (samples in rows) and are embarrassingly parallel
over samples; parameters are read-only during a pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .blockcore import BlockDictionary
from .operators import eta, eta_dalpha, eta_jvp
from .solvers import DivergenceError, default_step_size

__all__ = [
    "NetworkVariant",
    "NetworkParams",
    "ForwardPass",
    "Gradients",
    "forward",
    "backward",
    "init_from_bista",
    "trainable_names",
    "get_param",
    "set_param",
    "get_grad",
    "param_count",
    "circ_conv",
    "adjoint_kernel",
    "ConvLayerStep",
    "conv_layer_form",
    "conv_step_fft",
    "save_checkpoint",
    "load_checkpoint",
]


class NetworkVariant(Enum):
    TIED_LBISTA = "tied"
    TIED_LBISTA_CP = "tied_cp"
    UNTIED_LBISTA = "untied"
    UNTIED_LBISTA_CP = "untied_cp"
    ALBISTA = "albista"


_CP_FORM = {
    NetworkVariant.TIED_LBISTA_CP,
    NetworkVariant.UNTIED_LBISTA_CP,
    NetworkVariant.ALBISTA,
}
_UNTIED = {NetworkVariant.UNTIED_LBISTA, NetworkVariant.UNTIED_LBISTA_CP}


@dataclass
class NetworkParams:
    """Trainable state of one unfolded network plus its fixed dictionary.

    Field usage per variant: ``S``/``B`` hold the shared matrices of the
    tied variants (``B`` is the fixed analytical matrix for albista),
    ``S_layers``/``B_layers`` the per-layer matrices of the untied ones.
    ``gammas`` exists for the gradient-step variants; it is trainable for
    tied_cp and albista and frozen at its initial value for untied_cp,
    whose per-layer matrices absorb any rescaling.
    """

    variant: NetworkVariant
    n: int
    d: int
    depth: int
    dictionary: np.ndarray
    alphas: np.ndarray
    gammas: np.ndarray | None = None
    S: np.ndarray | None = None
    B: np.ndarray | None = None
    S_layers: list[np.ndarray] | None = None
    B_layers: list[np.ndarray] | None = None

    @property
    def n_x(self) -> int:
        return self.n * self.d

    @property
    def n_y(self) -> int:
        return self.dictionary.shape[0]

    def __post_init__(self):
        self.dictionary = np.asarray(self.dictionary, dtype=np.float64)
        self.alphas = np.asarray(self.alphas, dtype=np.float64)
        K = self.depth
        v = self.variant
        if self.dictionary.shape[1] != self.n_x:
            raise ValueError("dictionary width does not match n*d")
        if self.alphas.shape != (K,):
            raise ValueError(f"alphas must have shape ({K},)")
        if v in _CP_FORM:
            if self.gammas is None:
                raise ValueError(f"{v.value} needs per-layer step sizes")
            self.gammas = np.asarray(self.gammas, dtype=np.float64)
            if self.gammas.shape != (K,):
                raise ValueError(f"gammas must have shape ({K},)")
        if v is NetworkVariant.TIED_LBISTA and (self.S is None or self.B is None):
            raise ValueError("tied variant needs shared S and B")
        if v in (NetworkVariant.TIED_LBISTA_CP, NetworkVariant.ALBISTA) and self.B is None:
            raise ValueError(f"{v.value} needs a shared B")
        if v is NetworkVariant.UNTIED_LBISTA and (
            self.S_layers is None or self.B_layers is None or len(self.S_layers) != K
        ):
            raise ValueError("untied variant needs K per-layer S and B matrices")
        if v is NetworkVariant.UNTIED_LBISTA_CP and (
            self.B_layers is None or len(self.B_layers) != K
        ):
            raise ValueError("untied_cp variant needs K per-layer B matrices")

    def S_at(self, k: int) -> np.ndarray:
        return self.S_layers[k] if self.variant in _UNTIED else self.S

    def B_at(self, k: int) -> np.ndarray:
        if self.variant in _UNTIED:
            return self.B_layers[k]
        return self.B

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            variant=self.variant,
            n=self.n,
            d=self.d,
            depth=self.depth,
            dictionary=self.dictionary,
            alphas=self.alphas.copy(),
            gammas=None if self.gammas is None else self.gammas.copy(),
            S=None if self.S is None else self.S.copy(),
            B=None if self.B is None else self.B.copy(),
            S_layers=None if self.S_layers is None else [M.copy() for M in self.S_layers],
            B_layers=None if self.B_layers is None else [M.copy() for M in self.B_layers],
        )


# ---------------------------------------------------------------------------
# trainable-parameter bookkeeping
#
# Parameters are addressed by name: "alpha.k", "gamma.k", "S", "B",
# "S.k", "B.k".  The trainable set matches each variant's declared
# parameter list; untied_cp keeps its step sizes fixed and albista its
# weight matrix.


def trainable_names(params: NetworkParams) -> list[str]:
    v, K = params.variant, params.depth
    names = [f"alpha.{k}" for k in range(K)]
    if v in (NetworkVariant.TIED_LBISTA_CP, NetworkVariant.ALBISTA):
        names += [f"gamma.{k}" for k in range(K)]
    if v is NetworkVariant.TIED_LBISTA:
        names += ["S", "B"]
    elif v is NetworkVariant.TIED_LBISTA_CP:
        names += ["B"]
    elif v is NetworkVariant.UNTIED_LBISTA:
        names += [f"S.{k}" for k in range(K)] + [f"B.{k}" for k in range(K)]
    elif v is NetworkVariant.UNTIED_LBISTA_CP:
        names += [f"B.{k}" for k in range(K)]
    return names


def layer_names(params: NetworkParams, layer: int) -> list[str]:
    """Parameters updated when training the given layer (0-based step index).

    Per-layer scalars and per-layer matrices belong to their own step;
    shared matrices take part in every layer's training stage.
    """
    active = {f"alpha.{layer}", f"gamma.{layer}", f"S.{layer}", f"B.{layer}", "S", "B"}
    return [name for name in trainable_names(params) if name in active]


def _split(name: str) -> tuple[str, int | None]:
    if "." in name:
        base, idx = name.split(".")
        return base, int(idx)
    return name, None


def get_param(params: NetworkParams, name: str):
    base, idx = _split(name)
    if base == "alpha":
        return params.alphas[idx]
    if base == "gamma":
        return params.gammas[idx]
    if base == "S":
        return params.S if idx is None else params.S_layers[idx]
    if base == "B":
        if idx is None:
            return params.B
        return params.B_layers[idx]
    raise KeyError(name)


def set_param(params: NetworkParams, name: str, value) -> None:
    base, idx = _split(name)
    if base == "alpha":
        params.alphas[idx] = float(value)
    elif base == "gamma":
        params.gammas[idx] = float(value)
    elif base == "S":
        if idx is None:
            params.S = np.asarray(value, dtype=np.float64)
        else:
            params.S_layers[idx] = np.asarray(value, dtype=np.float64)
    elif base == "B":
        if idx is None:
            params.B = np.asarray(value, dtype=np.float64)
        else:
            params.B_layers[idx] = np.asarray(value, dtype=np.float64)
    else:
        raise KeyError(name)


def param_count(params: NetworkParams) -> int:
    """Number of trainable scalars, matrix entries included."""
    total = 0
    for name in trainable_names(params):
        value = get_param(params, name)
        total += 1 if np.ndim(value) == 0 else int(np.size(value))
    return total


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardPass:
    """Cached forward run: all iterates and pre-threshold points.

    ``start`` is the index of the first executed layer; ``iterates[0]`` is
    the state the run began from (x{0} = 0 for a full pass).
    """

    Y: np.ndarray
    iterates: list[np.ndarray]
    prethresh: list[np.ndarray]
    start: int = 0
    residuals: list[np.ndarray] | None = None

    @property
    def depth(self) -> int:
        return len(self.prethresh)


def _as_batch(Y: np.ndarray, n_y: int) -> np.ndarray:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    if Y.ndim != 2 or Y.shape[1] != n_y:
        raise ValueError(f"measurements must have shape (batch, {n_y}), got {Y.shape}")
    return Y


def forward(
    params: NetworkParams,
    Y: np.ndarray,
    depth: int | None = None,
    start: int = 0,
    x_init: np.ndarray | None = None,
) -> ForwardPass:
    """Run layers ``start .. depth-1``, keeping every intermediate.

    A full pass starts at x{0} = 0; the layer-wise trainer resumes from a
    cached state ``x_init`` instead of re-running the frozen prefix.  All
    iterates are retained for diagnostics and for the backward pass.
    """
    K = params.depth if depth is None else depth
    if not 0 <= K <= params.depth:
        raise ValueError(f"depth must be in [0, {params.depth}], got {K}")
    if not 0 <= start <= K:
        raise ValueError(f"start must be in [0, {K}], got {start}")
    Y = _as_batch(Y, params.n_y)
    D = params.dictionary
    n, d = params.n, params.d
    if x_init is None:
        if start != 0:
            raise ValueError("resuming at start > 0 needs the cached state x_init")
        X = np.zeros((Y.shape[0], params.n_x))
    else:
        X = _as_batch(x_init, params.n_x)
        if X.shape[0] != Y.shape[0]:
            raise ValueError("x_init batch size does not match Y")
    iterates = [X]
    prethresh = []
    cp_form = params.variant in _CP_FORM
    residuals = [] if cp_form else None
    for k in range(start, K):
        Bk = params.B_at(k)
        if cp_form:
            R = X @ D.T - Y
            Z = X - params.gammas[k] * (R @ Bk)
            residuals.append(R)
        else:
            Z = X @ params.S_at(k).T + Y @ Bk
        if not np.all(np.isfinite(Z)):
            raise DivergenceError("non-finite activation", k + 1)
        X = eta(Z, params.alphas[k], n, d)
        prethresh.append(Z)
        iterates.append(X)
    return ForwardPass(
        Y=Y, iterates=iterates, prethresh=prethresh, start=start, residuals=residuals
    )


@dataclass
class Gradients:
    """Gradient slots mirroring NetworkParams; zero where not applicable."""

    dalphas: np.ndarray
    dgammas: np.ndarray | None = None
    dS: np.ndarray | None = None
    dB: np.ndarray | None = None
    dS_layers: list[np.ndarray] | None = None
    dB_layers: list[np.ndarray] | None = None


def get_grad(grads: Gradients, name: str):
    base, idx = _split(name)
    if base == "alpha":
        return grads.dalphas[idx]
    if base == "gamma":
        return grads.dgammas[idx]
    if base == "S":
        return grads.dS if idx is None else grads.dS_layers[idx]
    if base == "B":
        return grads.dB if idx is None else grads.dB_layers[idx]
    raise KeyError(name)


def backward(
    params: NetworkParams,
    fp: ForwardPass,
    X_star: np.ndarray,
    only_layer: int | None = None,
) -> Gradients:
    """Gradients of the batch-mean squared loss 1/S sum_j 1/2 ||x{K}_j - x*_j||^2
    with respect to the variant's parameters.

    ``only_layer`` restricts the result to one step's parameter set (the
    layer-wise training mode): other per-layer slots are zeroed, while
    shared matrices keep their full accumulated gradient since every stage
    trains them.  For a resumed pass (``fp.start > 0``) gradients cover the
    executed layers only, which is exact for variants whose stage
    parameters do not reach into the frozen prefix.
    """
    v = params.variant
    n, d = params.n, params.d
    D = params.dictionary
    X_star = _as_batch(X_star, params.n_x)
    batch = fp.Y.shape[0]
    if X_star.shape[0] != batch:
        raise ValueError("X_star batch size does not match the forward pass")

    grads = Gradients(dalphas=np.zeros(params.depth))
    if params.gammas is not None:
        grads.dgammas = np.zeros(params.depth)
    if v is NetworkVariant.TIED_LBISTA:
        grads.dS = np.zeros_like(params.S)
    if v in (NetworkVariant.TIED_LBISTA, NetworkVariant.TIED_LBISTA_CP):
        grads.dB = np.zeros_like(params.B)
    if v is NetworkVariant.UNTIED_LBISTA:
        grads.dS_layers = [np.zeros_like(M) for M in params.S_layers]
    if v in _UNTIED:
        grads.dB_layers = [np.zeros_like(M) for M in params.B_layers]

    G = (fp.iterates[-1] - X_star) / batch
    for j in reversed(range(fp.depth)):
        k = fp.start + j
        Z = fp.prethresh[j]
        a = params.alphas[k]
        grads.dalphas[k] = float(np.sum(eta_dalpha(Z, a, n, d) * G))
        dZ = eta_jvp(Z, a, G, n, d)
        X_prev = fp.iterates[j]
        Bk = params.B_at(k)
        if v in _CP_FORM:
            g = params.gammas[k]
            R = fp.residuals[j] if fp.residuals is not None else X_prev @ D.T - fp.Y
            grads.dgammas[k] = -float(np.sum(dZ * (R @ Bk)))
            if v is NetworkVariant.UNTIED_LBISTA_CP:
                grads.dB_layers[k] += -g * (R.T @ dZ)
            elif v is NetworkVariant.TIED_LBISTA_CP:
                grads.dB += -g * (R.T @ dZ)
            if j > 0:
                G = dZ - g * ((dZ @ Bk.T) @ D)
        else:
            Sk = params.S_at(k)
            dSk = dZ.T @ X_prev
            dBk = fp.Y.T @ dZ
            if v is NetworkVariant.UNTIED_LBISTA:
                grads.dS_layers[k] += dSk
                grads.dB_layers[k] += dBk
            else:
                grads.dS += dSk
                grads.dB += dBk
            if j > 0:
                G = dZ @ Sk

    if only_layer is not None:
        keep = set(layer_names(params, only_layer))
        grads.dalphas = np.where(
            np.arange(params.depth) == only_layer, grads.dalphas, 0.0
        )
        if grads.dgammas is not None:
            if f"gamma.{only_layer}" in keep:
                grads.dgammas = np.where(
                    np.arange(params.depth) == only_layer, grads.dgammas, 0.0
                )
            else:
                grads.dgammas = np.zeros(params.depth)
        if grads.dS_layers is not None:
            grads.dS_layers = [
                M if k == only_layer else np.zeros_like(M)
                for k, M in enumerate(grads.dS_layers)
            ]
        if grads.dB_layers is not None:
            grads.dB_layers = [
                M if k == only_layer else np.zeros_like(M)
                for k, M in enumerate(grads.dB_layers)
            ]
    return grads


def init_from_bista(
    variant: NetworkVariant,
    D: BlockDictionary,
    depth: int,
    B_analytic: np.ndarray | None = None,
    alpha: float = 1.0,
) -> NetworkParams:
    """Initialize a network at the classical iteration it unfolds.

    The step size is 1/(1.01 ||D||_2^2) and every layer's threshold is
    alpha times that step (the threshold the classical iteration actually
    applies).  The gain matrices start from ``B_analytic`` when given and
    from D itself otherwise; at this initialization the tied variants
    reproduce the classical trajectory exactly when ``B_analytic`` is None.
    """
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    gamma0 = default_step_size(D)
    base = D.data if B_analytic is None else np.asarray(B_analytic, dtype=np.float64)
    if base.shape != D.data.shape:
        raise ValueError(f"B_analytic has shape {base.shape}, expected {D.data.shape}")
    alphas = np.full(depth, alpha * gamma0)
    common = dict(
        n=D.n, d=D.d, depth=depth, dictionary=D.data.copy(), alphas=alphas
    )
    if variant is NetworkVariant.TIED_LBISTA:
        B = gamma0 * base
        S = np.eye(D.n_x) - B.T @ D.data
        return NetworkParams(variant=variant, S=S, B=B, **common)
    if variant is NetworkVariant.UNTIED_LBISTA:
        B = gamma0 * base
        S = np.eye(D.n_x) - B.T @ D.data
        return NetworkParams(
            variant=variant,
            S_layers=[S.copy() for _ in range(depth)],
            B_layers=[B.copy() for _ in range(depth)],
            **common,
        )
    gammas = np.full(depth, gamma0)
    if variant is NetworkVariant.TIED_LBISTA_CP:
        return NetworkParams(variant=variant, B=base.copy(), gammas=gammas, **common)
    if variant is NetworkVariant.UNTIED_LBISTA_CP:
        return NetworkParams(
            variant=variant,
            B_layers=[base.copy() for _ in range(depth)],
            gammas=gammas,
            **common,
        )
    if variant is NetworkVariant.ALBISTA:
        if B_analytic is None:
            raise ValueError("albista needs a precomputed analytical weight matrix")
        return NetworkParams(variant=variant, B=base.copy(), gammas=gammas, **common)
    raise ValueError(f"unknown variant {variant}")


# ---------------------------------------------------------------------------
# convolutional kernel form of the gradient step
#
# In the circulant setting the step x - gamma * b (*) (k (*) x - y) is a
# convolutional layer: filter f = e - gamma * (b (*) k) applied to x plus
# the bias kernel b applied to y.  Here b is the filter acting on the
# residual; to realize the step x - gamma B^T (D x - y) with B = circ(b_w),
# pass b = adjoint_kernel(b_w) since circ(b_w)^T = circ(adjoint_kernel(b_w)).


def circ_conv(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Circular convolution by direct (time-domain) summation."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.shape != x.shape or a.ndim != 1:
        raise ValueError(f"kernels must be equal-length vectors, got {a.shape} vs {x.shape}")
    n = a.size
    full = np.convolve(a, x)
    out = full[:n].copy()
    out[: n - 1] += full[n:]
    return out


def adjoint_kernel(b: np.ndarray) -> np.ndarray:
    """Cyclic reversal: circ(adjoint_kernel(b)) = circ(b)^T."""
    b = np.asarray(b, dtype=np.float64)
    return np.roll(b[::-1], 1)


@dataclass(frozen=True)
class ConvLayerStep:
    """One gradient step in kernel form: x -> f (*) x + gamma * (b (*) y).

    The bias kernel b (*) y is deferred to application time so the same
    step can serve many measurements.
    """

    f: np.ndarray
    b: np.ndarray
    gamma: float

    def apply(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return circ_conv(self.f, x) + self.gamma * circ_conv(self.b, y)


def conv_layer_form(b: np.ndarray, k: np.ndarray, gamma: float) -> ConvLayerStep:
    """Filter f = e - gamma * (b (*) k) of the circulant gradient step."""
    b = np.asarray(b, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if b.shape != k.shape or b.ndim != 1:
        raise ValueError(f"kernel length mismatch: {b.shape} vs {k.shape}")
    e = np.zeros_like(b)
    e[0] = 1.0
    return ConvLayerStep(f=e - gamma * circ_conv(b, k), b=b, gamma=gamma)


def conv_step_fft(
    b: np.ndarray, k: np.ndarray, gamma: float, x: np.ndarray, y: np.ndarray
) -> np.ndarray:
    """Same gradient step evaluated entirely in the Fourier domain."""
    b = np.asarray(b, dtype=np.float64)
    if not (b.shape == k.shape == x.shape == y.shape):
        raise ValueError("all kernels and signals must share one length")
    bh = np.fft.fft(b)
    kh = np.fft.fft(k)
    xh = np.fft.fft(x)
    yh = np.fft.fft(y)
    eh = np.ones_like(bh)
    return np.fft.ifft((eh - gamma * bh * kh) * xh + gamma * bh * yh).real


# ---------------------------------------------------------------------------
# checkpoint files: variant tag, depth, block structure, per-layer scalars,
# then matrix payloads in the shared text matrix format.


def _write_matrix(f, tag: str, A: np.ndarray) -> None:
    rows, cols = A.shape
    f.write(f"matrix {tag} {rows} {cols}\n")
    for r in range(rows):
        f.write(" ".join(f"{v:.17g}" for v in A[r]) + "\n")


def save_checkpoint(path: str | Path, params: NetworkParams) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("blockunfold-checkpoint v1\n")
        f.write(f"variant {params.variant.value}\n")
        f.write(f"depth {params.depth}\n")
        f.write(f"blocks {params.n} {params.d}\n")
        f.write("alphas " + " ".join(f"{v:.17g}" for v in params.alphas) + "\n")
        if params.gammas is not None:
            f.write("gammas " + " ".join(f"{v:.17g}" for v in params.gammas) + "\n")
        _write_matrix(f, "D", params.dictionary)
        if params.S is not None:
            _write_matrix(f, "S", params.S)
        if params.B is not None:
            _write_matrix(f, "B", params.B)
        if params.S_layers is not None:
            for k, M in enumerate(params.S_layers):
                _write_matrix(f, f"S.{k}", M)
        if params.B_layers is not None:
            for k, M in enumerate(params.B_layers):
                _write_matrix(f, f"B.{k}", M)


def load_checkpoint(path: str | Path) -> NetworkParams:
    with open(path, "r", encoding="utf-8") as f:
        magic = f.readline().strip()
        if magic != "blockunfold-checkpoint v1":
            raise ValueError(f"{path}: not a checkpoint file (header {magic!r})")
        fields: dict[str, str] = {}
        matrices: dict[str, np.ndarray] = {}
        line = f.readline()
        while line:
            parts = line.split()
            if not parts:
                line = f.readline()
                continue
            if parts[0] == "matrix":
                tag, rows, cols = parts[1], int(parts[2]), int(parts[3])
                A = np.empty((rows, cols))
                for r in range(rows):
                    A[r] = [float(v) for v in f.readline().split()]
                matrices[tag] = A
            else:
                fields[parts[0]] = " ".join(parts[1:])
            line = f.readline()
    variant = NetworkVariant(fields["variant"])
    depth = int(fields["depth"])
    n, d = (int(v) for v in fields["blocks"].split())
    alphas = np.array([float(v) for v in fields["alphas"].split()])
    gammas = (
        np.array([float(v) for v in fields["gammas"].split()])
        if "gammas" in fields
        else None
    )
    S_layers = [matrices[f"S.{k}"] for k in range(depth)] if "S.0" in matrices else None
    B_layers = [matrices[f"B.{k}"] for k in range(depth)] if "B.0" in matrices else None
    return NetworkParams(
        variant=variant,
        n=n,
        d=d,
        depth=depth,
        dictionary=matrices["D"],
        alphas=alphas,
        gammas=gammas,
        S=matrices.get("S"),
        B=matrices.get("B"),
        S_layers=S_layers,
        B_layers=B_layers,
    )
