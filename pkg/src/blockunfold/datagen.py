"""Synthetic MMV problems and block-sparse signals.

Two measurement scenarios: a Gaussian channel matrix with normalized
columns, and a rank-deficient circulant built by zeroing spectrum bins of
a random kernel.  Signals activate each block independently with
probability ``pnz``; active entries are standard normal, and measurement
noise is calibrated so that

    Var(noise) = pnz * n_x / n_y * 10^(-SNR_dB / 10),

with an infinite SNR meaning exact measurements.

Generation is deterministic and counter-based: sample i of a dataset only
depends on (seed, i), so parallel generation and partial reads agree with
the sequential order.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .blockcore import (
    BlockDictionary,
    BlockVector,
    MMVProblem,
    MatrixKind,
    kron_lift,
    load_matrix,
    save_matrix,
)
from .weights import circulant

__all__ = [
    "Scenario",
    "ScenarioConfig",
    "ProblemData",
    "CirculantKernel",
    "gen_gaussian_K",
    "gen_circulant_K",
    "noise_sigma",
    "build_problem",
    "gen_signal_batch",
    "gen_signals",
    "sample_signal_class",
    "save_dataset",
    "load_dataset",
]

# rng stream tags so matrix and signal draws never collide
_STREAM_MATRIX = 0
_STREAM_SIGNAL = 1

_REJECTION_CAP = 10_000


class Scenario(Enum):
    GAUSSIAN = "gaussian"
    CIRCULANT = "circulant"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: Scenario
    m: int
    n: int
    d: int
    pnz: float
    snr_db: float = np.inf
    rank: int | None = None
    seed: int = 0

    def __post_init__(self):
        if min(self.m, self.n, self.d) < 1:
            raise ValueError("dimensions must be >= 1")
        if not 0.0 <= self.pnz <= 1.0:
            raise ValueError(f"pnz must lie in [0, 1], got {self.pnz}")
        if self.scenario is Scenario.CIRCULANT:
            if self.m != self.n:
                raise ValueError("circulant scenario needs m == n")
            if self.rank is None or not 1 <= self.rank <= self.n:
                raise ValueError(f"circulant scenario needs 1 <= rank <= n, got {self.rank}")

    @property
    def n_y(self) -> int:
        return self.m * self.d

    @property
    def n_x(self) -> int:
        return self.n * self.d


def gen_gaussian_K(m: int, n: int, seed: int) -> np.ndarray:
    """iid standard normal m x n matrix with columns scaled to unit norm,
    so the lifted dictionary has orthonormal blocks."""
    rng = np.random.default_rng([seed, _STREAM_MATRIX])
    K = rng.standard_normal((m, n))
    return K / np.linalg.norm(K, axis=0)


class CirculantKernel(NamedTuple):
    k: np.ndarray
    K: np.ndarray
    rank: int


def gen_circulant_K(n: int, rank: int, seed: int) -> CirculantKernel:
    """Circulant matrix of prescribed rank from a random Hermitian spectrum.

    The spectrum is drawn iid complex normal with conjugate symmetry
    enforced (so the kernel is real), then n - rank bins are zeroed in
    symmetric pairs chosen uniformly; the self-paired Nyquist and DC bins
    fill odd remainders, DC last.  Some (n, rank) parities are unreachable
    exactly; the nearest achievable rank is generated and reported.
    Columns are normalized afterward, which rescales by the single global
    constant ||k|| and therefore preserves the circulant structure.
    """
    if not 1 <= rank <= n:
        raise ValueError(f"need 1 <= rank <= n, got rank={rank}, n={n}")
    rng = np.random.default_rng([seed, _STREAM_MATRIX])
    spectrum = np.zeros(n, dtype=complex)
    spectrum[0] = rng.standard_normal()
    half = n // 2
    if n % 2 == 0:
        spectrum[half] = rng.standard_normal()
    pair_top = half if n % 2 == 1 else half - 1
    for i in range(1, pair_top + 1):
        z = rng.standard_normal() + 1j * rng.standard_normal()
        spectrum[i] = z
        spectrum[n - i] = np.conj(z)

    target_zeros = n - rank
    pairs = rng.permutation(np.arange(1, pair_top + 1))
    zeroed = 0
    for i in pairs:
        if zeroed + 2 > target_zeros:
            break
        spectrum[i] = 0.0
        spectrum[n - i] = 0.0
        zeroed += 2
    if zeroed < target_zeros and n % 2 == 0 and spectrum[half] != 0.0:
        spectrum[half] = 0.0
        zeroed += 1
    if zeroed < target_zeros and spectrum[0] != 0.0:
        spectrum[0] = 0.0
        zeroed += 1

    k = np.fft.ifft(spectrum).real
    norm = np.linalg.norm(k)
    if norm == 0.0:
        raise ValueError("degenerate spectrum: kernel is zero")
    k = k / norm
    return CirculantKernel(k=k, K=circulant(k), rank=n - zeroed)


def noise_sigma(cfg: ScenarioConfig) -> float:
    """Noise standard deviation for the configured SNR; 0 at infinite SNR."""
    if np.isinf(cfg.snr_db):
        return 0.0
    return float(np.sqrt(cfg.pnz * cfg.n_x / cfg.n_y * 10.0 ** (-cfg.snr_db / 10.0)))


@dataclass(frozen=True)
class ProblemData:
    """Materialized measurement operator for a scenario."""

    cfg: ScenarioConfig
    K: np.ndarray
    D: BlockDictionary
    kernel: np.ndarray | None = None
    rank: int | None = None


def build_problem(cfg: ScenarioConfig) -> ProblemData:
    if cfg.scenario is Scenario.GAUSSIAN:
        K = gen_gaussian_K(cfg.m, cfg.n, cfg.seed)
        kernel, rank = None, None
        kind = MatrixKind.GAUSSIAN
    else:
        kernel, K, rank = gen_circulant_K(cfg.n, cfg.rank, cfg.seed)
        kind = MatrixKind.CIRCULANT
    D = kron_lift(MMVProblem(K, cfg.d, kind))
    return ProblemData(cfg=cfg, K=K, D=D, kernel=kernel, rank=rank)


def _draw_signal(rng, cfg: ScenarioConfig) -> np.ndarray:
    active = rng.random(cfg.n) < cfg.pnz
    values = rng.standard_normal((cfg.n, cfg.d))
    values[~active] = 0.0
    return values.reshape(-1)


def gen_signal_batch(
    cfg: ScenarioConfig, D: BlockDictionary, count: int, start_index: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Arrays (X, Y) of ``count`` samples, rows indexed from ``start_index``.

    Sample i is a pure function of (cfg.seed, i); splits are carved out of
    one index space via ``start_index``.
    """
    sigma = noise_sigma(cfg)
    X = np.empty((count, cfg.n_x))
    Y = np.empty((count, cfg.n_y))
    for row in range(count):
        rng = np.random.default_rng([cfg.seed, _STREAM_SIGNAL, start_index + row])
        x = _draw_signal(rng, cfg)
        y = D.data @ x
        if sigma > 0.0:
            y = y + sigma * rng.standard_normal(cfg.n_y)
        X[row] = x
        Y[row] = y
    return X, Y


def gen_signals(
    cfg: ScenarioConfig, count: int, start_index: int = 0
) -> list[tuple[BlockVector, np.ndarray]]:
    """List of (x*, y) pairs for the scenario (builds the operator itself)."""
    problem = build_problem(cfg)
    X, Y = gen_signal_batch(cfg, problem.D, count, start_index=start_index)
    return [(BlockVector(X[i], cfg.n, cfg.d), Y[i]) for i in range(count)]


def sample_signal_class(
    cfg: ScenarioConfig,
    D: BlockDictionary,
    s: int,
    count: int,
    start_index: int = 0,
    max_attempts: int = _REJECTION_CAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection-sampled batch with at most ``s`` active blocks per signal.

    Used by the recovery-guarantee diagnostics, which need signals inside
    a bounded sparsity class; resampling caps at ``max_attempts`` per
    sample.
    """
    sigma = noise_sigma(cfg)
    X = np.empty((count, cfg.n_x))
    Y = np.empty((count, cfg.n_y))
    for row in range(count):
        for attempt in range(max_attempts):
            rng = np.random.default_rng(
                [cfg.seed, _STREAM_SIGNAL, start_index + row, attempt]
            )
            x = _draw_signal(rng, cfg)
            if np.count_nonzero(np.linalg.norm(x.reshape(cfg.n, cfg.d), axis=1)) <= s:
                break
        else:
            raise RuntimeError(
                f"rejection sampling failed after {max_attempts} attempts "
                f"(sample {start_index + row}, s={s})"
            )
        y = D.data @ x
        if sigma > 0.0:
            y = y + sigma * rng.standard_normal(cfg.n_y)
        X[row] = x
        Y[row] = y
    return X, Y


# ---------------------------------------------------------------------------
# dataset files: one matrix file per split plus a manifest


_SPLITS = ("train", "val", "test")


def save_dataset(
    out_dir: str | Path,
    cfg: ScenarioConfig,
    problem: ProblemData,
    splits: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_matrix(out / "K.txt", problem.K)
    if problem.kernel is not None:
        save_matrix(out / "kernel.txt", problem.kernel)
    for split, (X, Y) in splits.items():
        save_matrix(out / f"X_{split}.txt", X)
        save_matrix(out / f"Y_{split}.txt", Y)
    with open(out / "manifest.txt", "w", encoding="utf-8") as f:
        f.write("[dataset]\n")
        f.write(f"scenario = {cfg.scenario.value}\n")
        f.write(f"m = {cfg.m}\n")
        f.write(f"n = {cfg.n}\n")
        f.write(f"d = {cfg.d}\n")
        f.write(f"pnz = {cfg.pnz:.17g}\n")
        f.write(f"snr_db = {cfg.snr_db:.17g}\n")
        f.write(f"seed = {cfg.seed}\n")
        f.write(f"rank = {problem.rank if problem.rank is not None else 'none'}\n")
        for split in _SPLITS:
            count = splits[split][0].shape[0] if split in splits else 0
            f.write(f"n_{split} = {count}\n")


def load_dataset(
    data_dir: str | Path,
) -> tuple[ScenarioConfig, ProblemData, dict[str, tuple[np.ndarray, np.ndarray]]]:
    data = Path(data_dir)
    manifest: dict[str, str] = {}
    with open(data / "manifest.txt", "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("["):
                continue
            key, _, value = line.partition("=")
            manifest[key.strip()] = value.strip()
    rank = None if manifest["rank"] == "none" else int(manifest["rank"])
    cfg = ScenarioConfig(
        scenario=Scenario(manifest["scenario"]),
        m=int(manifest["m"]),
        n=int(manifest["n"]),
        d=int(manifest["d"]),
        pnz=float(manifest["pnz"]),
        snr_db=float(manifest["snr_db"]),
        rank=rank,
        seed=int(manifest["seed"]),
    )
    K = load_matrix(data / "K.txt")
    kind = MatrixKind.CIRCULANT if cfg.scenario is Scenario.CIRCULANT else MatrixKind.GAUSSIAN
    D = kron_lift(MMVProblem(K, cfg.d, kind))
    kernel = (
        load_matrix(data / "kernel.txt").ravel() if (data / "kernel.txt").exists() else None
    )
    problem = ProblemData(cfg=cfg, K=K, D=D, kernel=kernel, rank=rank)
    splits = {}
    for split in _SPLITS:
        x_path = data / f"X_{split}.txt"
        if x_path.exists() and int(manifest.get(f"n_{split}", "0")) > 0:
            splits[split] = (load_matrix(x_path), load_matrix(data / f"Y_{split}.txt"))
    return cfg, problem, splits
