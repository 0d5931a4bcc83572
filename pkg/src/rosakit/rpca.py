"""Alternating low-rank + sparse decomposition and the analysis helpers
built on it.

The solver is GoDec-style block coordinate descent: with the sparse part
fixed, the best rank-r fit is the truncated SVD; with the low-rank part
fixed, the best cardinality-k fit is magnitude top-k of the residual. Both
subproblems are solved exactly at desk scale (exact LAPACK SVD below a size
cutoff), so the Frobenius error is non-increasing by construction. On the
randomized-SVD path a fallback re-solve keeps that guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError
from .sparse import CsrMatrix, csr_from_linear
from .tensor import STREAM_SVD, substream, svd_truncate_exact, topk_abs, truncated_svd

# below this dimension the exact SVD is cheaper and keeps the optimal-step
# guarantee unconditionally
EXACT_SVD_MAX_DIM = 256


@dataclass
class RpcaConfig:
    rank: int
    density: float
    max_iters: int = 100
    rel_tol: float = 1e-7

    def __post_init__(self):
        if self.rank < 0:
            raise ArgumentError(f"rank must be >= 0, got {self.rank}")
        if not 0.0 <= self.density <= 1.0:
            raise ArgumentError(f"density must be in [0, 1], got {self.density}")


@dataclass
class RpcaResult:
    """L as rank-r factors (U * diag(S), V with orthonormal columns), the
    sparse part as CSR, and the per-iteration Frobenius error."""

    L_factors: tuple
    S_sparse: CsrMatrix
    error_history: list = field(default_factory=list)

    def low_rank_dense(self) -> np.ndarray:
        us, v = self.L_factors
        return us @ v.T

    @property
    def error(self) -> float:
        return self.error_history[-1] if self.error_history else float("nan")


def _rank_r_fit(a: np.ndarray, r: int, rng) -> tuple:
    """Best rank-r factors of a: (U*diag(S), V)."""
    m, n = a.shape
    if r == 0:
        return np.zeros((m, 0)), np.zeros((n, 0))
    if min(m, n) <= EXACT_SVD_MAX_DIM:
        u, s, v = svd_truncate_exact(a, r)
    else:
        u, s, v = truncated_svd(a, r, rng=rng)
    return u * s, v


def _sparse_fit(a: np.ndarray, card: int) -> CsrMatrix:
    """Best cardinality-card approximation: magnitude top-k of a."""
    idx = topk_abs(a, card)
    mask = csr_from_linear(idx, a.shape, dtype=np.float64)
    mask.values[...] = a.reshape(-1)[idx]
    return mask


def _alternate(a, rank, card, max_iters, rel_tol, rng, low0) -> RpcaResult:
    m, n = a.shape
    low = low0
    us, v = np.zeros((m, 0)), np.zeros((n, 0))
    sparse = _sparse_fit(np.zeros((m, n)), 0)
    history: list[float] = []
    for _ in range(max_iters):
        sparse = _sparse_fit(a - low, card)
        resid = a - sparse.to_dense(dtype=np.float64)
        # the previous L is feasible for the new subproblem, so the new fit
        # must not be worse than this
        fit_keep = float(np.linalg.norm(resid - low))
        new_us, new_v = _rank_r_fit(resid, rank, rng)
        new_low = new_us @ new_v.T
        err = float(np.linalg.norm(resid - new_low))
        if err > fit_keep and rank > 0 and min(m, n) > EXACT_SVD_MAX_DIM:
            # randomized SVD fell short of the previous iterate; the exact
            # solve restores the descent guarantee
            u_e, s_e, v_e = svd_truncate_exact(resid, rank)
            new_us, new_v = u_e * s_e, v_e
            new_low = new_us @ new_v.T
            err = float(np.linalg.norm(resid - new_low))
        us, v, low = new_us, new_v, new_low
        history.append(err)
        if len(history) >= 2:
            prev = history[-2]
            if prev <= 0.0 or (prev - err) < rel_tol * prev:
                break
        if err == 0.0:
            break
    return RpcaResult(L_factors=(us, v), S_sparse=sparse, error_history=history)


def godec(a: np.ndarray, rank: int, card: int, max_iters: int = 100, rel_tol: float = 1e-7, seed: int = 0) -> RpcaResult:
    """Alternate exact sparse and low-rank projections. ``card`` is the exact
    nonzero budget of the sparse part.

    Two starts are run and the lower-error result returned: the sparse-first
    pass (L0 = 0, so the first sparse step sees the raw matrix) and a
    low-rank-first pass (L0 = best rank-r fit of the matrix). Each start is
    individually monotone, and together they pin the result to at most the
    better of the two pure endpoints at the same budget.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if rank > min(m, n):
        raise ArgumentError(f"rank {rank} exceeds min{a.shape}")
    if card > m * n:
        raise ArgumentError(f"sparse budget {card} exceeds matrix size {m * n}")
    rng = substream(seed, STREAM_SVD)

    best = _alternate(a, rank, card, max_iters, rel_tol, rng, np.zeros((m, n)))
    if rank > 0 and card > 0:
        us0, v0 = _rank_r_fit(a, rank, rng)
        alt = _alternate(a, rank, card, max_iters, rel_tol, rng, us0 @ v0.T)
        if alt.error < best.error:
            best = alt
    return best


def decompose(a: np.ndarray, config: RpcaConfig, seed: int = 0) -> RpcaResult:
    """RPCA approximation of ``a`` with the budget given by config."""
    a = np.asarray(a, dtype=np.float64)
    card = int(np.floor(config.density * a.shape[0] * a.shape[1]))
    return godec(a, config.rank, card, config.max_iters, config.rel_tol, seed=seed)


def error_grid(a: np.ndarray, ranks, densities, max_iters: int = 100, rel_tol: float = 1e-7, seed: int = 0) -> np.ndarray:
    """errors[i][j] = final decomposition error at (ranks[i], densities[j]).
    Each cell is an independent run."""
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros((len(ranks), len(densities)))
    for i, r in enumerate(ranks):
        for j, d in enumerate(densities):
            cfg = RpcaConfig(rank=int(r), density=float(d), max_iters=max_iters, rel_tol=rel_tol)
            out[i, j] = decompose(a, cfg, seed=seed).error
    return out


def equal_budget_slice(a: np.ndarray, budget: int, points: int = 9, max_iters: int = 100, rel_tol: float = 1e-7, seed: int = 0):
    """Trade-off curve at a fixed parameter budget.

    For each split rho in [0, 1], rank = floor(rho * budget / (m + n)) and
    the sparse part gets the remaining budget as nonzeros. Returns a list of
    (rank, density, error) tuples.
    """
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    if budget > m * n:
        raise ArgumentError(f"budget {budget} exceeds matrix size {m * n}")
    if points < 2:
        raise ArgumentError("points must be >= 2 to include both endpoints")
    curve = []
    for rho in np.linspace(0.0, 1.0, points):
        r = min(int(rho * budget / (m + n)), min(m, n))
        card = budget - r * (m + n)
        res = godec(a, r, card, max_iters, rel_tol, seed=seed)
        curve.append((r, card / (m * n), res.error))
    return curve


def singular_spectrum(a: np.ndarray, k: int) -> np.ndarray:
    """Top-k singular values, non-increasing."""
    a = np.asarray(a, dtype=np.float64)
    if k > min(a.shape):
        raise ArgumentError(f"k={k} exceeds min{a.shape}")
    if min(a.shape) <= EXACT_SVD_MAX_DIM:
        _, s, _ = svd_truncate_exact(a, k)
    else:
        _, s, _ = truncated_svd(a, k)
    return s
