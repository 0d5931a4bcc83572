"""Dense linear-algebra substrate.

Row-major 2-D float arrays (numpy ndarrays) are the universal dense carrier
for weights, activations and gradients. Everything here is a pure function;
randomness always flows through an explicit seed or Generator so results are
reproducible across runs and thread counts.
"""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, ShapeError

# Named sub-streams derived from one experiment seed. Keeping the tags fixed
# means adding a new stream never perturbs the existing ones.
STREAM_INIT = 1
STREAM_DATA = 2
STREAM_DROPOUT = 3
STREAM_MASKGEN = 4
STREAM_SVD = 5

SVD_OVERSAMPLE = 8
# below this size the exact LAPACK SVD is as cheap as a sketch and keeps
# singular-value sums accurate for flat spectra too
SVD_EXACT_MAX_DIM = 96


def rng_from_seed(seed: int) -> np.random.Generator:
    """Generator with a stream fully determined by ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def substream(seed: int, *tags: int) -> np.random.Generator:
    """Independent generator for the (seed, tags) combination.

    Streams with different tags are statistically independent, and the same
    (seed, tags) pair always yields the identical draw sequence.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def as_matrix(a, dtype=None) -> np.ndarray:
    a = np.asarray(a, dtype=dtype)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a)))


def topk_abs(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries by absolute value.

    Ties break toward the smallest linear (row-major) index so masks built
    from the result are reproducible. The input may have any shape; the
    returned indices are linear into the flattened array, sorted ascending.
    """
    flat = np.asarray(values).reshape(-1)
    if k > flat.size:
        raise ArgumentError(f"topk_abs: k={k} exceeds {flat.size} entries")
    if k < 0:
        raise ArgumentError(f"topk_abs: k={k} must be non-negative")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    # stable sort on -|v|: equal magnitudes keep ascending-index order
    order = np.argsort(-np.abs(flat), kind="stable")
    idx = order[:k]
    idx.sort()
    return idx


def truncated_svd(
    a: np.ndarray,
    k: int,
    power_iters: int = 4,
    rng: np.random.Generator | int | None = None,
):
    """Rank-k SVD via a randomized range finder plus subspace iteration.

    Returns (U, S, V) with U: m x k, S: k non-increasing singular values,
    V: n x k, such that U @ diag(S) @ V.T is the rank-k approximation.
    Computation is in float64 regardless of input dtype. When the sketch
    width k + oversampling reaches min(m, n) the exact LAPACK SVD is used
    directly (the sketch would span the whole space anyway).
    """
    a = as_matrix(a, dtype=np.float64)
    m, n = a.shape
    if not 0 < k <= min(m, n):
        raise ArgumentError(f"truncated_svd: k={k} not in [1, min{a.shape}]")
    if power_iters < 1:
        raise ArgumentError(f"truncated_svd: power_iters={power_iters} must be >= 1")

    if min(m, n) <= SVD_EXACT_MAX_DIM or k + SVD_OVERSAMPLE >= min(m, n):
        u, s, vt = np.linalg.svd(a, full_matrices=False)
        return u[:, :k], s[:k], vt[:k].T

    if rng is None:
        rng = rng_from_seed(0)
    elif isinstance(rng, (int, np.integer)):
        rng = rng_from_seed(int(rng))

    width = k + SVD_OVERSAMPLE
    omega = rng.standard_normal((n, width))
    q, _ = np.linalg.qr(a @ omega)
    for _ in range(power_iters):
        q, _ = np.linalg.qr(a.T @ q)
        q, _ = np.linalg.qr(a @ q)
    b = q.T @ a
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub
    return u[:, :k], s[:k], vt[:k].T


def svd_truncate_exact(a: np.ndarray, k: int):
    """Exact rank-k truncation via the full LAPACK SVD. Oracle-grade."""
    a = as_matrix(a, dtype=np.float64)
    if not 0 <= k <= min(a.shape):
        raise ArgumentError(f"svd_truncate_exact: k={k} not in [0, min{a.shape}]")
    if k == 0:
        m, n = a.shape
        return np.zeros((m, 0)), np.zeros(0), np.zeros((n, 0))
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return u[:, :k], s[:k], vt[:k].T
