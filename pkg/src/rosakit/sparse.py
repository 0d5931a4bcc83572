"""CSR sparse matrices and the two kernels built on them.

A :class:`CsrMatrix` carries the usual three CSR lists plus ``row_order``,
a permutation of the rows sorted by descending per-row nonzero count
(ties by ascending row index). The order list is what lets the structured
SDDMM schedule work only where work exists.

The sparsity pattern is frozen at construction; only ``values`` may be
rewritten afterwards. That matches fixed-support adapter training, and it
means pattern arrays can be shared between a mask and every kernel output
derived from it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ArgumentError, ShapeError

INDEX_DTYPE = np.int32


@dataclass
class KernelStats:
    """Work accounting filled in by the SDDMM kernels.

    ``madds``: scalar multiply-adds performed.
    ``slots_visited``: output positions the kernel's schedule touched
    (the full m*n grid for the baseline, only stored entries for the
    structured kernel).
    ``rows_visited``: rows the kernel iterated over.
    """

    madds: int = 0
    slots_visited: int = 0
    rows_visited: int = 0


class CsrMatrix:
    """Sparse matrix in CSR form with an auxiliary row order.

    ``values`` is the only mutable field. ``row_offsets``, ``col_indices``
    and ``row_order`` are marked read-only after validation.
    """

    __slots__ = ("rows", "cols", "values", "row_offsets", "col_indices", "row_order")

    def __init__(self, rows, cols, values, row_offsets, col_indices, row_order=None):
        self.rows = int(rows)
        self.cols = int(cols)
        self.values = np.asarray(values)
        self.row_offsets = np.asarray(row_offsets, dtype=INDEX_DTYPE)
        self.col_indices = np.asarray(col_indices, dtype=INDEX_DTYPE)
        self._validate_pattern()
        if row_order is None:
            row_order = _compute_row_order(self.row_offsets)
        self.row_order = np.asarray(row_order, dtype=INDEX_DTYPE)
        for arr in (self.row_offsets, self.col_indices, self.row_order):
            arr.flags.writeable = False

    def _validate_pattern(self):
        nnz = self.values.shape[0]
        off = self.row_offsets
        if off.shape[0] != self.rows + 1 or off[0] != 0 or off[-1] != nnz:
            raise ArgumentError(
                f"row_offsets must run from 0 to nnz={nnz} with {self.rows + 1} entries"
            )
        if np.any(np.diff(off) < 0):
            raise ArgumentError("row_offsets must be non-decreasing")
        if self.col_indices.shape[0] != nnz:
            raise ArgumentError("col_indices length must equal nnz")
        if nnz:
            if self.col_indices.min() < 0 or self.col_indices.max() >= self.cols:
                raise ArgumentError(f"column index out of range for {self.cols} columns")
            for i in range(self.rows):
                row = self.col_indices[off[i] : off[i + 1]]
                if row.size > 1 and np.any(np.diff(row) <= 0):
                    raise ArgumentError(f"columns in row {i} must be strictly increasing")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def density(self) -> float:
        total = self.rows * self.cols
        return self.nnz / total if total else 0.0

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def coo_indices(self):
        """(row_idx, col_idx) arrays in CSR storage order."""
        rows = np.repeat(np.arange(self.rows, dtype=INDEX_DTYPE), self.row_nnz())
        return rows, self.col_indices.copy()

    def with_values(self, values: np.ndarray) -> "CsrMatrix":
        """New matrix sharing this pattern (arrays included) with new values."""
        values = np.asarray(values)
        if values.shape != self.values.shape:
            raise ShapeError(f"values shape {values.shape} != nnz ({self.nnz},)")
        out = CsrMatrix.__new__(CsrMatrix)
        out.rows, out.cols = self.rows, self.cols
        out.values = values
        out.row_offsets = self.row_offsets
        out.col_indices = self.col_indices
        out.row_order = self.row_order
        return out

    def to_dense(self, dtype=None) -> np.ndarray:
        dtype = dtype or self.values.dtype
        dense = np.zeros((self.rows, self.cols), dtype=dtype)
        ri, ci = self.coo_indices()
        dense[ri, ci] = self.values
        return dense

    def copy(self) -> "CsrMatrix":
        return self.with_values(self.values.copy())

    def __repr__(self):
        return f"CsrMatrix({self.rows}x{self.cols}, nnz={self.nnz}, dtype={self.values.dtype})"


@dataclass
class MaskStructureStats:
    pct_empty_rows: float
    pct_empty_cols: float
    max_empty: float = field(init=False)

    def __post_init__(self):
        self.max_empty = max(self.pct_empty_rows, self.pct_empty_cols)


def _compute_row_order(row_offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(row_offsets)
    rows = counts.shape[0]
    # lexsort: last key is primary -> descending count, ties by ascending row
    return np.lexsort((np.arange(rows), -counts)).astype(INDEX_DTYPE)


def csr_from_coo(rows_idx, cols_idx, values, shape, dtype=None) -> CsrMatrix:
    """Build a CsrMatrix from coordinate data. Rejects duplicates and
    out-of-range indices."""
    m, n = int(shape[0]), int(shape[1])
    ri = np.asarray(rows_idx, dtype=np.int64).reshape(-1)
    ci = np.asarray(cols_idx, dtype=np.int64).reshape(-1)
    vals = np.asarray(values)
    if dtype is not None:
        vals = vals.astype(dtype)
    if ri.shape != ci.shape or ri.shape[0] != vals.reshape(-1).shape[0]:
        raise ShapeError("rows, cols and values must have equal length")
    if ri.size:
        if ri.min() < 0 or ri.max() >= m or ci.min() < 0 or ci.max() >= n:
            raise ArgumentError(f"index out of range for shape ({m}, {n})")
    lin = ri * n + ci
    if np.unique(lin).size != lin.size:
        raise ArgumentError("duplicate (row, col) index")
    order = np.argsort(lin, kind="stable")
    ri, ci = ri[order], ci[order]
    vals = vals.reshape(-1)[order]
    row_offsets = np.zeros(m + 1, dtype=np.int64)
    np.add.at(row_offsets, ri + 1, 1)
    row_offsets = np.cumsum(row_offsets)
    return CsrMatrix(m, n, vals, row_offsets, ci)


def csr_from_mask(mask_indices, shape, init_values: float = 0.0, dtype=np.float32) -> CsrMatrix:
    """CSR pattern from a set of (row, col) pairs, every value set to
    ``init_values``."""
    idx = np.asarray(list(mask_indices) if not isinstance(mask_indices, np.ndarray) else mask_indices)
    if idx.size == 0:
        idx = idx.reshape(0, 2)
    if idx.ndim != 2 or idx.shape[1] != 2:
        raise ShapeError(f"mask_indices must be (k, 2) pairs, got shape {idx.shape}")
    vals = np.full(idx.shape[0], init_values, dtype=dtype)
    return csr_from_coo(idx[:, 0], idx[:, 1], vals, shape)


def csr_from_linear(linear_idx, shape, init_values: float = 0.0, dtype=np.float32) -> CsrMatrix:
    """CSR pattern from linear (row-major) indices into the flattened matrix."""
    lin = np.asarray(linear_idx, dtype=np.int64).reshape(-1)
    n = int(shape[1])
    return csr_from_coo(lin // n, lin % n, np.full(lin.size, init_values, dtype=dtype), shape)


def csr_from_dense(dense: np.ndarray) -> CsrMatrix:
    """CSR holding the nonzero entries of a dense matrix."""
    dense = np.asarray(dense)
    ri, ci = np.nonzero(dense)
    return csr_from_coo(ri, ci, dense[ri, ci], dense.shape)


def to_dense(sparse: CsrMatrix, dtype=None) -> np.ndarray:
    return sparse.to_dense(dtype=dtype)


def csr_add(dense: np.ndarray, sparse: CsrMatrix) -> np.ndarray:
    """dense + sparse as a new dense matrix; the input is not mutated."""
    out = np.array(dense, copy=True)
    csr_add_inplace(out, sparse)
    return out


def csr_add_inplace(dense: np.ndarray, sparse: CsrMatrix) -> np.ndarray:
    """In-place variant of :func:`csr_add`, identical numerics."""
    if dense.ndim != 2 or dense.shape != sparse.shape:
        raise ShapeError(f"csr_add: dense {dense.shape} vs sparse {sparse.shape}")
    _kernels.csr_add_into(
        sparse.row_offsets,
        sparse.col_indices,
        sparse.values.astype(dense.dtype, copy=False),
        dense,
    )
    return dense


def _check_sddmm_args(mask: CsrMatrix, x: np.ndarray, g: np.ndarray):
    if x.ndim != 2 or g.ndim != 2:
        raise ShapeError(f"sddmm: x and g must be 2-D, got {x.shape} and {g.shape}")
    if x.shape[0] != g.shape[0]:
        raise ShapeError(f"sddmm: batch dims differ, x {x.shape} vs g {g.shape}")
    if x.shape[1] != mask.rows or g.shape[1] != mask.cols:
        raise ShapeError(
            f"sddmm: mask {mask.shape} expects x (b, {mask.rows}) and g (b, {mask.cols}),"
            f" got {x.shape} and {g.shape}"
        )
    if x.dtype != g.dtype:
        raise ArgumentError(f"sddmm: dtypes differ, {x.dtype} vs {g.dtype}")
    return np.ascontiguousarray(x), np.ascontiguousarray(g)


def sddmm(mask: CsrMatrix, x: np.ndarray, g: np.ndarray, stats: KernelStats | None = None) -> CsrMatrix:
    """Sampled dense-dense matmul: (x.T @ g) evaluated only at the mask support.

    The output shares the mask's pattern arrays. This is the baseline
    kernel: it walks the full output grid row by row.
    """
    x, g = _check_sddmm_args(mask, x, g)
    out = np.zeros(mask.nnz, dtype=x.dtype)
    madds = _kernels.sddmm_full_grid(mask.row_offsets, mask.col_indices, x, g, out)
    if stats is not None:
        stats.madds = int(madds)
        stats.slots_visited = mask.rows * mask.cols
        stats.rows_visited = mask.rows
    return mask.with_values(out)


def sddmm_structured(
    mask: CsrMatrix, x: np.ndarray, g: np.ndarray, stats: KernelStats | None = None
) -> CsrMatrix:
    """Structure-aware SDDMM: identical values to :func:`sddmm`, but work is
    scheduled only over rows with nonzeros (the row_order prefix) and, per
    row, only over the columns present. Multiply-adds performed equal
    nnz * batch exactly.
    """
    x, g = _check_sddmm_args(mask, x, g)
    n_nonempty = int(np.count_nonzero(mask.row_nnz()))
    out = np.zeros(mask.nnz, dtype=x.dtype)
    madds = _kernels.sddmm_row_ordered(
        mask.row_order, n_nonempty, mask.row_offsets, mask.col_indices, x, g, out
    )
    if stats is not None:
        stats.madds = int(madds)
        stats.slots_visited = mask.nnz
        stats.rows_visited = n_nonempty
    return mask.with_values(out)


def structure_stats(mask: CsrMatrix) -> MaskStructureStats:
    """Fractions of fully-empty rows and columns of the mask."""
    counts = mask.row_nnz()
    empty_rows = int(np.count_nonzero(counts == 0))
    col_hit = np.zeros(mask.cols, dtype=bool)
    col_hit[mask.col_indices] = True
    empty_cols = int(mask.cols - np.count_nonzero(col_hit))
    return MaskStructureStats(
        pct_empty_rows=empty_rows / mask.rows if mask.rows else 0.0,
        pct_empty_cols=empty_cols / mask.cols if mask.cols else 0.0,
    )
