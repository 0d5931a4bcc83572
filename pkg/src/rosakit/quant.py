"""4-bit group quantization of frozen base weights, with double-quantized
scales.

Symmetric absmax int4: per contiguous row-major group of ``group_size``
entries, scale = absmax / 7 and codes lie in [-7, 7] (-8 unused). The
per-group scales are themselves stored as 8-bit codes against one f32
meta-scale per block of 256 groups (the second quantization level).

Codes are rounded against the *dequantized* scale, which keeps
quantize -> dequantize -> quantize a fixed point: re-quantizing a
dequantized matrix reproduces the identical codes.

Storage accounting is format-exact: 4 bits per weight (packed two per
byte), one byte per group scale, four bytes per block meta-scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ShapeError

DEFAULT_GROUP_SIZE = 64
GROUPS_PER_BLOCK = 256
CODE_MAX = 7  # symmetric int4, -8 unused
SCALE_CODE_MAX = 255


class QuantizedMatrix:
    """Frozen 4-bit base weight. Immutable after construction."""

    __slots__ = ("rows", "cols", "group_size", "codes", "scale_codes", "meta_scales")

    def __init__(self, rows, cols, group_size, codes, scale_codes, meta_scales):
        self.rows = int(rows)
        self.cols = int(cols)
        self.group_size = int(group_size)
        self.codes = np.asarray(codes, dtype=np.int8)
        self.scale_codes = np.asarray(scale_codes, dtype=np.uint8)
        self.meta_scales = np.asarray(meta_scales, dtype=np.float32)
        numel = self.rows * self.cols
        if self.codes.shape != (numel,):
            raise ShapeError(f"codes must have shape ({numel},), got {self.codes.shape}")
        if self.codes.size and (self.codes.min() < -CODE_MAX or self.codes.max() > CODE_MAX):
            raise ArgumentError("codes out of the symmetric int4 range [-7, 7]")
        n_groups = _ceil_div(numel, self.group_size)
        n_blocks = _ceil_div(n_groups, GROUPS_PER_BLOCK)
        if self.scale_codes.shape != (n_groups,):
            raise ShapeError(f"expected {n_groups} scale codes, got {self.scale_codes.shape}")
        if self.meta_scales.shape != (n_blocks,):
            raise ShapeError(f"expected {n_blocks} meta scales, got {self.meta_scales.shape}")
        for arr in (self.codes, self.scale_codes, self.meta_scales):
            arr.flags.writeable = False

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def n_groups(self) -> int:
        return self.scale_codes.shape[0]

    def group_scales(self) -> np.ndarray:
        """Dequantized per-group scales (f32)."""
        meta = np.repeat(self.meta_scales, GROUPS_PER_BLOCK)[: self.n_groups]
        return self.scale_codes.astype(np.float32) * meta

    def dequantize(self) -> np.ndarray:
        scales = np.repeat(self.group_scales(), self.group_size)[: self.codes.size]
        return (self.codes.astype(np.float32) * scales).reshape(self.rows, self.cols)

    def storage_bytes(self) -> dict:
        """Format-exact byte counts per storage component."""
        return {
            "codes": _ceil_div(self.codes.size, 2),
            "scale_codes": self.scale_codes.size,
            "meta_scales": self.meta_scales.size * 4,
        }

    @property
    def bits_used(self) -> int:
        return 8 * sum(self.storage_bytes().values())

    def __repr__(self):
        return f"QuantizedMatrix({self.rows}x{self.cols}, group={self.group_size})"


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def _group_reduce_absmax(flat: np.ndarray, group_size: int) -> np.ndarray:
    n_groups = _ceil_div(flat.size, group_size)
    absmax = np.zeros(n_groups, dtype=np.float64)
    full = (flat.size // group_size) * group_size
    if full:
        absmax[: full // group_size] = np.abs(flat[:full]).reshape(-1, group_size).max(axis=1)
    if full < flat.size:
        absmax[-1] = np.abs(flat[full:]).max()
    return absmax


def quantize(w: np.ndarray, group_size: int = DEFAULT_GROUP_SIZE) -> QuantizedMatrix:
    """Quantize a dense matrix to symmetric int4 with double-quantized scales."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"quantize expects a 2-D matrix, got shape {w.shape}")
    if group_size < 1:
        raise ArgumentError(f"group_size must be >= 1, got {group_size}")
    rows, cols = w.shape
    flat = w.reshape(-1).astype(np.float64)

    scales = _group_reduce_absmax(flat, group_size) / CODE_MAX
    n_groups = scales.size

    # second level: 8-bit scale codes against a per-block f32 meta-scale
    n_blocks = _ceil_div(n_groups, GROUPS_PER_BLOCK)
    meta = np.zeros(n_blocks, dtype=np.float64)
    scale_codes = np.zeros(n_groups, dtype=np.uint8)
    for b in range(n_blocks):
        lo, hi = b * GROUPS_PER_BLOCK, min((b + 1) * GROUPS_PER_BLOCK, n_groups)
        block_max = scales[lo:hi].max()
        if block_max > 0.0:
            unit = np.float32(block_max / SCALE_CODE_MAX)
            meta[b] = unit
            codes_b = np.rint(scales[lo:hi] / float(unit))
            scale_codes[lo:hi] = np.clip(codes_b, 0, SCALE_CODE_MAX).astype(np.uint8)

    meta32 = meta.astype(np.float32)
    deq_scales = scale_codes.astype(np.float32) * np.repeat(meta32, GROUPS_PER_BLOCK)[:n_groups]

    per_entry = np.repeat(deq_scales.astype(np.float64), group_size)[: flat.size]
    codes = np.zeros(flat.size, dtype=np.int8)
    nz = per_entry > 0.0
    codes[nz] = np.clip(np.rint(flat[nz] / per_entry[nz]), -CODE_MAX, CODE_MAX).astype(np.int8)
    return QuantizedMatrix(rows, cols, group_size, codes, scale_codes, meta32)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    return q.dequantize()


def quantized_layer_grad(x: np.ndarray, d_o: np.ndarray) -> np.ndarray:
    """Dense weight-gradient surrogate x.T @ d_o.

    Used only during mask generation over quantized layers, where no
    gradient flows through the int4 codes themselves.
    """
    x = np.asarray(x)
    d_o = np.asarray(d_o)
    if x.ndim != 2 or d_o.ndim != 2 or x.shape[0] != d_o.shape[0]:
        raise ShapeError(f"quantized_layer_grad: batch dims differ, {x.shape} vs {d_o.shape}")
    return x.T @ d_o


@dataclass
class MemoryReport:
    base_bytes: int
    lowrank_bytes: int
    sparse_bytes: int
    optimizer_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.base_bytes + self.lowrank_bytes + self.sparse_bytes + self.optimizer_bytes


def memory_report(model, optimizer_state_per_param: int = 2) -> MemoryReport:
    """Format-exact byte counts per component of an adapted model.

    ``model`` may be anything exposing ``adapted_layers() -> [(name, layer)]``
    or a plain iterable of layers. Optimizer cost assumes
    ``optimizer_state_per_param`` f32 buffers per trainable value (AdamW: 2).
    """
    if hasattr(model, "adapted_layers"):
        layers = [layer for _, layer in model.adapted_layers()]
    else:
        layers = [lay[1] if isinstance(lay, tuple) else lay for lay in model]

    base = lowrank = sparse = trainable = 0
    for layer in layers:
        if getattr(layer, "quantized", False):
            base += sum(layer.base.storage_bytes().values())
        else:
            base += layer.base.nbytes
        if layer.lowrank is not None:
            lowrank += layer.lowrank.B.nbytes + layer.lowrank.A.nbytes
            trainable += layer.lowrank.B.size + layer.lowrank.A.size
        if layer.sparse is not None:
            ds = layer.sparse.delta_s
            sparse += ds.values.nbytes + ds.col_indices.nbytes
            sparse += ds.row_offsets.nbytes + ds.row_order.nbytes
            trainable += ds.nnz
    return MemoryReport(
        base_bytes=int(base),
        lowrank_bytes=int(lowrank),
        sparse_bytes=int(sparse),
        optimizer_bytes=int(optimizer_state_per_param * 4 * trainable),
    )
