"""The adapted linear layer: frozen base weight plus trainable low-rank and
sparse perturbations.

Forward (batch x of shape b x m, weights m x n):

    o = x @ (W + D_s) + scale * ((drop(x) @ B) @ A)

with scale = lora_alpha / r. The low-rank contribution is always computed
factored through the b x r bottleneck; the product B @ A is never
materialized in forward or backward. The sparse value gradient is produced
by the structured SDDMM kernel, never as a dense m x n gradient.

Dropout (inverted, train-time scaling) applies to the low-rank branch input
only; the base and sparse paths always see the raw activations.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, StateError
from .sparse import CsrMatrix, csr_add, sddmm_structured
from .quant import QuantizedMatrix

DEFAULT_LORA_ALPHA = 16.0
DEFAULT_LORA_DROPOUT = 0.05

# Optional allocation trace used by tests to assert that the low-rank path
# never materializes an m x n intermediate. Entries are (path_tag, shape).
_alloc_trace: list | None = None


@contextmanager
def trace_allocations():
    global _alloc_trace
    _alloc_trace = []
    try:
        yield _alloc_trace
    finally:
        _alloc_trace = None


def _track(tag: str, arr: np.ndarray) -> np.ndarray:
    if _alloc_trace is not None:
        _alloc_trace.append((tag, arr.shape))
    return arr


@dataclass
class LowRankAdapter:
    """Trainable pair (B: m x r, A: r x n); effective update scale * B @ A."""

    B: np.ndarray
    A: np.ndarray
    lora_alpha: float = DEFAULT_LORA_ALPHA
    dropout_p: float = DEFAULT_LORA_DROPOUT

    def __post_init__(self):
        if self.B.ndim != 2 or self.A.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"low-rank factors disagree: B {self.B.shape}, A {self.A.shape}")

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def scale(self) -> float:
        return self.lora_alpha / self.rank

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.B.copy(), self.A.copy(), self.lora_alpha, self.dropout_p)


@dataclass
class SparseAdapter:
    """Fixed-support sparse update; only the values train."""

    delta_s: CsrMatrix

    def copy(self) -> "SparseAdapter":
        return SparseAdapter(self.delta_s.copy())


def init_lowrank(
    m: int,
    n: int,
    r: int,
    rng: np.random.Generator,
    lora_alpha: float = DEFAULT_LORA_ALPHA,
    dropout_p: float = DEFAULT_LORA_DROPOUT,
    dtype=np.float32,
) -> LowRankAdapter:
    """B = 0 and A ~ N(0, 1/r): the layer output is unchanged at step 0."""
    a = (rng.standard_normal((r, n)) / np.sqrt(r)).astype(dtype)
    b = np.zeros((m, r), dtype=dtype)
    return LowRankAdapter(B=b, A=a, lora_alpha=lora_alpha, dropout_p=dropout_p)


def init_sparse(mask: CsrMatrix, dtype=np.float32) -> SparseAdapter:
    """Zero-valued sparse adapter on the given (frozen) support."""
    return SparseAdapter(mask.with_values(np.zeros(mask.nnz, dtype=dtype)))


@dataclass
class LayerCache:
    """Activations retained by forward for the backward pass."""

    x: np.ndarray
    x_lr: np.ndarray | None  # post-dropout input of the low-rank branch
    drop_mask: np.ndarray | None  # scaled keep mask, None when dropout inactive
    xb: np.ndarray | None  # drop(x) @ B, the b x r bottleneck


class RosaLinear:
    """One adapted layer: frozen base + optional low-rank and sparse adapters."""

    def __init__(
        self,
        base: np.ndarray | QuantizedMatrix,
        lowrank: LowRankAdapter | None = None,
        sparse: SparseAdapter | None = None,
        bias: np.ndarray | None = None,
    ):
        if isinstance(base, QuantizedMatrix):
            self.quantized = True
            self.shape = (base.rows, base.cols)
            self.dtype = np.dtype(np.float32)
        else:
            base = np.asarray(base)
            if base.ndim != 2:
                raise ShapeError(f"base weight must be 2-D, got {base.shape}")
            base.flags.writeable = False
            self.quantized = False
            self.shape = base.shape
            self.dtype = base.dtype
        self.base = base
        self.bias = bias  # frozen; kept for completeness, not trained
        m, n = self.shape
        if lowrank is not None and (lowrank.B.shape[0] != m or lowrank.A.shape[1] != n):
            raise ShapeError(
                f"low-rank adapter {lowrank.B.shape[0]}x{lowrank.A.shape[1]} vs base {m}x{n}"
            )
        if sparse is not None and sparse.delta_s.shape != (m, n):
            raise ShapeError(f"sparse adapter {sparse.delta_s.shape} vs base {m}x{n}")
        self.lowrank = lowrank
        self.sparse = sparse

    def base_dense(self) -> np.ndarray:
        """The effective dense base weight (dequantized when quantized)."""
        if self.quantized:
            return self.base.dequantize()
        return self.base

    def _effective_weight(self) -> np.ndarray:
        """W_eff + D_s via the CSR-ADD kernel; a per-layer m x n scratch
        (recomputed in backward rather than cached, to honor the streaming
        memory model)."""
        w = self.base_dense()
        if self.sparse is not None:
            w = csr_add(w, self.sparse.delta_s)
        return _track("base", w)

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, LayerCache]:
        m, n = self.shape
        if x.ndim != 2 or x.shape[1] != m:
            raise ShapeError(f"forward: x {x.shape} incompatible with weight {self.shape}")

        o = _track("base", x @ self._effective_weight())
        if self.bias is not None:
            o = o + self.bias

        x_lr = drop_mask = xb = None
        if self.lowrank is not None:
            lr = self.lowrank
            x_lr = x
            if training and lr.dropout_p > 0.0:
                if rng is None:
                    raise StateError("training forward with dropout requires an rng")
                keep = rng.random(x.shape) >= lr.dropout_p
                drop_mask = keep.astype(x.dtype) / np.asarray(1.0 - lr.dropout_p, dtype=x.dtype)
                x_lr = x * drop_mask
            xb = _track("lowrank", x_lr @ lr.B)
            o = o + _track("lowrank", (xb @ lr.A)) * np.asarray(lr.scale, dtype=x.dtype)
        return o, LayerCache(x=x, x_lr=x_lr, drop_mask=drop_mask, xb=xb)

    def backward(self, cache: LayerCache | None, d_o: np.ndarray):
        """Gradients for the inputs and every trainable group.

        Returns (d_x, d_B, d_A, d_sparse_values); entries for absent
        adapters are None.
        """
        if cache is None:
            raise StateError("backward called without a forward cache")
        x = cache.x
        if d_o.shape != (x.shape[0], self.shape[1]):
            raise ShapeError(f"backward: d_o {d_o.shape} vs expected {(x.shape[0], self.shape[1])}")

        d_x = _track("base", d_o @ self._effective_weight().T)

        d_b = d_a = d_sparse = None
        if self.lowrank is not None:
            lr = self.lowrank
            scale = np.asarray(lr.scale, dtype=d_o.dtype)
            t = _track("lowrank", d_o @ lr.A.T)  # b x r
            d_x_lr = _track("lowrank", t @ lr.B.T) * scale
            if cache.drop_mask is not None:
                d_x_lr = d_x_lr * cache.drop_mask
            d_x = d_x + d_x_lr
            d_b = _track("lowrank", cache.x_lr.T @ t) * scale
            d_a = _track("lowrank", cache.xb.T @ d_o) * scale
        if self.sparse is not None:
            d_sparse = sddmm_structured(self.sparse.delta_s, x, d_o).values
        return d_x, d_b, d_a, d_sparse

    def merge(self) -> np.ndarray:
        """Dense W_eff + scale * B @ A + D_s; forward with the merged weight
        matches the adapter forward with dropout disabled."""
        merged = np.array(self.base_dense(), copy=True)
        if self.lowrank is not None:
            lr = self.lowrank
            merged = merged + (lr.B @ lr.A) * np.asarray(lr.scale, dtype=merged.dtype)
        if self.sparse is not None:
            merged = csr_add(merged, self.sparse.delta_s)
        return merged

    def param_count(self) -> tuple[int, int]:
        m, n = self.shape
        lowrank_params = self.lowrank.rank * (m + n) if self.lowrank is not None else 0
        sparse_params = self.sparse.delta_s.nnz if self.sparse is not None else 0
        return lowrank_params, sparse_params

    def trainable_arrays(self):
        """(name, array) pairs the optimizer is allowed to update."""
        out = []
        if self.lowrank is not None:
            out.append(("lowrank.B", self.lowrank.B))
            out.append(("lowrank.A", self.lowrank.A))
        if self.sparse is not None:
            out.append(("sparse.values", self.sparse.delta_s.values))
        return out

    def snapshot(self):
        """Copies of all adapter state, for exact restore after a warm-up."""
        return {name: arr.copy() for name, arr in self.trainable_arrays()}

    def restore(self, snap):
        for name, arr in self.trainable_arrays():
            np.copyto(arr, snap[name])


def forward(layer: RosaLinear, x, training=False, rng=None):
    return layer.forward(x, training=training, rng=rng)


def backward(layer: RosaLinear, cache, d_o):
    return layer.backward(cache, d_o)


def merge(layer: RosaLinear) -> np.ndarray:
    return layer.merge()


def param_count(layer: RosaLinear) -> tuple[int, int]:
    return layer.param_count()
