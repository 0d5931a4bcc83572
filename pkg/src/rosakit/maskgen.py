"""Sparsity-mask generation.

The flagship strategy warms up a low-rank adapter for a fixed number of
batches, accumulates per-sample weight-gradient statistics on the warmed
model, takes the per-layer magnitude top-k, and then throws the warm-up
state away: training restarts from pristine initialization with the masks
fixed. The remaining strategies cover the ablation grid: gradient
statistics at initialization, the sparse RPCA component of the weights or
of the accumulated gradients, a hindsight mask from a full fine-tuning
delta, and a uniform random mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, StateError
from .models import set_weight_grad_hooks
from .optim import AdamW, lr_at, run_steps
from .sparse import CsrMatrix, csr_from_linear
from .rpca import godec
from .tensor import STREAM_DATA, STREAM_DROPOUT, STREAM_MASKGEN, substream, topk_abs

STRATEGIES = ("grad_mag_lw", "grad_mag", "grad_rpca", "weight_rpca", "ltm", "random")


@dataclass
class MaskGenConfig:
    density: float
    num_samples: int = 32
    alpha: int = 2
    warmup_batches: int = 64
    strategy: str = "grad_mag_lw"
    seed: int = 0
    # rank of the RPCA decompositions behind the *_rpca / ltm strategies
    rpca_rank: int = 8
    rpca_max_iters: int = 100

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise ArgumentError(f"density must be in (0, 1], got {self.density}")
        if self.num_samples < 1:
            raise ArgumentError(f"num_samples must be >= 1, got {self.num_samples}")
        if self.alpha not in (1, 2):
            raise ArgumentError(f"alpha must be 1 or 2, got {self.alpha}")
        if self.strategy not in STRATEGIES:
            raise ArgumentError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")


@dataclass
class GradStats:
    """Per-layer accumulated weight-gradient statistics."""

    per_layer: dict = field(default_factory=dict)

    def layers(self):
        return list(self.per_layer.items())


def mask_cardinality(density: float, m: int, n: int) -> int:
    """floor(d * numel), clamped to at least one entry."""
    return max(1, int(np.floor(density * m * n)))


def accumulate_grad_stats(model, task, sample_indices, alpha: int, signed: bool = False) -> GradStats:
    """Accumulate per-sample weight gradients, one sample at a time.

    With signed=False the accumulator is sum |g|^alpha (alpha=1 magnitude
    averaging, alpha=2 the diagonal-Fisher style square); signed=True sums
    the raw gradients, which the RPCA-on-gradients strategy needs. Each
    per-layer gradient is folded into its accumulator as soon as the layer's
    backward produces it, so peak extra memory is one layer's gradient plus
    the accumulator set.
    """
    sample_indices = np.asarray(sample_indices)
    if sample_indices.size == 0:
        raise ArgumentError("accumulate_grad_stats: empty sample subset")
    acc: dict[str, np.ndarray] = {}

    def hook(name, g):
        if name not in acc:
            acc[name] = np.zeros(g.shape, dtype=np.float64)
        if signed:
            acc[name] += g
        elif alpha == 1:
            acc[name] += np.abs(g)
        else:
            acc[name] += np.abs(g.astype(np.float64)) ** alpha

    set_weight_grad_hooks(model, hook)
    try:
        for idx in sample_indices:
            model.zero_grads()
            inputs, targets = task.batch(np.asarray([idx]))
            loss, d_out = task.loss_and_grad(model, inputs, targets, training=False)
            model.backward(d_out)
        model.zero_grads()
    finally:
        set_weight_grad_hooks(model, None)
    return GradStats(per_layer=acc)


def generate_masks(stats: GradStats, density: float) -> dict[str, CsrMatrix]:
    """Per-layer magnitude top-k patterns from accumulated statistics."""
    if not 0.0 < density <= 1.0:
        raise ArgumentError(f"density must be in (0, 1], got {density}")
    masks = {}
    for name, g in stats.layers():
        m, n = g.shape
        k = mask_cardinality(density, m, n)
        masks[name] = csr_from_linear(topk_abs(g, k), (m, n))
    return masks


def _rpca_support_mask(matrix: np.ndarray, density: float, config: MaskGenConfig) -> CsrMatrix:
    m, n = matrix.shape
    k = mask_cardinality(density, m, n)
    rank = min(config.rpca_rank, min(m, n))
    result = godec(matrix, rank, k, max_iters=config.rpca_max_iters, seed=config.seed)
    ri, ci = result.S_sparse.coo_indices()
    return csr_from_linear(ri.astype(np.int64) * n + ci, (m, n))


def _random_masks(model, config: MaskGenConfig) -> dict[str, CsrMatrix]:
    rng = substream(config.seed, STREAM_MASKGEN, 0)
    masks = {}
    for name, layer in model.fc_layers():
        m, n = layer.shape
        k = mask_cardinality(config.density, m, n)
        lin = rng.choice(m * n, size=k, replace=False)
        masks[name] = csr_from_linear(np.sort(lin), (m, n))
    return masks


def _mask_sample_indices(task, config: MaskGenConfig) -> np.ndarray:
    rng = substream(config.seed, STREAM_MASKGEN, 1)
    n = task.n_train
    return rng.choice(n, size=min(config.num_samples, n), replace=False)


def _lora_warmup(model, task, config: MaskGenConfig, train_config) -> None:
    """Train the low-rank adapters alone for warmup_batches optimizer steps."""
    if train_config is None:
        raise ArgumentError("grad_mag_lw needs train hyperparameters for the warm-up")
    lora_params = [
        p for _, layer in model.fc_layers() for p in layer.params()
        if ".lowrank." in p.name
    ]
    if not lora_params:
        raise StateError("grad_mag_lw warm-up requires low-rank adapters on the model")
    opt = AdamW(
        lora_params,
        peak_lr=train_config.lr,
        beta1=train_config.beta1,
        beta2=train_config.beta2,
        eps=train_config.eps,
        weight_decay=train_config.weight_decay,
    )
    total = max(train_config.total_steps(task), config.warmup_batches)
    data_rng = substream(config.seed, STREAM_DATA, 101)
    drop_rng = substream(config.seed, STREAM_DROPOUT, 101)
    batches = (
        data_rng.choice(task.n_train, size=train_config.batch_size, replace=False)
        for _ in range(config.warmup_batches)
    )
    run_steps(
        model, task, opt,
        lr_fn=lambda step: lr_at(step, train_config.warmup_batches, total, train_config.lr),
        batch_iter=batches,
        dropout_rng=drop_rng,
    )


def run_mask_protocol(model, task, config: MaskGenConfig, train_config=None, fft_delta=None) -> dict[str, CsrMatrix]:
    """Produce one mask per FC layer according to the configured strategy.

    For the warm-up strategy the model's adapters are snapshotted first and
    restored afterwards: the caller gets masks plus a model in its pristine
    pre-warm-up state, ready for the training restart.
    """
    strategy = config.strategy
    if strategy == "random":
        return _random_masks(model, config)

    if strategy in ("grad_mag", "grad_mag_lw", "grad_rpca"):
        indices = _mask_sample_indices(task, config)
        if strategy == "grad_mag_lw":
            snapshots = {
                name: layer.rosa.snapshot()
                for name, layer in model.fc_layers()
                if hasattr(layer, "rosa")
            }
            try:
                _lora_warmup(model, task, config, train_config)
                stats = accumulate_grad_stats(model, task, indices, config.alpha)
            finally:
                for name, layer in model.fc_layers():
                    if name in snapshots:
                        layer.rosa.restore(snapshots[name])
            return generate_masks(stats, config.density)
        if strategy == "grad_mag":
            stats = accumulate_grad_stats(model, task, indices, config.alpha)
            return generate_masks(stats, config.density)
        stats = accumulate_grad_stats(model, task, indices, config.alpha, signed=True)
        return {
            name: _rpca_support_mask(g, config.density, config)
            for name, g in stats.layers()
        }

    if strategy == "weight_rpca":
        masks = {}
        for name, layer in model.fc_layers():
            w = layer.rosa.base_dense() if hasattr(layer, "rosa") else layer.param.value
            masks[name] = _rpca_support_mask(np.asarray(w, dtype=np.float64), config.density, config)
        return masks

    if strategy == "ltm":
        if fft_delta is None:
            raise StateError("ltm strategy requires a completed full fine-tuning delta")
        masks = {}
        for name, layer in model.fc_layers():
            if name not in fft_delta:
                raise StateError(f"ltm: full fine-tuning delta missing layer {name!r}")
            masks[name] = _rpca_support_mask(
                np.asarray(fft_delta[name], dtype=np.float64), config.density, config
            )
        return masks

    raise ArgumentError(f"unknown strategy {strategy!r}")
