"""Training harness: budget allocation, the four training modes, metric
logging, and evaluation.

Modes: full fine-tuning trains every parameter; the adapter modes (lora,
spa, rosa) train only adapter values over frozen bases. The rosa mode runs
the mask protocol first (by default: low-rank warm-up, gradient statistics,
top-k masks, then a full restart from pristine adapter state with a fresh
optimizer and schedule).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import EvalResult, epoch_batches, steps_per_epoch
from .errors import ArgumentError
from .maskgen import MaskGenConfig, run_mask_protocol
from .models import ModelSpec, build_base_weights, build_model
from .optim import AdamW, lr_at, run_steps
from .tensor import STREAM_DATA, STREAM_DROPOUT, substream

MODES = ("fft", "lora", "spa", "rosa")


@dataclass
class TrainConfig:
    mode: str = "rosa"
    quantized: bool = False
    # either an explicit (rank, density) pair or a budget split by rho
    budget: int | None = None
    rank: int | None = None
    density: float | None = None
    rho: float = 0.5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_batches: int = 20  # lr-schedule warmup, in optimizer steps
    batch_size: int = 32  # accumulated from micro-batches of one sample
    epochs: int = 1
    seed: int = 0
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    group_size: int = 64
    maskgen: MaskGenConfig | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ArgumentError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if not 0.0 <= self.rho <= 1.0:
            raise ArgumentError(f"rho must be in [0, 1], got {self.rho}")
        if self.lr <= 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if self.mode != "fft" and self.budget is None and self.rank is None and self.density is None:
            raise ArgumentError("adapter modes need either budget or explicit rank/density")

    def total_steps(self, task) -> int:
        return self.epochs * steps_per_epoch(task.n_train, self.batch_size)


@dataclass
class MetricLog:
    """Per-step training records plus per-eval records."""

    steps: list = field(default_factory=list)  # (step, lr, train_loss)
    evals: list = field(default_factory=list)  # (step, eval_loss, task_metric)

    def log_step(self, step, lr, train_loss):
        if self.steps and step <= self.steps[-1][0]:
            raise ArgumentError("metric steps must be strictly increasing")
        self.steps.append((step, lr, train_loss))

    def log_eval(self, step, result: EvalResult):
        self.evals.append((step, result.eval_loss, result.task_metric))

    @property
    def final_train_loss(self) -> float:
        return self.steps[-1][2] if self.steps else float("nan")

    @property
    def final_eval(self):
        return self.evals[-1] if self.evals else None

    def rows(self):
        """CSV rows: step, lr, train_loss, eval_loss, task_metric (the last
        two empty on non-eval rows)."""
        by_step = {step: (loss, metric) for step, loss, metric in self.evals}
        out = []
        for step, lr, train_loss in self.steps:
            ev = by_step.get(step)
            out.append((step, lr, train_loss, *(ev if ev else (None, None))))
        return out


@dataclass
class TrainResult:
    metrics: MetricLog
    model: object
    rank: int
    density: float
    realized_params: tuple  # (lowrank, sparse)
    base_weights: dict
    masks: dict


def allocate_budget(model_spec: ModelSpec, budget: int, rho: float) -> tuple[int, float]:
    """Split a trainable-parameter budget into a uniform rank and density.

    rank = floor(rho * budget / sum_i (m_i + n_i)); the remaining budget
    becomes sparse density over the total elements. Realized parameters
    never exceed the budget (top-k masks take floor(d * numel) entries).
    """
    shapes = model_spec.fc_shapes()
    sum_dims = sum(m + n for m, n in shapes)
    sum_numel = sum(m * n for m, n in shapes)
    if rho > 0 and budget < max(m + n for m, n in shapes):
        raise ArgumentError(
            f"budget {budget} below the largest layer's m+n ({max(m + n for m, n in shapes)})"
        )
    if budget > sum_numel + sum_dims * min(min(m, n) for m, n in shapes):
        raise ArgumentError(f"budget {budget} exceeds what the model can absorb")
    r = int(np.floor(rho * budget / sum_dims))
    d = (budget - r * sum_dims) / sum_numel
    return r, d


def _resolve_rank_density(config: TrainConfig, model_spec: ModelSpec) -> tuple[int, float]:
    if config.rank is not None or config.density is not None:
        return int(config.rank or 0), float(config.density or 0.0)
    if config.mode == "lora":
        return allocate_budget(model_spec, config.budget, 1.0)[0], 0.0
    if config.mode == "spa":
        return 0, allocate_budget(model_spec, config.budget, 0.0)[1]
    return allocate_budget(model_spec, config.budget, config.rho)


def _maskgen_config(config: TrainConfig, density: float) -> MaskGenConfig:
    default_strategy = "grad_mag_lw" if config.mode == "rosa" else "grad_mag"
    if config.maskgen is None:
        return MaskGenConfig(density=density, strategy=default_strategy, seed=config.seed)
    return replace(config.maskgen, density=density)


def train(config: TrainConfig, model_spec: ModelSpec, task, base_weights=None, fft_delta=None) -> TrainResult:
    """Run one training configuration end to end.

    ``base_weights`` overrides the deterministic seed-derived base (the
    teacher-student task plants its own). ``fft_delta`` feeds the ltm mask
    strategy. Fully deterministic given the config seed.
    """
    rank, density = _resolve_rank_density(config, model_spec)
    if config.mode == "rosa" and density <= 0.0:
        raise ArgumentError(
            "rosa with density 0 is degenerate: the sparse adapter would be empty; use mode=lora"
        )
    if config.mode == "rosa" and rank < 1:
        raise ArgumentError("rosa needs rank >= 1; use mode=spa for a pure sparse adapter")

    if base_weights is None:
        base_weights = build_base_weights(model_spec, config.seed)
    model = build_model(
        model_spec,
        base_weights,
        mode=config.mode,
        rank=rank,
        lora_alpha=config.lora_alpha,
        lora_dropout=config.lora_dropout,
        adapter_seed=config.seed,
        quantized_base=config.quantized,
        group_size=config.group_size,
    )

    masks = {}
    if config.mode in ("spa", "rosa"):
        mg = _maskgen_config(config, density)
        masks = run_mask_protocol(model, task, mg, train_config=config, fft_delta=fft_delta)
        for name, layer in model.fc_layers():
            layer.attach_sparse(masks[name])

    if config.budget is not None and config.mode != "fft":
        realized = _realized_params(model)
        if sum(realized) > config.budget:
            raise ArgumentError(
                f"realized adapter parameters {sum(realized)} exceed budget {config.budget}"
            )

    optimizer = AdamW(
        model.params(),
        peak_lr=config.lr,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
        weight_decay=config.weight_decay,
    )
    total = config.total_steps(task)
    data_rng = substream(config.seed, STREAM_DATA)
    dropout_rng = substream(config.seed, STREAM_DROPOUT)
    metrics = MetricLog()

    for epoch in range(config.epochs):
        batches = epoch_batches(task.n_train, config.batch_size, 1, data_rng)
        run_steps(
            model,
            task,
            optimizer,
            lr_fn=lambda step: lr_at(step, config.warmup_batches, total, config.lr),
            batch_iter=batches,
            dropout_rng=dropout_rng,
            on_step=metrics.log_step,
        )
        metrics.log_eval(optimizer.step_count, task.evaluate(model))

    return TrainResult(
        metrics=metrics,
        model=model,
        rank=rank,
        density=density,
        realized_params=_realized_params(model),
        base_weights=base_weights,
        masks=masks,
    )


def _realized_params(model) -> tuple[int, int]:
    low = sp = 0
    for _, rosa in model.adapted_layers():
        lo, s = rosa.param_count()
        low += lo
        sp += s
    return low, sp


def evaluate(model, task) -> EvalResult:
    """Task metric of a model: MSE for regression, per-token cross-entropy
    plus next-character exact-match for the LM task."""
    return task.evaluate(model)
