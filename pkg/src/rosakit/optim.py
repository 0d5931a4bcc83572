"""AdamW with decoupled weight decay, the linear warmup/decay schedule, and
the micro-batched step engine shared by training and the mask warm-up."""

from __future__ import annotations

import numpy as np

from .errors import ArgumentError, NumericError


def lr_at(step: int, warmup: int, total_steps: int, peak_lr: float) -> float:
    """Linear ramp 0 -> peak over ``warmup`` steps, then linear decay to 0
    at ``total_steps``."""
    if step < 0:
        raise ArgumentError(f"step must be >= 0, got {step}")
    if step <= warmup:
        return peak_lr * step / warmup if warmup > 0 else peak_lr
    if step >= total_steps:
        return 0.0
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def adamw_step(params, grads, state, step_index: int, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0):
    """One AdamW update over parallel lists of arrays, in place.

    ``state`` is a dict with "m" and "v" lists matching ``params``; pass an
    empty dict to initialize. ``step_index`` starts at 1 for the first
    update (it drives bias correction).
    """
    if step_index < 1:
        raise ArgumentError(f"step_index must be >= 1, got {step_index}")
    if not state:
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        m_hat = m / bc1
        v_hat = v / bc2
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= np.asarray(lr * update, dtype=p.dtype)
    return params, state


class AdamW:
    """Stateful wrapper around :func:`adamw_step` for a list of Params."""

    def __init__(self, params, peak_lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.peak_lr = peak_lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict = {}
        self.step_count = 0

    def step(self, lr: float):
        self.step_count += 1
        adamw_step(
            [p.value for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.step_count,
            lr,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )

    def zero_grads(self):
        for p in self.params:
            p.grad[...] = 0


def run_steps(model, task, optimizer: AdamW, lr_fn, batch_iter, dropout_rng, on_step=None):
    """Drive optimizer steps with micro-batch-1 gradient accumulation.

    Each batch of indices is processed one sample at a time; per-sample
    gradients are summed in ascending sample order and averaged before the
    update, so the result matches a single batched step up to f32 summation
    order. ``on_step(step, lr, mean_loss)`` is invoked after each update.
    """
    for batch_indices in batch_iter:
        model.zero_grads()
        loss_sum = 0.0
        for idx in batch_indices:
            inputs, targets = task.batch(np.asarray([idx]))
            loss, d_out = task.loss_and_grad(model, inputs, targets, training=True, rng=dropout_rng)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss {loss} at step {optimizer.step_count + 1}")
            model.backward(d_out)
            loss_sum += loss
        inv = 1.0 / len(batch_indices)
        for p in optimizer.params:
            p.grad *= np.asarray(inv, dtype=p.grad.dtype)
        lr = lr_fn(optimizer.step_count + 1)
        optimizer.step(lr)
        if on_step is not None:
            on_step(optimizer.step_count, lr, loss_sum * inv)
