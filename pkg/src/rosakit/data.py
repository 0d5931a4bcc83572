"""Desk-scale tasks: teacher-student regression with a planted low-rank +
sparse weight delta, and next-character prediction on a small text corpus.

A task bundles data with its loss so the trainer and the mask-generation
warm-up can drive any model through one interface:

    inputs, targets = task.batch(indices)
    loss, d_out = task.loss_and_grad(model, inputs, targets, training, rng)
    model.backward(d_out)
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import ArgumentError
from .models import mse_loss, softmax_xent_loss
from .tensor import substream

BUNDLED_CORPUS = "corpus.txt"


@dataclass
class EvalResult:
    eval_loss: float
    task_metric: float


@dataclass
class PlantedDelta:
    """Ground truth of the teacher-student construction, for oracles."""

    w_base: np.ndarray
    delta_lowrank: np.ndarray
    delta_sparse: np.ndarray
    spike_linear_idx: np.ndarray

    @property
    def w_target(self) -> np.ndarray:
        return self.w_base + self.delta_lowrank + self.delta_sparse


class RegressionTask:
    """Fixed design matrix, squared-error loss."""

    kind = "regression"

    def __init__(self, x_train, y_train, x_eval, y_eval):
        self.x_train = x_train
        self.y_train = y_train
        self.x_eval = x_eval
        self.y_eval = y_eval

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    def batch(self, indices):
        return self.x_train[indices], self.y_train[indices]

    def loss_and_grad(self, model, inputs, targets, training=False, rng=None):
        pred = model.forward(inputs, training=training, rng=rng)
        return mse_loss(pred, targets)

    def evaluate(self, model) -> EvalResult:
        pred = model.forward(self.x_eval, training=False)
        loss, _ = mse_loss(pred, self.y_eval)
        return EvalResult(eval_loss=loss, task_metric=loss)


def make_teacher_student(
    seed: int,
    m: int = 32,
    n: int = 32,
    n_train: int = 4096,
    n_eval: int = 512,
    planted_rank: int = 2,
    spike_density: float = 0.01,
    spike_scale: float = 8.0,
    dtype=np.float32,
):
    """Teacher-student regression whose target weight differs from the base
    by a planted rank-``planted_rank`` matrix plus spikes of magnitude
    ``spike_scale`` times the mean low-rank entry on ``spike_density`` of
    the entries.

    The planting is incoherent in the robust-PCA sense: spikes occupy
    distinct rows and columns and sit where the low-rank part is small, so
    neither planted component can masquerade as the other. Inputs are
    heavy-tailed (unit-variance Laplace), which sharpens per-entry
    gradient statistics relative to the rank-one smear a single sample's
    x x^T applies to the weight gradient.

    Returns (task, planted) where planted records the ground truth.
    """
    rng = substream(seed, 11)
    w_base = (rng.standard_normal((m, n)) / np.sqrt(m)).astype(np.float64)
    u = rng.standard_normal((m, planted_rank))
    v = rng.standard_normal((planted_rank, n))
    delta_l = (u @ v) / np.sqrt(m)
    n_spikes = max(1, int(np.floor(spike_density * m * n)))
    low_mag = np.abs(delta_l) < np.median(np.abs(delta_l))
    rows_left, cols_left = np.ones(m, dtype=bool), np.ones(n, dtype=bool)
    chosen = []
    while len(chosen) < n_spikes:
        i = int(rng.integers(m))
        j = int(rng.integers(n))
        if rows_left[i] and cols_left[j] and low_mag[i, j]:
            rows_left[i] = cols_left[j] = False
            chosen.append(i * n + j)
    lin = np.sort(np.asarray(chosen, dtype=np.int64))
    delta_s = np.zeros((m, n))
    delta_s.flat[lin] = spike_scale * np.abs(delta_l).mean() * rng.choice([-1.0, 1.0], n_spikes)
    planted = PlantedDelta(
        w_base=w_base.astype(dtype),
        delta_lowrank=delta_l.astype(dtype),
        delta_sparse=delta_s.astype(dtype),
        spike_linear_idx=lin,
    )
    w_target = planted.w_target.astype(np.float64)
    x_all = rng.laplace(0.0, 1.0 / np.sqrt(2.0), size=(n_train + n_eval, m))
    y_all = x_all @ w_target
    x_all = x_all.astype(dtype)
    y_all = y_all.astype(dtype)
    task = RegressionTask(
        x_train=x_all[:n_train], y_train=y_all[:n_train],
        x_eval=x_all[n_train:], y_eval=y_all[n_train:],
    )
    return task, planted


class CharLmTask:
    """Next-character prediction over a fixed context window."""

    kind = "char_lm"

    def __init__(self, text: str, context: int, eval_fraction: float = 0.1, max_eval_windows: int = 256):
        if len(text) <= context + 1:
            raise ArgumentError(f"corpus of {len(text)} chars too short for context {context}")
        self.context = context
        self.chars = sorted(set(text))
        self.vocab = len(self.chars)
        lookup = {c: i for i, c in enumerate(self.chars)}
        self.ids = np.fromiter((lookup[c] for c in text), dtype=np.int64, count=len(text))
        starts = np.arange(len(self.ids) - context - 1)
        n_eval = max(1, int(eval_fraction * starts.size))
        self.train_starts = starts[:-n_eval]
        eval_starts = starts[-n_eval:]
        if eval_starts.size > max_eval_windows:
            stride = eval_starts.size // max_eval_windows
            eval_starts = eval_starts[::stride][:max_eval_windows]
        self.eval_starts = eval_starts

    @property
    def n_train(self) -> int:
        return self.train_starts.size

    def _windows(self, starts):
        offs = np.arange(self.context)
        ids = self.ids[starts[:, None] + offs[None, :]]
        targets = self.ids[starts[:, None] + offs[None, :] + 1]
        return ids, targets

    def batch(self, indices):
        return self._windows(self.train_starts[np.asarray(indices)])

    def loss_and_grad(self, model, inputs, targets, training=False, rng=None):
        logits = model.forward(inputs, training=training, rng=rng)
        loss, d_logits, _ = softmax_xent_loss(logits, targets)
        return loss, d_logits

    def evaluate(self, model, batch_windows: int = 32) -> EvalResult:
        total_loss = 0.0
        total_correct = 0
        total_tokens = 0
        for lo in range(0, self.eval_starts.size, batch_windows):
            ids, targets = self._windows(self.eval_starts[lo : lo + batch_windows])
            logits = model.forward(ids, training=False)
            loss, _, n_correct = softmax_xent_loss(logits, targets)
            n_tok = targets.size
            total_loss += loss * n_tok
            total_correct += n_correct
            total_tokens += n_tok
        return EvalResult(
            eval_loss=total_loss / total_tokens,
            task_metric=total_correct / total_tokens,
        )


def load_corpus_text(path: str | None = None) -> str:
    """UTF-8 text for the character LM; the bundled public-domain corpus
    when no path is given."""
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    return resources.files("rosakit").joinpath("data", BUNDLED_CORPUS).read_text(encoding="utf-8")


def epoch_batches(n_items: int, batch_size: int, epochs: int, rng: np.random.Generator):
    """Yield shuffled index batches; partial tail batches are dropped."""
    for _ in range(epochs):
        perm = rng.permutation(n_items)
        for lo in range(0, n_items - batch_size + 1, batch_size):
            yield perm[lo : lo + batch_size]


def steps_per_epoch(n_items: int, batch_size: int) -> int:
    return n_items // batch_size
