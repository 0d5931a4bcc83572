"""Desk-scale models with hand-written backward passes.

Two kinds: a plain MLP (used by the teacher-student regression task) and a
tiny decoder-only character LM. Every fully connected weight is either a
trainable dense matrix (full fine-tuning) or a frozen base wrapped in a
:class:`~rosakit.adapters.RosaLinear`. Embeddings, positional tables and
layer norms train only in full fine-tuning; in adapter modes they stay
frozen, matching the convention that only FC weights are adapted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapters import RosaLinear, init_lowrank, init_sparse
from .errors import ArgumentError, ShapeError, StateError
from .quant import quantize, quantized_layer_grad
from .sparse import CsrMatrix
from .tensor import STREAM_INIT, substream


@dataclass
class ModelSpec:
    """Architecture description. kind: 'mlp' or 'tiny_decoder_lm'."""

    kind: str = "mlp"
    layer_dims: tuple = (32, 32)  # mlp: sizes of the linear chain
    activation: str = "tanh"
    d_model: int = 32  # lm fields
    n_heads: int = 2
    n_layers: int = 2
    vocab: int = 64
    context: int = 32

    def fc_shapes(self):
        """Shapes of every fully connected weight, in model order."""
        if self.kind == "mlp":
            dims = list(self.layer_dims)
            return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        if self.kind == "tiny_decoder_lm":
            d = self.d_model
            shapes = []
            for _ in range(self.n_layers):
                shapes += [(d, d)] * 4 + [(d, 4 * d), (4 * d, d)]
            shapes.append((d, self.vocab))
            return shapes
        raise ArgumentError(f"unknown model kind {self.kind!r}")


@dataclass
class Param:
    """A trainable array and its in-place gradient accumulator."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)


class DenseLinear:
    """Fully trainable linear layer (full fine-tuning path), no bias."""

    def __init__(self, name: str, w: np.ndarray):
        self.name = name
        self.param = Param(f"{name}.W", np.asarray(w))
        self.weight_grad_hook = None
        self._x = None

    @property
    def shape(self):
        return self.param.value.shape

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.param.value

    def backward(self, d_o):
        if self._x is None:
            raise StateError(f"{self.name}: backward before forward")
        g = self._x.T @ d_o
        self.param.grad += g
        if self.weight_grad_hook is not None:
            self.weight_grad_hook(self.name, g)
        return d_o @ self.param.value.T

    def params(self):
        return [self.param]


class AdaptedLinear:
    """RosaLinear plus gradient buffers for its trainable groups."""

    def __init__(self, name: str, rosa: RosaLinear):
        self.name = name
        self.rosa = rosa
        self.weight_grad_hook = None
        self._cache = None
        self._params = None
        self._rebuild_params()

    def _rebuild_params(self):
        self._params = [
            Param(f"{self.name}.{pname}", arr) for pname, arr in self.rosa.trainable_arrays()
        ]

    @property
    def shape(self):
        return self.rosa.shape

    def attach_sparse(self, mask: CsrMatrix):
        if self.rosa.sparse is not None:
            raise StateError(f"{self.name}: sparse adapter already attached")
        self.rosa.sparse = init_sparse(mask, dtype=self.rosa.dtype)
        self._rebuild_params()

    def detach_sparse(self):
        self.rosa.sparse = None
        self._rebuild_params()

    def forward(self, x, training=False, rng=None):
        o, self._cache = self.rosa.forward(x, training=training, rng=rng)
        return o

    def backward(self, d_o):
        if self._cache is None:
            raise StateError(f"{self.name}: backward before forward")
        d_x, d_b, d_a, d_sparse = self.rosa.backward(self._cache, d_o)
        grads = []
        if self.rosa.lowrank is not None:
            grads += [d_b, d_a]
        if self.rosa.sparse is not None:
            grads.append(d_sparse)
        for p, g in zip(self._params, grads):
            p.grad += g
        if self.weight_grad_hook is not None:
            self.weight_grad_hook(self.name, quantized_layer_grad(self._cache.x, d_o))
        return d_x

    def params(self):
        return list(self._params)


class Embedding:
    """Lookup table; trainable only under full fine-tuning."""

    def __init__(self, name, table, trainable):
        self.name = name
        self.trainable = trainable
        self.param = Param(f"{name}.table", np.asarray(table))
        self._ids = None

    def forward(self, ids):
        self._ids = ids
        return self.param.value[ids]

    def backward(self, d_out):
        if self.trainable:
            np.add.at(self.param.grad, self._ids, d_out)

    def params(self):
        return [self.param] if self.trainable else []


class LayerNorm:
    def __init__(self, name, dim, dtype, trainable, eps=1e-5):
        self.name = name
        self.eps = eps
        self.trainable = trainable
        self.gamma = Param(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(dim, dtype=dtype))
        self._cache = None

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        self._cache = (xhat, inv)
        return xhat * self.gamma.value + self.beta.value

    def backward(self, d_out):
        xhat, inv = self._cache
        if self.trainable:
            self.gamma.grad += (d_out * xhat).sum(axis=tuple(range(d_out.ndim - 1)))
            self.beta.grad += d_out.sum(axis=tuple(range(d_out.ndim - 1)))
        dxhat = d_out * self.gamma.value
        n = xhat.shape[-1]
        # d x of (x - mu) / sigma with mu, sigma over the last axis
        return (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        ) * inv

    def params(self):
        return [self.gamma, self.beta] if self.trainable else []


def _act_forward(kind, z):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0)
    raise ArgumentError(f"unknown activation {kind!r}")


def _act_backward(kind, z, a, d_a):
    if kind == "tanh":
        return d_a * (1.0 - a * a)
    if kind == "relu":
        return d_a * (z > 0)
    raise ArgumentError(f"unknown activation {kind!r}")


class MlpModel:
    """Linear chain with an elementwise activation between layers."""

    def __init__(self, spec: ModelSpec, fc_layers):
        self.spec = spec
        self.fc = fc_layers
        self._acts = None

    def forward(self, x, training=False, rng=None):
        self._acts = []
        h = x
        for i, layer in enumerate(self.fc):
            h = layer.forward(h, training=training, rng=rng)
            if i < len(self.fc) - 1:
                z = h
                h = _act_forward(self.spec.activation, z)
                self._acts.append((z, h))
        return h

    def backward(self, d_out):
        d = d_out
        for i in range(len(self.fc) - 1, -1, -1):
            if i < len(self.fc) - 1:
                z, a = self._acts[i]
                d = _act_backward(self.spec.activation, z, a, d)
            d = self.fc[i].backward(d)
        return d

    def fc_layers(self):
        return [(layer.name, layer) for layer in self.fc]

    def adapted_layers(self):
        return [(layer.name, layer.rosa) for layer in self.fc if isinstance(layer, AdaptedLinear)]

    def params(self):
        return [p for layer in self.fc for p in layer.params()]

    def zero_grads(self):
        for p in self.params():
            p.grad[...] = 0


class _DecoderBlock:
    def __init__(self, idx, d_model, n_heads, dtype, ln_trainable, make_fc):
        if d_model % n_heads:
            raise ArgumentError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.ln1 = LayerNorm(f"block{idx}.ln1", d_model, dtype, ln_trainable)
        self.ln2 = LayerNorm(f"block{idx}.ln2", d_model, dtype, ln_trainable)
        self.wq = make_fc(f"block{idx}.attn.wq")
        self.wk = make_fc(f"block{idx}.attn.wk")
        self.wv = make_fc(f"block{idx}.attn.wv")
        self.wo = make_fc(f"block{idx}.attn.wo")
        self.w1 = make_fc(f"block{idx}.ff.w1")
        self.w2 = make_fc(f"block{idx}.ff.w2")
        self._cache = None

    def _split_heads(self, x, B, T):
        return x.reshape(B, T, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def forward(self, x, training, rng):
        B, T, D = x.shape
        h1 = self.ln1.forward(x)
        flat = h1.reshape(B * T, D)
        q = self._split_heads(self.wq.forward(flat, training, rng), B, T)
        k = self._split_heads(self.wk.forward(flat, training, rng), B, T)
        v = self._split_heads(self.wv.forward(flat, training, rng), B, T)
        att = q @ k.transpose(0, 1, 3, 2) / np.asarray(np.sqrt(self.head_dim), dtype=x.dtype)
        causal = np.triu(np.ones((T, T), dtype=bool), k=1)
        att = np.where(causal, np.asarray(-np.inf, dtype=x.dtype), att)
        att = att - att.max(axis=-1, keepdims=True)
        p = np.exp(att)
        p = p / p.sum(axis=-1, keepdims=True)
        ctx = p @ v
        ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(B * T, D)
        attn_out = self.wo.forward(ctx_flat, training, rng).reshape(B, T, D)
        x1 = x + attn_out

        h2 = self.ln2.forward(x1)
        z = self.w1.forward(h2.reshape(B * T, D), training, rng)
        a = _act_forward("relu", z)
        f = self.w2.forward(a, training, rng).reshape(B, T, D)
        self._cache = (B, T, D, q, k, v, p, z, a)
        return x1 + f

    def backward(self, d_out):
        B, T, D, q, k, v, p, z, a = self._cache
        # feed-forward branch
        d_f = d_out.reshape(B * T, D)
        d_a = self.w2.backward(d_f)
        d_z = _act_backward("relu", z, a, d_a)
        d_h2 = self.w1.backward(d_z).reshape(B, T, D)
        d_x1 = d_out + self.ln2.backward(d_h2)

        # attention branch
        d_attn_out = d_x1.reshape(B * T, D)
        d_ctx_flat = self.wo.backward(d_attn_out)
        d_ctx = d_ctx_flat.reshape(B, T, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)
        d_p = d_ctx @ v.transpose(0, 1, 3, 2)
        d_v = p.transpose(0, 1, 3, 2) @ d_ctx
        d_att = p * (d_p - (d_p * p).sum(axis=-1, keepdims=True))
        d_att = d_att / np.asarray(np.sqrt(self.head_dim), dtype=d_out.dtype)
        d_q = d_att @ k
        d_k = d_att.transpose(0, 1, 3, 2) @ q

        def merge(h):
            return h.transpose(0, 2, 1, 3).reshape(B * T, D)

        d_h1 = self.wq.backward(merge(d_q))
        d_h1 = d_h1 + self.wk.backward(merge(d_k))
        d_h1 = d_h1 + self.wv.backward(merge(d_v))
        return d_x1 + self.ln1.backward(d_h1.reshape(B, T, D))

    def fc(self):
        return [self.wq, self.wk, self.wv, self.wo, self.w1, self.w2]

    def lns(self):
        return [self.ln1, self.ln2]


class CharLmModel:
    """Decoder-only transformer over characters. Causal, no biases."""

    def __init__(self, spec: ModelSpec, tok_emb, pos_emb, blocks, ln_f, lm_head):
        self.spec = spec
        self.tok_emb = tok_emb
        self.pos_emb = pos_emb
        self.blocks = blocks
        self.ln_f = ln_f
        self.lm_head = lm_head
        self._shape = None

    def forward(self, ids, training=False, rng=None):
        if ids.ndim != 2 or ids.shape[1] > self.spec.context:
            raise ShapeError(f"ids {ids.shape} exceed context {self.spec.context}")
        B, T = ids.shape
        self._shape = (B, T)
        x = self.tok_emb.forward(ids) + self.pos_emb.forward(np.arange(T))
        for block in self.blocks:
            x = block.forward(x, training, rng)
        x = self.ln_f.forward(x)
        logits = self.lm_head.forward(x.reshape(B * T, -1), training, rng)
        return logits.reshape(B, T, self.spec.vocab)

    def backward(self, d_logits):
        B, T = self._shape
        d = self.lm_head.backward(d_logits.reshape(B * T, self.spec.vocab))
        d = self.ln_f.backward(d.reshape(B, T, -1))
        for block in reversed(self.blocks):
            d = block.backward(d)
        self.pos_emb.backward(d.sum(axis=0))
        self.tok_emb.backward(d)
        return d

    def fc_layers(self):
        layers = []
        for block in self.blocks:
            layers.extend(block.fc())
        layers.append(self.lm_head)
        return [(layer.name, layer) for layer in layers]

    def adapted_layers(self):
        return [
            (name, layer.rosa) for name, layer in self.fc_layers() if isinstance(layer, AdaptedLinear)
        ]

    def params(self):
        out = self.tok_emb.params() + self.pos_emb.params()
        for block in self.blocks:
            for ln in block.lns():
                out.extend(ln.params())
            for layer in block.fc():
                out.extend(layer.params())
        out.extend(self.ln_f.params())
        out.extend(self.lm_head.params())
        return out

    def zero_grads(self):
        for p in self.params():
            p.grad[...] = 0


def set_weight_grad_hooks(model, hook):
    """Install (or clear, with None) the dense weight-gradient hook on every
    FC layer. The hook receives (layer_name, x.T @ d_o) per backward call."""
    for _, layer in model.fc_layers():
        layer.weight_grad_hook = hook


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all entries; returns (loss, d_pred)."""
    diff = pred - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    d_pred = (2.0 / diff.size) * diff
    return loss, d_pred.astype(pred.dtype)


def softmax_xent_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean per-token cross-entropy; returns (loss, d_logits, n_correct)."""
    orig_shape = logits.shape
    v = orig_shape[-1]
    flat = logits.reshape(-1, v).astype(np.float64)
    tgt = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    n = flat.shape[0]
    loss = float(-np.mean(shifted[np.arange(n), tgt] - np.log(expz.sum(axis=1))))
    d = probs
    d[np.arange(n), tgt] -= 1.0
    d /= n
    n_correct = int(np.count_nonzero(flat.argmax(axis=1) == tgt))
    return loss, d.reshape(orig_shape).astype(logits.dtype), n_correct


def _he_init(rng, m, n, dtype):
    return (rng.standard_normal((m, n)) / np.sqrt(m)).astype(dtype)


def build_base_weights(spec: ModelSpec, seed: int, dtype=np.float32) -> dict:
    """Deterministic base weights for every parameter of the architecture."""
    rng = substream(seed, STREAM_INIT)
    weights = {}
    if spec.kind == "mlp":
        for i, (m, n) in enumerate(spec.fc_shapes()):
            weights[f"fc{i}"] = _he_init(rng, m, n, dtype)
        return weights
    if spec.kind == "tiny_decoder_lm":
        d = spec.d_model
        weights["tok_emb"] = (rng.standard_normal((spec.vocab, d)) * 0.05).astype(dtype)
        weights["pos_emb"] = (rng.standard_normal((spec.context, d)) * 0.05).astype(dtype)
        for i in range(spec.n_layers):
            for tag in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
                weights[f"block{i}.{tag}"] = _he_init(rng, d, d, dtype)
            weights[f"block{i}.ff.w1"] = _he_init(rng, d, 4 * d, dtype)
            weights[f"block{i}.ff.w2"] = _he_init(rng, 4 * d, d, dtype)
        weights["lm_head"] = _he_init(rng, d, spec.vocab, dtype)
        return weights
    raise ArgumentError(f"unknown model kind {spec.kind!r}")


def build_model(
    spec: ModelSpec,
    weights: dict,
    mode: str = "fft",
    rank: int = 0,
    lora_alpha: float = 16.0,
    lora_dropout: float = 0.05,
    adapter_seed: int = 0,
    quantized_base: bool = False,
    group_size: int = 64,
    dtype=np.float32,
):
    """Assemble a model from base weights.

    mode 'fft' yields fully trainable dense layers. The adapter modes wrap
    every FC weight in a frozen RosaLinear: 'lora' and 'rosa' get a
    low-rank adapter now; sparse adapters are attached later, once masks
    exist, via ``AdaptedLinear.attach_sparse``.
    """
    if mode not in ("fft", "lora", "spa", "rosa"):
        raise ArgumentError(f"unknown mode {mode!r}")
    if mode != "fft" and quantized_base is True and dtype != np.float32:
        raise ArgumentError("quantized base implies float32 compute")
    adapter_rng = substream(adapter_seed, STREAM_INIT, 7)

    def make_fc(name):
        w = np.array(weights[name], dtype=dtype)
        if mode == "fft":
            return DenseLinear(name, w)
        base = quantize(w, group_size) if quantized_base else w
        lowrank = None
        if mode in ("lora", "rosa"):
            if rank < 1:
                raise ArgumentError(f"mode {mode!r} needs rank >= 1, got {rank}")
            lowrank = init_lowrank(
                w.shape[0], w.shape[1], rank, adapter_rng,
                lora_alpha=lora_alpha, dropout_p=lora_dropout, dtype=dtype,
            )
        return AdaptedLinear(name, RosaLinear(base, lowrank=lowrank))

    trainable_extras = mode == "fft"
    if spec.kind == "mlp":
        fc = [make_fc(f"fc{i}") for i in range(len(spec.fc_shapes()))]
        return MlpModel(spec, fc)

    tok = Embedding("tok_emb", np.array(weights["tok_emb"], dtype=dtype), trainable_extras)
    pos = Embedding("pos_emb", np.array(weights["pos_emb"], dtype=dtype), trainable_extras)
    blocks = [
        _DecoderBlock(i, spec.d_model, spec.n_heads, dtype, trainable_extras, make_fc)
        for i in range(spec.n_layers)
    ]
    ln_f = LayerNorm("ln_f", spec.d_model, dtype, trainable_extras)
    head = make_fc("lm_head")
    return CharLmModel(spec, tok, pos, blocks, ln_f, head)


def extract_weights(model) -> dict:
    """Current dense weights of the model, merging adapters where present.
    Inverse of build_model for fft; for adapted models this is the deploy
    merge."""
    weights = {}
    for name, layer in model.fc_layers():
        if isinstance(layer, AdaptedLinear):
            weights[name] = layer.rosa.merge()
        else:
            weights[name] = layer.param.value.copy()
    if isinstance(model, CharLmModel):
        weights["tok_emb"] = model.tok_emb.param.value.copy()
        weights["pos_emb"] = model.pos_emb.param.value.copy()
    return weights


def base_weights_of(model) -> dict:
    """The frozen/base dense weights of every FC layer (dequantized)."""
    weights = {}
    for name, layer in model.fc_layers():
        if isinstance(layer, AdaptedLinear):
            weights[name] = np.array(layer.rosa.base_dense(), copy=True)
        else:
            weights[name] = layer.param.value.copy()
    return weights
