"""Traced multi-head Transformer encoder classifier built on :mod:`pdeformer.mathcore`.

Images are tokenised by rows (28 tokens of width 28, projected to the model
width); text uses an embedding table plus sinusoidal positions. Layers are
pre-norm: ``z = u + MHA(LN(u))``, ``u' = z + FFN(LN(z))``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import mathcore as mc
from .mathcore import Tensor, as_tensor
from .optim import AdamState, adam_update

IMAGE_SIDE = 28


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream; byte-identical across platforms for a seed."""
    return np.random.Generator(np.random.Philox(int(seed)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def sinusoidal_positions(seq: int, d: int) -> np.ndarray:
    pos = np.arange(seq)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True)
class TransformerConfig:
    layers: int = 4
    d_model: int = 32
    heads: int = 4
    d_ff: int = 0  # 0 means 2 * d_model
    input_width: int = IMAGE_SIDE  # pixels per row, or vocabulary size for text
    classes: int = 10
    modality: str = "image"
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2")
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if self.d_ff < 0 or self.input_width < 1 or self.classes < 1:
            raise ValueError("d_ff, input_width and classes must be positive")
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.d_ff == 0:
            object.__setattr__(self, "d_ff", 2 * self.d_model)

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads


@dataclass
class LayerTrace:
    """Per-layer capture of one forward (and optionally backward) pass.

    ``states`` holds ``layers + 1`` depth states: ``states[0]`` is the input
    embedding and ``states[l]`` is what layer ``l`` hands to the next one.
    ``activations[l]`` is therefore the state layer ``l + 1`` operates on, and
    ``attention[l]`` the attention it computed (``None`` where a layer has none).
    """

    states: list[np.ndarray]
    attention: list[np.ndarray | None]
    grad_magnitude: list[float] | None = None
    grad_groups: list[dict[str, float]] | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.attention)

    @property
    def activations(self) -> list[np.ndarray]:
        return self.states[:-1]

    @property
    def outputs(self) -> list[np.ndarray]:
        return self.states[1:]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def validate(self, tol: float = 1e-9) -> None:
        for l, s in enumerate(self.states):
            if not np.isfinite(s).all():
                raise ValueError(f"state {l} is not finite")
        for l, a in enumerate(self.attention):
            if a is None:
                continue
            if (a < 0).any() or np.abs(a.sum(axis=-1) - 1.0).max() > tol:
                raise ValueError(f"attention rows of layer {l + 1} are not probability vectors")


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ----------------------------------------------------------- building blocks


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int) -> tuple[Tensor, Tensor]:
    """Concat_i softmax(Q_i K_i^T / sqrt(d_k)) V_i, times W^O.

    ``x`` is (seq, d) or (batch, seq, d). Head ``i`` owns columns
    ``i*d_k:(i+1)*d_k`` of ``wq``/``wk``/``wv``. Returns the output and the
    attention weights, shaped (heads, seq, seq) or (batch, heads, seq, seq).
    """
    single = x.ndim == 2
    if single:
        x = mc.reshape(x, (1,) + x.shape)
    b, s, _ = x.shape
    width = wq.shape[1]
    if width % heads:
        raise mc.ShapeError(f"projection width {width} is not divisible by {heads} heads")
    dk = width // heads

    def split(t):
        return mc.transpose(mc.reshape(t, (b, s, heads, dk)), (0, 2, 1, 3))

    q = split(mc.matmul(x, wq))
    k = split(mc.matmul(x, wk))
    v = split(mc.matmul(x, wv))
    scores = mc.scale(mc.matmul(q, mc.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
    attn = mc.softmax(scores, axis=-1)
    ctx = mc.reshape(mc.transpose(mc.matmul(attn, v), (0, 2, 1, 3)), (b, s, width))
    out = mc.matmul(ctx, wo)
    if single:
        out = mc.reshape(out, out.shape[1:])
        attn = mc.reshape(attn, attn.shape[1:])
    return out, attn


def feedforward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    h = mc.relu(mc.add_row(mc.matmul(x, w1), b1))
    return mc.add_row(mc.matmul(h, w2), b2)


def encoder_layer_forward(u: Tensor, p: Mapping[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    a, attn = multi_head_attention(mc.layer_norm(u, p["ln1.g"], p["ln1.b"]),
                                   p["WQ"], p["WK"], p["WV"], p["WO"], heads)
    z = mc.add(u, a)
    f = feedforward(mc.layer_norm(z, p["ln2.g"], p["ln2.b"]), p["W1"], p["b1"], p["W2"], p["b2"])
    return mc.add(z, f), attn


def init_embedding(cfg: TransformerConfig, rng) -> dict[str, np.ndarray]:
    d = cfg.d_model
    if cfg.modality == "image":
        return {"embed.W": uniform_init(rng, (cfg.input_width, d), cfg.input_width),
                "embed.b": np.zeros(d)}
    return {"embed.table": rng.uniform(-1.0, 1.0, size=(cfg.input_width, d))}


def init_head(cfg: TransformerConfig, rng) -> dict[str, np.ndarray]:
    return {"head.W": uniform_init(rng, (cfg.d_model, cfg.classes), cfg.d_model),
            "head.b": np.zeros(cfg.classes)}


def init_attention(d: int, rng) -> dict[str, np.ndarray]:
    return {name: uniform_init(rng, (d, d), d) for name in ("WQ", "WK", "WV", "WO")}


def init_ffn(d: int, d_ff: int, rng) -> dict[str, np.ndarray]:
    return {"W1": uniform_init(rng, (d, d_ff), d), "b1": np.zeros(d_ff),
            "W2": uniform_init(rng, (d_ff, d), d_ff), "b2": np.zeros(d)}


class EmbeddingClassifier:
    """Shared embed / pool / classify plumbing for the Transformer and PDE models."""

    config: TransformerConfig

    def embed_input(self, params: Mapping[str, Tensor], inputs) -> Tensor:
        cfg = self.config
        x = np.asarray(inputs)
        if cfg.modality == "image":
            if x.ndim == 2:
                x = x[None]
            if x.shape[-1] != cfg.input_width:
                raise mc.ShapeError(f"image rows must have width {cfg.input_width}, got {x.shape}")
            if x.min() < 0.0 or x.max() > 1.0:
                raise ValueError("image values must lie in [0, 1]")
            u = mc.matmul(Tensor(x), as_tensor(params["embed.W"]))
            return mc.add_row(u, as_tensor(params["embed.b"]))
        if x.ndim == 1:
            x = x[None]
        if not np.issubdtype(x.dtype, np.integer):
            raise ValueError("token ids must be integers")
        if x.size and (x.min() < 0 or x.max() >= cfg.input_width):
            raise ValueError(f"token id out of range for vocabulary of {cfg.input_width}")
        u = mc.embedding(as_tensor(params["embed.table"]), x)
        pos = np.broadcast_to(sinusoidal_positions(x.shape[1], cfg.d_model), u.shape)
        return mc.add(u, Tensor(pos))

    def classify(self, params: Mapping[str, Tensor], pooled: Tensor) -> Tensor:
        return mc.add_row(mc.matmul(pooled, as_tensor(params["head.W"])), as_tensor(params["head.b"]))

    def encode(self, params, inputs, embed_noise=None) -> tuple[Tensor, LayerTrace]:
        raise NotImplementedError

    def forward_with_trace(self, params, inputs, embed_noise=None) -> tuple[Tensor, LayerTrace]:
        pooled, trace = self.encode(params, inputs, embed_noise)
        return self.classify(params, pooled), trace

    def _embed_with_noise(self, params, inputs, embed_noise) -> Tensor:
        u = self.embed_input(params, inputs)
        if embed_noise is not None:
            u = mc.add(u, Tensor(np.broadcast_to(embed_noise, u.shape)))
        return u

    def embedding_shape(self, inputs) -> tuple[int, ...]:
        x = np.asarray(inputs)
        if self.config.modality == "image":
            x = x[None] if x.ndim == 2 else x
            return x.shape[:2] + (self.config.d_model,)
        x = x[None] if x.ndim == 1 else x
        return x.shape + (self.config.d_model,)


class TransformerModel(EmbeddingClassifier):
    def __init__(self, config: TransformerConfig):
        self.config = config

    def init_params(self, seed: int | None = None) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = make_rng(cfg.seed if seed is None else seed)
        d = cfg.d_model
        params = init_embedding(cfg, rng)
        for l in range(1, cfg.layers + 1):
            layer = init_attention(d, rng)
            layer.update({"ln1.g": np.ones(d), "ln1.b": np.zeros(d),
                          "ln2.g": np.ones(d), "ln2.b": np.zeros(d)})
            layer.update(init_ffn(d, cfg.d_ff, rng))
            params.update({f"layer{l}.{k}": v for k, v in layer.items()})
        params.update(init_head(cfg, rng))
        return params

    def layer_groups(self, params: Mapping[str, object]) -> list[list[str]]:
        return [[k for k in params if k.startswith(f"layer{l}.")]
                for l in range(1, self.config.layers + 1)]

    def encode(self, params, inputs, embed_noise=None):
        u = self._embed_with_noise(params, inputs, embed_noise)
        states = [u.data]
        attention = []
        for l in range(1, self.config.layers + 1):
            layer = {k: as_tensor(v) for k, v in sub_params(params, f"layer{l}.").items()}
            u, attn = encoder_layer_forward(u, layer, self.config.heads)
            states.append(u.data)
            attention.append(attn.data)
        return mc.mean(u, axis=-2), LayerTrace(states, attention)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainSettings:
    lr: float = 0.05
    weight_decay: float = 0.0
    l2_sign: int = 1  # +1 decays (appendix form); -1 is the main-text "+lambda theta"
    beta: float = 0.0
    optimizer: str = "sgd"
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 0.0  # global gradient-norm cap; 0 disables

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or self.beta < 0 or self.clip < 0:
            raise ValueError("lr, weight_decay, beta and clip must be nonnegative")
        if self.l2_sign not in (1, -1):
            raise ValueError("l2_sign must be +1 or -1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def train_step(model: EmbeddingClassifier, batch, params: Mapping[str, np.ndarray],
               opt_state: AdamState | None, settings: TrainSettings):
    """One update of ``params`` on ``batch = (inputs, labels)``.

    Returns ``(loss, new_params, trace)``; the reported loss includes the
    bottleneck term and the ``lambda/2 * ||theta||^2`` penalty whose gradient
    is the decay term. The trace carries per-layer mean |gradient| of the
    task-plus-bottleneck objective. On a non-finite value the step raises
    :class:`~pdeformer.mathcore.NumericalError` and nothing is modified.
    """
    from .ib_objective import ib_direction, vib_bound
    from .metrics import group_gradient_means

    inputs, labels = batch
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty batch")
    g = mc.DiffGraph()
    with g:
        leaves = {k: g.leaf(v, k) for k, v in params.items()}
        pooled, trace = model.encode(leaves, inputs)
        task = mc.cross_entropy(model.classify(leaves, pooled), labels)
        vib = vib_bound(pooled, leaves) if settings.beta > 0 else None
    task_grads = _grads_by_name(g, task, leaves)
    vib_grads = _grads_by_name(g, vib, leaves) if vib is not None else {}

    loss = task.item()
    if vib is not None:
        loss += settings.beta * vib.item()
    if settings.weight_decay:
        loss += 0.5 * settings.weight_decay * sum(float(np.sum(p * p)) for p in params.values())
    if not math.isfinite(loss):
        raise mc.NumericalError("train_step", None, "loss is not finite")

    objective = {k: task_grads[k] + settings.beta * vib_grads[k] if k in vib_grads else task_grads[k]
                 for k in params}
    trace.grad_magnitude, trace.grad_groups = group_gradient_means(model.layer_groups(params), objective)

    if settings.clip > 0:
        task_grads, vib_grads = clip_gradients(task_grads, vib_grads, settings.beta, settings.clip)
    direction = ib_direction(params, task_grads, vib_grads, settings.weight_decay,
                             settings.beta, settings.l2_sign)
    if settings.optimizer == "adam" and opt_state is None:
        raise ValueError("adam needs an AdamState")
    with np.errstate(over="ignore", invalid="ignore"):  # checked just below
        if settings.optimizer == "sgd":
            new = {k: p - settings.lr * direction[k] for k, p in params.items()}
        else:
            new = adam_update(params, direction, opt_state, settings.lr,
                              settings.adam_b1, settings.adam_b2, settings.adam_eps)
    for k, p in new.items():
        if not np.isfinite(p).all():
            raise mc.NumericalError("train_step", None, f"update of {k!r} is not finite")
    if opt_state is not None and settings.optimizer == "adam":
        opt_state.commit()
    return loss, new, trace


def clip_gradients(task_grads, vib_grads, beta: float, max_norm: float):
    """Scale both gradient maps so the combined objective gradient has norm <= max_norm."""
    total = 0.0
    for k, g in task_grads.items():
        full = g + beta * vib_grads[k] if k in vib_grads else g
        total += float(np.sum(full * full))
    norm = math.sqrt(total)
    if norm <= max_norm:
        return task_grads, vib_grads
    f = max_norm / norm
    return {k: g * f for k, g in task_grads.items()}, {k: g * f for k, g in vib_grads.items()}


def _grads_by_name(graph, root, leaves):
    grads = mc.backward(graph, root)
    return {k: grads.of(t) for k, t in leaves.items()}


def evaluate(model: EmbeddingClassifier, params, inputs, labels, batch_size: int = 256,
             embed_noise=None) -> tuple[float, float]:
    """Mean cross-entropy and accuracy without recording a tape."""
    labels = np.asarray(labels)
    total, correct = 0.0, 0
    for start in range(0, len(labels), batch_size):
        sl = slice(start, start + batch_size)
        noise = None if embed_noise is None else embed_noise[sl]
        logits, _ = model.forward_with_trace(params, np.asarray(inputs)[sl], noise)
        total += mc.cross_entropy(logits, labels[sl]).item() * len(labels[sl])
        correct += int((logits.data.argmax(axis=1) == labels[sl]).sum())
    return total / len(labels), correct / len(labels)
