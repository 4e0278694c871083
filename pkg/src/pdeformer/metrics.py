"""Comparison statistics between the Transformer and the PDE model.

Correlations flatten whole layer states; attention is averaged over heads
before comparing; KL uses the first argument as the reference distribution.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import mathcore as mc

PROB_TOL = 1e-9
Q_FLOOR = 1e-12
DEFAULT_EPSILONS = (1e-4, 1e-3, 1e-2, 1e-1)


class UndefinedCorrelation(ValueError):
    """A correlation was requested for a constant input."""


def _pair(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two values")
    return a, b


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.abs(da).max(), np.abs(db).max()
    if sa == 0.0 or sb == 0.0:
        raise UndefinedCorrelation("correlation undefined: input is constant")
    da, db = da / sa, db / sb
    ss = float(da @ da) * float(db @ db)
    if ss == 0.0:
        raise UndefinedCorrelation("correlation undefined: input is constant")
    # one square root of the product: identical inputs give exactly 1
    return float(np.clip((da @ db) / math.sqrt(ss), -1.0, 1.0))


def spearman(a, b) -> float:
    """Pearson over average (fractional) ranks."""
    a, b = _pair(a, b)
    return pearson(rankdata(a), rankdata(b))


def cosine_similarity(a, b) -> float:
    a, b = _pair(a, b)
    ss = float(a @ a) * float(b @ b)
    if not a.any() or not b.any():
        raise ValueError("cosine similarity of a zero vector")
    if ss == 0.0 or not math.isfinite(ss):  # rescale when the squares under- or overflow
        a, b = a / np.abs(a).max(), b / np.abs(b).max()
        ss = float(a @ a) * float(b @ b)
    return float(np.clip((a @ b) / math.sqrt(ss), -1.0, 1.0))


def _check_simplex(p: np.ndarray, name: str):
    if (p < 0).any():
        raise ValueError(f"{name} has negative entries")
    s = p.sum(axis=-1)
    if np.abs(s - 1.0).max() > PROB_TOL:
        raise ValueError(f"{name} does not sum to 1 (off by {np.abs(s - 1.0).max():.3g})")


def _row_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    q = np.maximum(q, Q_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / q), 0.0)
    return terms.sum(axis=-1)


def kl_divergence(p, q) -> float:
    """sum p log(p / q) in nats; q is floored at 1e-12, zero-p terms drop out."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p and q must be vectors of equal length")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    return max(float(_row_kl(p, q)), 0.0)


# ------------------------------------------------------------ layer statistics


def interlayer_correlations(trace) -> list[float]:
    """Pearson between consecutive per-layer activations (1-2, 2-3, ...)."""
    acts = trace.activations
    if len(acts) < 2:
        raise ValueError("need at least two layers")
    return [pearson(a, b) for a, b in zip(acts, acts[1:])]


def crosslayer_similarity(trace_a, trace_b) -> list[tuple[float, float]]:
    """(pearson, spearman) between same-index activations of two traces."""
    acts_a, acts_b = trace_a.activations, trace_b.activations
    if len(acts_a) != len(acts_b):
        raise ValueError(f"layer counts differ: {len(acts_a)} vs {len(acts_b)}")
    out = []
    for l, (a, b) in enumerate(zip(acts_a, acts_b), 1):
        if a.shape != b.shape:
            raise ValueError(f"layer {l} shapes differ: {a.shape} vs {b.shape}")
        out.append((pearson(a, b), spearman(a, b)))
    return out


@dataclass(frozen=True)
class AttentionSimilarity:
    cosine: tuple[float, ...]
    kl: tuple[float, ...]
    overall_cosine: float
    overall_kl: float
    head_cosine: tuple[tuple[float, ...], ...] = ()
    kl_direction: str = "KL(A || B)"


def _head_mean(att: np.ndarray) -> np.ndarray:
    att = np.asarray(att, dtype=float)
    if att.ndim < 3:
        raise ValueError("attention must be (..., heads, seq, seq)")
    return att.mean(axis=-3)


def attention_similarity(att_a: Sequence[np.ndarray], att_b: Sequence[np.ndarray]) -> AttentionSimilarity:
    """Per-layer and overall cosine / mean row KL of head-averaged attention."""
    if len(att_a) != len(att_b) or not att_a:
        raise ValueError("attention stacks must be nonempty and of equal depth")
    cos, kls, heads = [], [], []
    flat_a, flat_b, rows = [], [], []
    for l, (a, b) in enumerate(zip(att_a, att_b), 1):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        if a.shape != b.shape:
            raise ValueError(f"layer {l} attention shapes differ: {a.shape} vs {b.shape}")
        _check_simplex(a, f"layer {l} attention A")
        _check_simplex(b, f"layer {l} attention B")
        ma, mb = _head_mean(a), _head_mean(b)
        cos.append(cosine_similarity(ma, mb))
        row_kl = np.maximum(_row_kl(ma, mb), 0.0).ravel()
        kls.append(float(row_kl.mean()))
        heads.append(tuple(cosine_similarity(np.take(a, h, axis=-3), np.take(b, h, axis=-3))
                           for h in range(a.shape[-3])))
        flat_a.append(ma.ravel())
        flat_b.append(mb.ravel())
        rows.append(row_kl)
    return AttentionSimilarity(tuple(cos), tuple(kls),
                               cosine_similarity(np.concatenate(flat_a), np.concatenate(flat_b)),
                               float(np.concatenate(rows).mean()), tuple(heads))


def group_gradient_means(groups: Sequence[Sequence[str]], grads: Mapping[str, np.ndarray]):
    """Mean |g| over each parameter group, plus per-parameter detail."""
    means, detail = [], []
    for names in groups:
        missing = [n for n in names if n not in grads]
        if missing:
            raise KeyError(f"no gradient for {missing}")
        if not names:
            means.append(0.0)
            detail.append({})
            continue
        flat = np.concatenate([np.abs(np.asarray(grads[n])).ravel() for n in names])
        means.append(float(flat.mean()))
        detail.append({n: float(np.abs(grads[n]).mean()) for n in names})
    return means, detail


def gradient_stats(trace) -> list[float]:
    """Per-layer mean absolute gradient recorded by a training step."""
    if trace.grad_magnitude is None:
        raise ValueError("trace carries no gradients; it did not come from train_step")
    return list(trace.grad_magnitude)


# ------------------------------------------------------------------ sweeps


@dataclass(frozen=True)
class SweepResult:
    epsilons: tuple[float, ...]
    loss: tuple[float, ...]  # nan where saturated
    stderr: tuple[float, ...]
    saturated: tuple[bool, ...]
    clean_loss: float
    trials: int


def perturbation_sweep(model, params, inputs, labels, epsilons=DEFAULT_EPSILONS,
                       trials: int = 4, seed: int = 0, batch_size: int = 256,
                       antithetic: bool = True) -> SweepResult:
    """Mean cross-entropy with eps * N(0, 1) noise added to the embeddings.

    Trial ``t`` draws one noise tensor and reuses it for every eps, so the
    curve compares the same directions at different scales. Each point is
    ``clean + mean(trial - clean)``, which makes eps = 0 reproduce the clean
    loss exactly. With ``antithetic`` a trial averages +z and -z; the
    expectation is unchanged but the first-order term cancels, so small-eps
    points are not dominated by the sign of grad . z.
    """
    from .transformer_ref import evaluate, make_rng

    eps = tuple(float(e) for e in epsilons)
    if not eps or any(e < 0 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be nonnegative and strictly ascending")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    clean, _ = evaluate(model, params, inputs, labels, batch_size)
    shape = model.embedding_shape(inputs)
    noises = [make_rng(seed + 7919 * t).standard_normal(shape) for t in range(trials)]
    signs = (1.0, -1.0) if antithetic else (1.0,)
    loss, err, sat = [], [], []
    for e in eps:
        dev = []
        try:
            for z in noises:
                pair = []
                for sign in signs:
                    with np.errstate(over="ignore"):  # huge eps saturates below
                        noise = (sign * e) * z
                    value, _ = evaluate(model, params, inputs, labels, batch_size, embed_noise=noise)
                    if not math.isfinite(value):
                        raise mc.NumericalError("perturbation_sweep", None, "loss is not finite")
                    pair.append(value - clean)
                dev.append(sum(pair) / len(pair))
        except mc.NumericalError:
            loss.append(float("nan"))
            err.append(float("nan"))
            sat.append(True)
            continue
        dev = np.array(dev)
        loss.append(clean + float(dev.mean()))
        err.append(float(dev.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0)
        sat.append(False)
    return SweepResult(eps, tuple(loss), tuple(err), tuple(sat), clean, trials)


# ------------------------------------------------------------------ records


@dataclass
class MetricsRecord:
    experiment: str
    layers: int
    series: dict[str, list[float]] = field(default_factory=dict)
    scalars: dict[str, float] = field(default_factory=dict)
    config_hash: str = ""
    seed: int = 0

    def __post_init__(self):
        for name, values in self.series.items():
            self.check_series(name, values)
        for name, v in self.scalars.items():
            if not math.isfinite(v):
                raise ValueError(f"scalar {name!r} is not finite")

    def check_series(self, name: str, values: Sequence[float]) -> None:
        if len(values) not in (self.layers, self.layers - 1):
            raise ValueError(f"series {name!r} has {len(values)} values for {self.layers} layers")
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"series {name!r} is not finite")

    def add_series(self, name: str, values: Sequence[float]) -> None:
        values = [float(v) for v in values]
        self.check_series(name, values)
        self.series[name] = values
