"""Information-bottleneck pieces: a binned MI estimator for measurement and a
Gaussian variational bound used as the training regulariser.

The two are deliberately different quantities. ``binned_mi`` measures
I(layer features; labels); ``vib_bound`` upper-bounds I(X; T) and is what the
``beta`` term of the update pushes down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import mathcore as mc
from .mathcore import Tensor, as_tensor

LOGVAR_CLAMP = 10.0
DEFAULT_BINS = 10


@dataclass(frozen=True)
class MIEstimate:
    value: float
    estimator: str
    bins: int
    note: str = ""


def quantile_bins(column: np.ndarray, bins: int) -> np.ndarray:
    """Equal-mass bin index of every entry, based on ranks.

    Ties share a bin and constant columns land entirely in bin 0, so the
    result is unchanged by any strictly increasing transform of the column.
    """
    n = column.shape[0]
    below = np.searchsorted(np.sort(column), column, side="left")
    return (below * bins) // n


def _plugin_mi(a: np.ndarray, b: np.ndarray, na: int, nb: int) -> float:
    joint = np.bincount(a * nb + b, minlength=na * nb).reshape(na, nb).astype(float)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    return float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))


def binned_mi(features, labels, bins: int = DEFAULT_BINS) -> MIEstimate:
    """Average over feature dimensions of the plug-in I(bin(T_j); Y), in nats.

    ``features`` is (n, ...) and is flattened to (n, d). Joint binning of all
    dimensions is infeasible at useful widths, so values are only comparable
    with other per-dimension averages.
    """
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=float)
    y = np.asarray(labels)
    n = x.shape[0]
    x = x.reshape(n, -1)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if n < bins:
        raise ValueError(f"need at least {bins} samples for {bins} bins, got {n}")
    if y.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {y.shape}")
    _, yi = np.unique(y, return_inverse=True)
    ny = int(yi.max()) + 1
    total = 0.0
    for j in range(x.shape[1]):
        total += max(_plugin_mi(quantile_bins(x[:, j], bins), yi, bins, ny), 0.0)
    return MIEstimate(total / x.shape[1], "binned", bins, "per-dimension average, quantile bins")


# ----------------------------------------------------------- variational bound


def init_vib_head(d: int, r: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    bound = 1.0 / math.sqrt(d)
    return {"vib.Wmu": rng.uniform(-bound, bound, (d, r)), "vib.bmu": np.zeros(r),
            "vib.Wlv": rng.uniform(-bound, bound, (d, r)), "vib.blv": np.zeros(r)}


def vib_bound(features: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Batch mean of KL(N(mu(x), diag exp(logvar(x))) || N(0, I)).

    Differentiable upper bound on I(X; T) when the marginal of T is relaxed to
    the standard normal prior. Log-variances are clamped to [-10, 10].
    """
    if features.shape[0] == 0:
        raise ValueError("empty batch")
    mu = mc.add_row(mc.matmul(features, as_tensor(params["vib.Wmu"])), as_tensor(params["vib.bmu"]))
    logvar = mc.clip(mc.add_row(mc.matmul(features, as_tensor(params["vib.Wlv"])),
                                as_tensor(params["vib.blv"])), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    kl = (mc.mul(mu, mu) + mc.exp(logvar) - logvar) - 1.0
    return mc.mean(mc.scale(mc.sum_(kl, axis=-1), 0.5))


def ib_direction(params, task_grads, vib_grads, lam: float, beta: float, l2_sign: int = 1):
    """grad L + l2_sign * lam * theta + beta * grad I, per parameter."""
    out = {}
    for k, p in params.items():
        g = task_grads.get(k)
        g = np.zeros_like(p) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"task gradient for {k!r} has shape {g.shape}, parameter {p.shape}")
        d = g + (l2_sign * lam) * p
        if k in vib_grads:
            vg = np.asarray(vib_grads[k])
            if vg.shape != p.shape:
                raise ValueError(f"bottleneck gradient for {k!r} has shape {vg.shape}, "
                                 f"parameter {p.shape}")
            d = d + beta * vg
        out[k] = d
    unknown = (set(task_grads) | set(vib_grads)) - set(params)
    if unknown:
        raise ValueError(f"gradients for unknown parameters: {sorted(unknown)}")
    return out


def ib_update(params, task_grads, vib_grads, lr: float, lam: float, beta: float, l2_sign: int = 1):
    """theta <- theta - lr * (grad L + lam * theta + beta * grad I)."""
    direction = ib_direction(params, task_grads, vib_grads, lam, beta, l2_sign)
    return {k: p - lr * direction[k] for k, p in params.items()}
