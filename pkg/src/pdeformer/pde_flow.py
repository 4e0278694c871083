"""Discretised multi-layer information-flow PDE.

Each layer ``l`` carries a field ``u_l`` (positions x model width) advanced by
explicit Euler:

    u_l <- u_l + dt * (D_l lap(u_l) + alpha_l A_l(u_l) + FFN_l(u_l)
                       + C_in(u_{l-1}) - C_out(u_l))

with zero-Dirichlet ghost positions for the Laplacian and affine couplings
``C(u) = u W + b``. Layer 1 has no inflow and the last layer no outflow.
Layers are advanced one after another: layer ``l`` takes ``steps`` Euler
steps driven by the final state of layer ``l - 1``. Layer 1 starts from the
input embedding, deeper layers from zero.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import mathcore as mc
from .mathcore import Tensor, as_tensor
from .transformer_ref import (EmbeddingClassifier, LayerTrace, TransformerConfig, feedforward,
                              init_attention, init_embedding, init_ffn, init_head, make_rng,
                              multi_head_attention, sub_params)

MODES = ("full", "diffusion")


class PDEDivergence(mc.NumericalError):
    """An Euler update blew up; carries the step index and term magnitudes."""

    def __init__(self, layer: int, step: int, magnitudes: dict[str, float], cause=None):
        self.layer = layer
        self.step = step
        self.magnitudes = magnitudes
        mags = ", ".join(f"{k}={v:.3g}" for k, v in magnitudes.items())
        where = cause.op if isinstance(cause, mc.NumericalError) else "step_layer"
        super().__init__(where, getattr(cause, "node", None),
                         f"layer {layer} step {step} diverged; max |term|: {mags}")


def _per_layer(value, layers: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * layers
    vals = tuple(float(v) for v in value)
    if len(vals) != layers:
        raise ValueError(f"{name} needs {layers} values, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class PDEConfig:
    layers: int = 4
    steps: int = 4
    dt: float = 0.25
    dx: float = 1.0
    diffusion: tuple[float, ...] | float = 0.1
    alpha: tuple[float, ...] | float = 0.3
    heads: int = 4
    mode: str = "full"
    boundary: str = "dirichlet-zero"
    forcing: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not (self.dt >= 0 and self.dx > 0):
            raise ValueError("dt must be >= 0 and dx > 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.boundary != "dirichlet-zero":
            raise ValueError("only the dirichlet-zero boundary is supported")
        if self.forcing != "zero":
            raise ValueError("only zero forcing is supported")
        diff = _per_layer(self.diffusion, self.layers, "diffusion")
        alpha = _per_layer(self.alpha, self.layers, "alpha")
        if min(diff) < 0 or min(alpha) < 0:
            raise ValueError("diffusion and alpha must be nonnegative")
        object.__setattr__(self, "diffusion", diff)
        object.__setattr__(self, "alpha", alpha)

    def scaled(self, factor: int) -> "PDEConfig":
        """Same final time per layer with ``factor`` times more, smaller steps."""
        return replace(self, dt=self.dt / factor, steps=self.steps * factor)


@dataclass
class PDEState:
    u: list[Tensor]
    n: int


# ----------------------------------------------------------------- operators


def laplacian(u: Tensor, dx: float) -> Tensor:
    return mc.laplacian1d(as_tensor(u), dx)


def _layer(params: Mapping[str, Tensor], l: int) -> dict[str, Tensor]:
    return {k: as_tensor(v) for k, v in sub_params(params, f"layer{l + 1}.").items()}


def pde_attention(u: Tensor, p: Mapping[str, Tensor], heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head attention of the field, through the Transformer's code path.

    When the layer has ``ln.g``/``ln.b`` the field is normalised first, the
    same way a pre-norm encoder layer feeds its attention block.
    """
    if "ln.g" in p:
        u = mc.layer_norm(u, p["ln.g"], p["ln.b"])
    return multi_head_attention(u, p["WQ"], p["WK"], p["WV"], p["WO"], heads)


def residual_term(u: Tensor, p: Mapping[str, Tensor], n: int = 0, x_grid=None) -> Tensor:
    """FFN(u) + g(x, t); the forcing g is identically zero."""
    return feedforward(u, p["W1"], p["b1"], p["W2"], p["b2"])


def coupling(u: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return mc.add_row(mc.matmul(u, w), b)


def layer_terms(u: Tensor, u_prev: Tensor | None, l: int, config: PDEConfig,
                params: Mapping[str, Tensor], n: int = 0,
                terms: dict[str, Tensor] | None = None) -> tuple[dict[str, Tensor], Tensor | None]:
    """Right-hand-side contributions for layer ``l`` (0-based) and its attention.

    Terms are added to ``terms`` as they are computed, so a caller still sees
    the finished ones when a later term fails.
    """
    p = _layer(params, l)
    terms = {} if terms is None else terms
    attn = None
    if config.diffusion[l] > 0:
        terms["diffusion"] = mc.scale(laplacian(u, config.dx), config.diffusion[l])
    if config.mode == "full":
        if config.alpha[l] > 0:
            a, attn = pde_attention(u, p, config.heads)
            terms["attention"] = mc.scale(a, config.alpha[l])
        terms["residual"] = residual_term(u, p, n)
    if l > 0:
        if u_prev is None:
            raise ValueError(f"layer {l + 1} needs the previous layer's state")
        terms["inflow"] = coupling(as_tensor(u_prev), p["cin.W"], p["cin.b"])
    if l < config.layers - 1:
        terms["outflow"] = mc.scale(coupling(u, p["cout.W"], p["cout.b"]), -1.0)
    return terms, attn


def step_layer(u: Tensor, u_prev: Tensor | None, l: int, config: PDEConfig,
               params: Mapping[str, Tensor], n: int = 0) -> tuple[Tensor, Tensor | None]:
    """One explicit Euler step of layer ``l`` (0-based). Returns (u_next, attention)."""
    u = as_tensor(u)
    terms: dict[str, Tensor] = {}
    try:
        _, attn = layer_terms(u, u_prev, l, config, params, n, terms)
        rhs = None
        for t in terms.values():
            rhs = t if rhs is None else mc.add(rhs, t)
        if rhs is None:
            return u, attn
        return mc.add(u, mc.scale(rhs, config.dt)), attn
    except mc.NumericalError as err:
        mags = {k: float(np.abs(t.data).max()) for k, t in terms.items()}
        mags["u"] = float(np.abs(u.data).max())
        raise PDEDivergence(l + 1, n, mags, err) from err


def run(u0, config: PDEConfig, params: Mapping[str, Tensor], *,
        warn_unstable: bool = True) -> tuple[PDEState, LayerTrace]:
    """Advance every layer ``config.steps`` times; returns final fields and a trace.

    ``trace.states`` is ``[u0, u_1, ..., u_L]`` (final field of each layer);
    ``trace.attention[l]`` is the attention used in layer ``l``'s last step.
    """
    u0 = as_tensor(u0)
    if warn_unstable:
        report = check_stability(config, params)
        if not report.stable:
            warnings.warn(f"stability bound exceeded: lhs per layer {report.lhs}", RuntimeWarning,
                          stacklevel=2)
    fields: list[Tensor] = []
    attention: list[np.ndarray | None] = []
    prev = None
    for l in range(config.layers):
        u = u0 if l == 0 else Tensor(np.zeros(u0.shape))
        attn = None
        for n in range(config.steps):
            u, attn = step_layer(u, prev, l, config, params, n)
        fields.append(u)
        attention.append(None if attn is None else attn.data)
        prev = u
    trace = LayerTrace([u0.data] + [f.data for f in fields], attention)
    return PDEState(fields, config.steps), trace


# ----------------------------------------------------------------- stability


def spectral_norm(w, seed: int = 0, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value by power iteration on W^T W."""
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=float)
    if not w.any():
        return 0.0
    v = make_rng(seed).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        x = w.T @ (w @ v)
        norm = np.linalg.norm(x)
        if norm == 0.0:
            return 0.0
        v = x / norm
        new_sigma = float(np.linalg.norm(w @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            return new_sigma
        sigma = new_sigma
    return sigma


@dataclass(frozen=True)
class StabilityReport:
    stable: bool
    lhs: tuple[float, ...]
    margin: tuple[float, ...]


def check_stability(config: PDEConfig, params: Mapping[str, object]) -> StabilityReport:
    """Evaluate 2 D_l dt / dx^2 + alpha_l dt ||W^O_l||_2 <= 1 for every layer."""
    lhs = []
    for l in range(config.layers):
        wo = params.get(f"layer{l + 1}.WO")
        alpha = config.alpha[l] if config.mode == "full" else 0.0
        norm = spectral_norm(wo, config.seed) if (wo is not None and alpha > 0) else 0.0
        lhs.append(2 * config.diffusion[l] * config.dt / config.dx ** 2 + alpha * config.dt * norm)
    return StabilityReport(all(v <= 1.0 for v in lhs), tuple(lhs), tuple(1.0 - v for v in lhs))


# --------------------------------------------------------------- convergence


@dataclass(frozen=True)
class ConvergenceEstimate:
    order: float | None
    differences: tuple[float, ...]
    below_floor: bool = False

    @property
    def note(self) -> str:
        return "converged below measurement floor" if self.below_floor else ""


def estimate_convergence_order(u0, config: PDEConfig, params, refinements: int = 2,
                               floor: float = 1e-13) -> ConvergenceEstimate:
    """Richardson estimate of the temporal order with diffusion-only dynamics.

    Solves to the same final time with dt, dt/2, ..., dt/2^refinements and
    returns log2 of the ratio of successive solution differences (last pair).
    """
    if refinements < 2:
        raise ValueError("refinements must be >= 2")
    base = replace(config, mode="diffusion")
    finals = []
    for k in range(refinements + 1):
        state, _ = run(u0, base.scaled(2 ** k), params, warn_unstable=False)
        finals.append(np.concatenate([f.data.ravel() for f in state.u]))
    scale_ref = max(1.0, max(float(np.abs(f).max()) for f in finals))
    diffs = tuple(float(np.linalg.norm(a - b)) for a, b in zip(finals, finals[1:]))
    if min(diffs[-2:]) <= floor * scale_ref:
        return ConvergenceEstimate(None, diffs, below_floor=True)
    return ConvergenceEstimate(math.log2(diffs[-2] / diffs[-1]), diffs)


def sine_truncation_error(intervals: int) -> float:
    """Max error of the discrete Laplacian of sin(pi x) on [0, 1] against -pi^2 sin(pi x)."""
    dx = 1.0 / intervals
    x = np.arange(1, intervals) * dx
    u = np.sin(np.pi * x)[:, None]
    approx = laplacian(Tensor(u), dx).data[:, 0]
    return float(np.abs(approx + np.pi ** 2 * np.sin(np.pi * x)).max())


def jacobian_check(u, l: int, config: PDEConfig, params, probe, u_prev=None, h: float = 1e-5) -> float:
    """Relative error between the tape's J @ probe for ``step_layer`` and a central difference.

    The Jacobian is assembled row by row from reverse sweeps, so it is only
    meant for small fields (seq <= 4, d <= 4).
    """
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=float)
    probe = np.asarray(probe, dtype=float)
    return mc.relative_error(step_jvp(u, l, config, params, probe, u_prev),
                             fd_directional(u, l, config, params, probe, u_prev, h))


def step_jvp(u, l, config, params, probe, u_prev=None) -> np.ndarray:
    g = mc.DiffGraph()
    with g:
        leaf = g.leaf(u)
        out, _ = step_layer(leaf, u_prev, l, config, params)
        rows = []
        for i in range(out.size):
            e = np.zeros(out.size)
            e[i] = 1.0
            rows.append(mc.sum_(mc.mul(out, Tensor(e.reshape(out.shape)))))
    jac = np.stack([mc.backward(g, r).of(leaf).ravel() for r in rows])
    return (jac @ probe.ravel()).reshape(u.shape)


def fd_directional(u, l, config, params, probe, u_prev=None, h: float = 1e-5) -> np.ndarray:
    plus, _ = step_layer(Tensor(u + h * probe), u_prev, l, config, params)
    minus, _ = step_layer(Tensor(u - h * probe), u_prev, l, config, params)
    return (plus.data - minus.data) / (2 * h)


# -------------------------------------------------------------- parameters


def transport_gain(config: PDEConfig) -> float:
    """Inflow gain that makes an untrained layer hand its input on unchanged.

    With zero outflow and a constant inflow ``u_prev W``, ``steps`` Euler
    steps from zero accumulate ``steps * dt * u_prev W``.
    """
    horizon = config.steps * config.dt
    return 1.0 / horizon if horizon > 0 else 1.0


def init_couplings(config: PDEConfig, d: int) -> dict[str, np.ndarray]:
    """Inflow ``I / (steps * dt)`` and zero outflow, both with zero bias."""
    out = {}
    for l in range(1, config.layers + 1):
        if l > 1:
            out[f"layer{l}.cin.W"] = np.eye(d) * transport_gain(config)
            out[f"layer{l}.cin.b"] = np.zeros(d)
        if l < config.layers:
            out[f"layer{l}.cout.W"] = np.zeros((d, d))
            out[f"layer{l}.cout.b"] = np.zeros(d)
    return out


def init_pde_layers(config: PDEConfig, d: int, d_ff: int, rng) -> dict[str, np.ndarray]:
    params = {}
    if config.mode == "full":
        for l in range(1, config.layers + 1):
            layer = init_attention(d, rng)
            layer.update({"ln.g": np.ones(d), "ln.b": np.zeros(d)})
            layer.update(init_ffn(d, d_ff, rng))
            params.update({f"layer{l}.{k}": v for k, v in layer.items()})
    params.update(init_couplings(config, d))
    return params


class PDEClassifier(EmbeddingClassifier):
    """Embedding -> PDE layer stack -> mean pool -> linear head."""

    def __init__(self, config: TransformerConfig, pde: PDEConfig):
        if pde.layers != config.layers:
            raise ValueError("PDE and embedding configs disagree on the layer count")
        if pde.heads != config.heads:
            raise ValueError("PDE and embedding configs disagree on the head count")
        self.config = config
        self.pde = pde

    def init_params(self, seed: int | None = None) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = make_rng(cfg.seed if seed is None else seed)
        params = init_embedding(cfg, rng)
        params.update(init_pde_layers(self.pde, cfg.d_model, cfg.d_ff, rng))
        params.update(init_head(cfg, rng))
        return params

    def layer_groups(self, params: Mapping[str, object]) -> list[list[str]]:
        return [[k for k in params if k.startswith(f"layer{l}.")]
                for l in range(1, self.pde.layers + 1)]

    def encode(self, params, inputs, embed_noise=None):
        u0 = self._embed_with_noise(params, inputs, embed_noise)
        state, trace = run(u0, self.pde, params, warn_unstable=False)
        return mc.mean(state.u[-1], axis=-2), trace


def weight_shared_params(transformer_params: Mapping[str, np.ndarray],
                         config: PDEConfig) -> dict[str, np.ndarray]:
    """PDE parameters reusing a Transformer's embedding, attention, FFN and head.

    Attention normalisation takes the first layer norm of each encoder layer;
    couplings get their untrained transport values.
    """
    out = {k: np.array(v) for k, v in transformer_params.items()
           if k.startswith(("embed.", "head."))}
    d = None
    for l in range(1, config.layers + 1):
        src = sub_params(transformer_params, f"layer{l}.")
        if not src:
            raise KeyError(f"transformer parameters have no layer {l}")
        d = src["WO"].shape[1]
        if config.mode == "full":
            for k in ("WQ", "WK", "WV", "WO", "W1", "b1", "W2", "b2"):
                out[f"layer{l}.{k}"] = np.array(src[k])
            out[f"layer{l}.ln.g"] = np.array(src["ln1.g"])
            out[f"layer{l}.ln.b"] = np.array(src["ln1.b"])
    out.update(init_couplings(config, d))
    return out
