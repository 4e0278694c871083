"""The five experiments behind the CLI.

Each ``run_*`` function trains what it needs, writes its CSV/PGM artifacts
into ``out`` and returns a summary dict that ends up in the manifest.
Trained models are cached per process, keyed by everything that influences
training, so experiments sharing a configuration train only once.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .datasets import ImageSet, TextSet, load_labeled_text, load_mnist_idx, synth_classification
from .ib_objective import binned_mi, init_vib_head
from .optim import AdamState
from .pde_flow import PDEClassifier, PDEConfig, run, weight_shared_params
from .transformer_ref import (EmbeddingClassifier, TrainSettings, TransformerConfig,
                              TransformerModel, evaluate, make_rng, train_step)
from .writers import write_csv, write_matrix_csv, write_pgm

# PDE operating mode used when pde.mode is left empty
DEFAULT_MODES = {"flow": "full", "attention": "full", "ib": "full",
                 "gradients": "full", "perturbation": "full"}
DEFAULT_DATA = {"ib": "token-motifs"}


def derive_seed(seed: int, tag: str) -> int:
    """Independent 64-bit stream id for one purpose within a run."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------- setup


def load_data(cfg: ExperimentConfig):
    d = cfg.section("data")
    n = d["n"]
    if d["source"] == "mnist":
        full = load_mnist_idx(d["images"], d["labels"])
        if len(full) < n:
            raise ValueError(f"data.n: asked for {n} samples, MNIST file has {len(full)}")
        return ImageSet(full.images[:n], full.labels[:n])
    if d["source"] == "text":
        full = load_labeled_text(d["text"], d["vocab_cap"], d["seq_cap"])
        if len(full) < n:
            raise ValueError(f"data.n: asked for {n} documents, corpus has {len(full)}")
        return TextSet(full.documents[:n], full.labels[:n], full.vocab, full.label_names)
    mode = d["mode"] or DEFAULT_DATA.get(cfg.experiment, "gaussian-blobs")
    seed = derive_seed(cfg.seed, "data")
    if mode == "gaussian-blobs":
        return synth_classification(seed, n, d["classes"], mode=mode, sigma=d["sigma"],
                                    separation=d["separation"])
    return synth_classification(seed, n, d["classes"], d["vocab"], mode=mode,
                                seq_len=d["seq_len"], repeats=d["repeats"])


def _inputs(data):
    return data.images if isinstance(data, ImageSet) else data.documents


def model_configs(cfg: ExperimentConfig, data) -> tuple[TransformerConfig, PDEConfig]:
    t, p = cfg.section("transformer"), cfg.section("pde")
    image = isinstance(data, ImageSet)
    classes = max(int(data.labels.max()) + 1, cfg["data.classes"] if cfg["data.source"] == "synthetic" else 1)
    tcfg = TransformerConfig(layers=t["layers"], d_model=t["d_model"], heads=t["heads"], d_ff=t["d_ff"],
                             input_width=data.images.shape[-1] if image else data.vocab_size,
                             classes=classes, modality="image" if image else "text",
                             seed=derive_seed(cfg.seed, "init"))
    diffusion = p["diffusion"][0] if len(p["diffusion"]) == 1 else p["diffusion"]
    alpha = p["alpha"][0] if len(p["alpha"]) == 1 else p["alpha"]
    pcfg = PDEConfig(layers=t["layers"], steps=p["steps"], dt=p["dt"], dx=p["dx"], diffusion=diffusion,
                     alpha=alpha, heads=t["heads"], mode=p["mode"] or DEFAULT_MODES[cfg.experiment],
                     seed=cfg.seed)
    return tcfg, pcfg


def train_settings(cfg: ExperimentConfig) -> TrainSettings:
    o, ib = cfg.section("optimizer"), cfg.section("ib")
    return TrainSettings(lr=o["lr"], weight_decay=ib["weight_decay"], l2_sign=ib["l2_sign"],
                         beta=ib["beta"], optimizer=o["name"], adam_b1=o["adam_b1"],
                         adam_b2=o["adam_b2"], adam_eps=o["adam_eps"], clip=o["clip"])


# -------------------------------------------------------------- training


@dataclass
class TrainedModel:
    model: EmbeddingClassifier
    params: dict[str, np.ndarray]
    losses: list[float]
    grads: list[list[float]]
    accuracy: float
    epoch_params: list[dict[str, np.ndarray]]


def init_params(model: EmbeddingClassifier, cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    params = model.init_params()
    if cfg["ib.beta"] > 0:
        params.update(init_vib_head(model.config.d_model, cfg["ib.bottleneck"],
                                    make_rng(derive_seed(cfg.seed, "vib"))))
    return params


def fit(model: EmbeddingClassifier, params, data, cfg: ExperimentConfig, *, epochs: int | None = None,
        on_epoch: Callable[[int, dict], None] | None = None) -> TrainedModel:
    """Minibatch training.

    Without ``epochs`` it runs ``optimizer.steps`` steps on batches drawn
    without replacement; with ``epochs`` it sweeps shuffled batches and calls
    ``on_epoch`` after each epoch (and once before training as epoch 0).
    """
    settings = train_settings(cfg)
    batch = min(cfg["optimizer.batch"], len(data))
    rng = make_rng(derive_seed(cfg.seed, "batches"))
    state = AdamState() if settings.optimizer == "adam" else None
    x, y = _inputs(data), data.labels
    losses, grads, snapshots = [], [], []

    def step(idx):
        nonlocal params
        loss, params, trace = train_step(model, (x[idx], y[idx]), params, state, settings)
        losses.append(loss)
        grads.append(list(trace.grad_magnitude))

    if epochs is None:
        for _ in range(cfg["optimizer.steps"]):
            step(rng.choice(len(y), size=batch, replace=False))
    else:
        snapshots.append(params)
        if on_epoch:
            on_epoch(0, params)
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(y))
            for start in range(0, len(y), batch):
                step(order[start:start + batch])
            snapshots.append(params)
            if on_epoch:
                on_epoch(epoch, params)
    _, acc = evaluate(model, params, x, y)
    return TrainedModel(model, params, losses, grads, acc, snapshots)


_CACHE: dict[tuple, TrainedModel] = {}


def _train_key(cfg: ExperimentConfig, kind: str, pcfg: PDEConfig | None) -> tuple:
    relevant = {k: v for k, v in cfg.values.items()
                if not k.startswith(("run.out", "perturbation.", "pde.")) and k != "optimizer.epochs"}
    data_mode = DEFAULT_DATA.get(cfg.experiment, "gaussian-blobs")
    return (kind, data_mode, repr(sorted(relevant.items())), repr(pcfg) if kind == "pde" else "")


def trained_pair(cfg: ExperimentConfig, data, tcfg, pcfg) -> tuple[TrainedModel, TrainedModel]:
    out = []
    for kind in ("transformer", "pde"):
        key = _train_key(cfg, kind, pcfg)
        if key not in _CACHE:
            model = TransformerModel(tcfg) if kind == "transformer" else PDEClassifier(tcfg, pcfg)
            _CACHE[key] = fit(model, init_params(model, cfg), data, cfg)
        out.append(_CACHE[key])
    return out[0], out[1]


def clear_cache() -> None:
    _CACHE.clear()


def _eval_slice(cfg, data):
    n = cfg["data.eval_n"]
    return _inputs(data)[:n], data.labels[:n]


def _layer_rows(values_by_model: dict[str, list[float]], label: Callable[[int], str]):
    names = list(values_by_model)
    depth = len(values_by_model[names[0]])
    return [[label(i)] + [values_by_model[m][i] for m in names] for i in range(depth)]


def _write_training(out: Path, tr: TrainedModel, pde: TrainedModel) -> None:
    write_csv(out / "training_loss.csv", ["step", "transformer", "pde"],
              ([i + 1, a, b] for i, (a, b) in enumerate(zip(tr.losses, pde.losses))))
    _save_checkpoints(out, transformer=tr.params, pde=pde.params)


def _save_checkpoints(out: Path, **params) -> None:
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    for name, p in params.items():
        save_checkpoint(p, out / "checkpoints" / f"{name}.pdef")


# ------------------------------------------------------------ experiments


def run_flow(cfg: ExperimentConfig, out: Path) -> dict:
    """Per-layer activations, inter-layer (Table-2 style) and cross-model (Table-3 style) statistics."""
    data = load_data(cfg)
    tcfg, pcfg = model_configs(cfg, data)
    tr, pde = trained_pair(cfg, data, tcfg, pcfg)
    _write_training(out, tr, pde)
    x, _ = _eval_slice(cfg, data)
    _, t_trace = tr.model.forward_with_trace(tr.params, x)
    _, p_trace = pde.model.forward_with_trace(pde.params, x)
    for name, trace in (("transformer", t_trace), ("pde", p_trace)):
        for l, act in enumerate(trace.activations, 1):
            write_matrix_csv(out / "activations" / f"{name}_layer{l:02d}.csv", act[0], "d")
            write_pgm(out / "activations" / f"{name}_layer{l:02d}.pgm", act[0])
    inter = {"transformer": metrics.interlayer_correlations(t_trace),
             "pde": metrics.interlayer_correlations(p_trace)}
    write_csv(out / "interlayer_correlation.csv", ["pair", "transformer", "pde"],
              _layer_rows(inter, lambda i: f"{i + 1}-{i + 2}"))
    # both stacks read the Transformer's embedding so layer 1 coincides
    _, shared = run(t_trace.states[0], pcfg, pde.params, warn_unstable=False)
    cross = metrics.crosslayer_similarity(t_trace, shared)
    write_csv(out / "crossmodel_correlation.csv", ["layer", "pearson", "spearman"],
              ([l, p, s] for l, (p, s) in enumerate(cross, 1)))
    return {"transformer_accuracy": tr.accuracy, "pde_accuracy": pde.accuracy, "pde_mode": pcfg.mode}


def attention_maps(trace) -> list[np.ndarray]:
    return [np.asarray(a).mean(axis=-3) for a in trace.attention]


def run_attention(cfg: ExperimentConfig, out: Path) -> dict:
    """Weight-shared attention comparison: the PDE reuses the trained Transformer's projections."""
    data = load_data(cfg)
    tcfg, pcfg = model_configs(cfg, data)
    if pcfg.mode != "full":
        raise ValueError("pde.mode: the attention experiment needs the full mode")
    tr = _train_one(cfg, data, tcfg)
    x, _ = _eval_slice(cfg, data)
    _, t_trace = tr.model.forward_with_trace(tr.params, x)
    shared = weight_shared_params(tr.params, pcfg)
    _, p_trace = PDEClassifier(tcfg, pcfg).forward_with_trace(shared, x)
    sim = metrics.attention_similarity(t_trace.attention, p_trace.attention)
    rows = [[l, c, k] for l, (c, k) in enumerate(zip(sim.cosine, sim.kl), 1)]
    rows.append(["all", sim.overall_cosine, sim.overall_kl])
    write_csv(out / "attention_similarity.csv", ["layer", "cosine", "kl"], rows)
    write_csv(out / "attention_head_cosine.csv", ["layer"] + [f"head{h}" for h in range(tcfg.heads)],
              ([l, *hc] for l, hc in enumerate(sim.head_cosine, 1)))
    single = replace(pcfg, steps=1, dt=pcfg.dt * pcfg.steps)
    _, s_trace = PDEClassifier(tcfg, single).forward_with_trace(weight_shared_params(tr.params, single), x)
    first = metrics.attention_similarity(t_trace.attention[:1], s_trace.attention[:1])
    write_csv(out / "attention_layer1_single_step.csv", ["layer", "cosine", "kl"],
              [[1, first.overall_cosine, first.overall_kl]])
    for name, trace in (("transformer", t_trace), ("pde", p_trace)):
        for l, m in enumerate(attention_maps(trace), 1):
            write_matrix_csv(out / "attention" / f"{name}_layer{l:02d}.csv", m[0], "k")
            write_pgm(out / "attention" / f"{name}_layer{l:02d}.pgm", m[0])
    _save_checkpoints(out, transformer=tr.params)
    return {"transformer_accuracy": tr.accuracy, "overall_cosine": sim.overall_cosine,
            "overall_kl": sim.overall_kl, "kl_direction": "KL(transformer || pde)"}


def _train_one(cfg, data, tcfg) -> TrainedModel:
    key = _train_key(cfg, "transformer", None)
    if key not in _CACHE:
        model = TransformerModel(tcfg)
        _CACHE[key] = fit(model, init_params(model, cfg), data, cfg)
    return _CACHE[key]


def layer_mi(model: EmbeddingClassifier, params, x, y, bins: int) -> list[float]:
    """Binned MI between each layer's mean-pooled output and the labels."""
    _, trace = model.forward_with_trace(params, x)
    return [binned_mi(s.mean(axis=1), y, bins).value for s in trace.outputs]


def run_ib(cfg: ExperimentConfig, out: Path) -> dict:
    """Per-epoch, per-layer binned MI while training the PDE model."""
    data = load_data(cfg)
    tcfg, pcfg = model_configs(cfg, data)
    model = PDEClassifier(tcfg, pcfg)
    x, y = _inputs(data), data.labels
    rows = []

    def record(epoch, params):
        rows.append([epoch, *layer_mi(model, params, x, y, cfg["ib.bins"])])

    trained = fit(model, init_params(model, cfg), data, cfg, epochs=cfg["optimizer.epochs"],
                  on_epoch=record)
    write_csv(out / "mi_per_epoch.csv", ["epoch"] + [f"layer{l}" for l in range(1, pcfg.layers + 1)], rows)
    write_csv(out / "training_loss.csv", ["step", "pde"], ([i + 1, v] for i, v in enumerate(trained.losses)))
    _save_checkpoints(out, pde=trained.params)
    return {"pde_accuracy": trained.accuracy, "estimator": "binned, mean-pooled layer output"}


def run_gradients(cfg: ExperimentConfig, out: Path) -> dict:
    """Per-step, per-layer mean |gradient| for both models."""
    data = load_data(cfg)
    tcfg, pcfg = model_configs(cfg, data)
    tr, pde = trained_pair(cfg, data, tcfg, pcfg)
    summary = {}
    for name, t in (("transformer", tr), ("pde", pde)):
        header = ["step"] + [f"layer{l}" for l in range(1, tcfg.layers + 1)]
        write_csv(out / f"gradients_{name}.csv", header, ([i + 1, *g] for i, g in enumerate(t.grads)))
        mean = np.mean(t.grads, axis=0)
        summary[f"{name}_layer1_over_deepest"] = float(mean[0] / mean[-1]) if mean[-1] > 0 else math.inf
        summary[f"{name}_share_in_1e-3_1e-2"] = float(np.mean((mean >= 1e-3) & (mean <= 1e-2)))
    write_csv(out / "gradients_mean.csv", ["layer", "transformer", "pde"],
              _layer_rows({"transformer": list(np.mean(tr.grads, axis=0)),
                           "pde": list(np.mean(pde.grads, axis=0))}, lambda i: str(i + 1)))
    _write_training(out, tr, pde)
    return summary


def run_perturbation(cfg: ExperimentConfig, out: Path) -> dict:
    """Loss against embedding-noise scale for both models."""
    data = load_data(cfg)
    tcfg, pcfg = model_configs(cfg, data)
    tr, pde = trained_pair(cfg, data, tcfg, pcfg)
    x, y = _eval_slice(cfg, data)
    eps = cfg["perturbation.epsilons"]
    trials = cfg["perturbation.trials"]
    seed = derive_seed(cfg.seed, "perturbation")
    anti = cfg["perturbation.antithetic"]
    sweeps = {name: metrics.perturbation_sweep(t.model, t.params, x, y, eps, trials, seed, antithetic=anti)
              for name, t in (("transformer", tr), ("pde", pde))}
    header = ["epsilon"]
    for name in sweeps:
        header += [f"{name}_loss", f"{name}_stderr", f"{name}_saturated"]
    rows = [[0.0] + sum(([s.clean_loss, 0.0, False] for s in sweeps.values()), [])]
    for i, e in enumerate(eps):
        rows.append([e] + sum(([s.loss[i], s.stderr[i], s.saturated[i]] for s in sweeps.values()), []))
    write_csv(out / "perturbation.csv", header, rows)
    _write_training(out, tr, pde)
    return {"transformer_accuracy": tr.accuracy, "pde_accuracy": pde.accuracy,
            "noise": "eps * N(0, 1) added to embeddings, shared across eps within a trial"
                     + (", antithetic pairs" if anti else "")}


RUNNERS = {"flow": run_flow, "attention": run_attention, "ib": run_ib,
           "gradients": run_gradients, "perturbation": run_perturbation}
