"""Experiment configuration: a published schema, line-based files and CLI overrides.

File syntax: one ``section.key = value`` per line; ``#`` starts a comment.
Lists are comma separated. Every key must appear in :data:`SCHEMA`.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

EXPERIMENTS = ("flow", "attention", "ib", "gradients", "perturbation")
OUT_ENV = "PDEFORMER_OUT"


class ConfigError(ValueError):
    """Bad key, value or combination; the message names the key path."""


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | str | floats | bool
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""
    choices: tuple = ()
    doc: str = ""


def _pos(v):
    return all(x > 0 for x in v) if isinstance(v, tuple) else v > 0


def _nonneg(v):
    return all(x >= 0 for x in v) if isinstance(v, tuple) else v >= 0


BOOLS = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}
POS = dict(check=_pos, rule="must be > 0")
NONNEG = dict(check=_nonneg, rule="must be >= 0")

SCHEMA: dict[str, Key] = {
    "run.seed": Key("int", 0, **NONNEG, doc="master seed (Philox)"),
    "run.out": Key("str", "", doc="output directory; falls back to $PDEFORMER_OUT"),
    "transformer.layers": Key("int", 4, **POS, doc="encoder depth L, shared by both models"),
    "transformer.d_model": Key("int", 32, **POS, doc="model width d"),
    "transformer.heads": Key("int", 4, **POS, doc="attention heads, must divide d_model"),
    "transformer.d_ff": Key("int", 0, **NONNEG, doc="0 means 2 * d_model"),
    "pde.steps": Key("int", 4, **POS, doc="Euler steps per layer"),
    "pde.dt": Key("float", 0.25, **POS, doc="time step"),
    "pde.dx": Key("float", 1.0, **POS, doc="grid spacing along the sequence"),
    "pde.diffusion": Key("floats", (0.1,), **NONNEG, doc="one value or one per layer"),
    "pde.alpha": Key("floats", (0.3,), **NONNEG, doc="one value or one per layer"),
    "pde.mode": Key("str", "", choices=("", "full", "diffusion"),
                    doc="empty selects the experiment's own mode"),
    "ib.beta": Key("float", 0.0, **NONNEG, doc="weight of the variational compression term"),
    "ib.weight_decay": Key("float", 0.0, **NONNEG, doc="lambda of the L2 term"),
    "ib.l2_sign": Key("int", 1, choices=(1, -1), doc="1 decays weights, -1 grows them"),
    "ib.bottleneck": Key("int", 8, **POS, doc="width of the variational head"),
    "ib.bins": Key("int", 10, check=lambda v: v >= 2, rule="must be >= 2",
                   doc="quantile bins per dimension for measured MI"),
    "optimizer.name": Key("str", "sgd", choices=("sgd", "adam")),
    "optimizer.lr": Key("float", 0.05, **NONNEG, doc="learning rate"),
    "optimizer.batch": Key("int", 32, **POS, doc="minibatch size"),
    "optimizer.steps": Key("int", 200, **POS,
                           doc="training steps (flow, attention, gradients, perturbation)"),
    "optimizer.epochs": Key("int", 5, **POS, doc="epochs for the ib experiment"),
    "optimizer.adam_b1": Key("float", 0.9, check=lambda v: 0 <= v < 1, rule="must be in [0, 1)"),
    "optimizer.adam_b2": Key("float", 0.999, check=lambda v: 0 <= v < 1, rule="must be in [0, 1)"),
    "optimizer.adam_eps": Key("float", 1e-8, **POS),
    "optimizer.clip": Key("float", 0.0, **NONNEG, doc="global gradient-norm cap, 0 = off"),
    "data.source": Key("str", "synthetic", choices=("synthetic", "mnist", "text"),
                       doc="synthetic generator, MNIST IDX files or a text corpus"),
    "data.mode": Key("str", "", choices=("", "gaussian-blobs", "token-motifs"),
                     doc="synthetic generator; empty selects the experiment's own"),
    "data.n": Key("int", 256, **POS, doc="training samples"),
    "data.eval_n": Key("int", 64, **POS, doc="samples traced for statistics"),
    "data.classes": Key("int", 10, **POS, doc="classes for synthetic data"),
    "data.sigma": Key("float", 0.1, **POS, doc="blob pixel noise"),
    "data.separation": Key("float", 10.0, **POS, doc="blob centroid spread"),
    "data.vocab": Key("int", 200, check=lambda v: v >= 3, rule="must be >= 3", doc="motif vocabulary size"),
    "data.seq_len": Key("int", 32, **POS, doc="motif sequence length"),
    "data.repeats": Key("int", 3, **POS, doc="motif occurrences per sequence"),
    "data.images": Key("str", "", doc="MNIST image IDX path"),
    "data.labels": Key("str", "", doc="MNIST label IDX path"),
    "data.text": Key("str", "", doc="label<TAB>text corpus path"),
    "data.vocab_cap": Key("int", 2000, **POS, doc="text vocabulary cap, by frequency"),
    "data.seq_cap": Key("int", 64, **POS, doc="text sequence length cap"),
    "perturbation.epsilons": Key("floats", (1e-4, 1e-3, 1e-2, 1e-1), **POS, doc="noise scales, ascending"),
    "perturbation.trials": Key("int", 4, **POS, doc="noise draws per scale"),
    "perturbation.antithetic": Key("bool", True, doc="average each draw with its negation"),
}


def _parse(path: str, raw: str) -> Any:
    spec = SCHEMA[path]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            value: Any = int(raw, 0) if raw.lower().startswith(("0x", "0o", "0b")) else int(raw)
        elif spec.kind == "float":
            value = float(raw)
        elif spec.kind == "floats":
            parts = [p for p in raw.split(",") if p.strip()]
            if not parts:
                raise ValueError("empty list")
            value = tuple(float(p) for p in parts)
        elif spec.kind == "bool":
            if raw.lower() not in BOOLS:
                raise ValueError(raw)
            value = BOOLS[raw.lower()]
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{path}: expected {spec.kind}, got {raw!r}") from None
    if spec.kind in ("float", "floats"):
        values = value if isinstance(value, tuple) else (value,)
        if not all(v == v and abs(v) != float("inf") for v in values):
            raise ConfigError(f"{path}: value must be finite, got {raw!r}")
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{path}: {value!r} is not one of {spec.choices}")
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"{path}: {spec.rule}, got {raw!r}")
    return value


def _format(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    values: Mapping[str, Any]

    def __getitem__(self, path: str) -> Any:
        return self.values[path]

    def section(self, name: str) -> dict[str, Any]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def output_dir(self, environ: Mapping[str, str] | None = None) -> Path:
        environ = os.environ if environ is None else environ
        out = self.values["run.out"] or environ.get(OUT_ENV, "")
        if not out:
            raise ConfigError(f"run.out: no output directory (set run.out or ${OUT_ENV})")
        return Path(out)

    def dump(self) -> str:
        """Resolved config in file syntax; parsing it back gives the same config."""
        lines = [f"# experiment: {self.experiment}"]
        lines += [f"{k} = {_format(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(f"{self.experiment}\n{self.dump()}".encode()).hexdigest()[:16]


def parse_config_text(text: str, experiment: str, overrides: Sequence[tuple[str, str]] = (),
                      origin: str = "<config>") -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment: {experiment!r} is not one of {EXPERIMENTS}")
    values = {k: spec.default for k, spec in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key ({origin}:{lineno})")
        values[key] = _parse(key, raw)
    for key, raw in overrides:
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key (command line)")
        values[key] = _parse(key, raw)
    cfg = ExperimentConfig(experiment, values)
    _cross_check(cfg)
    return cfg


def parse_config(path, experiment: str, overrides: Sequence[tuple[str, str]] = ()) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as err:
        raise ConfigError(f"{path}: not UTF-8 text ({err})") from None
    return parse_config_text(text, experiment, overrides, str(path))


def _cross_check(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if v["transformer.d_model"] % v["transformer.heads"]:
        raise ConfigError("transformer.heads: must divide transformer.d_model")
    for key in ("pde.diffusion", "pde.alpha"):
        if len(v[key]) not in (1, v["transformer.layers"]):
            raise ConfigError(f"{key}: needs 1 or transformer.layers values, got {len(v[key])}")
    if v["data.source"] == "mnist":
        for key in ("data.images", "data.labels"):
            if not v[key]:
                raise ConfigError(f"{key}: required when data.source = mnist")
    if v["data.source"] == "text" and not v["data.text"]:
        raise ConfigError("data.text: required when data.source = text")
    if v["data.n"] < v["data.classes"]:
        raise ConfigError("data.n: must be >= data.classes")
    if v["data.eval_n"] > v["data.n"]:
        raise ConfigError("data.eval_n: must be <= data.n")


def schema_table() -> str:
    """Markdown table of every key, used to keep the README honest."""
    rows = ["| key | type | default | rule | meaning |", "|---|---|---|---|---|"]
    for k, s in SCHEMA.items():
        choices = ", ".join(f"`{c}`" if c else '`""`' for c in s.choices)
        rule = s.rule or (f"one of {choices}" if s.choices else "")
        default = f"`{_format(s.default)}`" if _format(s.default) else '`""`'
        rows.append(f"| `{k}` | {s.kind} | {default} | {rule} | {s.doc} |")
    return "\n".join(rows)
