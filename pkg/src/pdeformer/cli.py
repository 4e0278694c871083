"""``pdeformer <experiment> --config <path> [--section.key value]...``

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 4 I/O error.
"""
from __future__ import annotations

import argparse
import sys
import time
import traceback
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError
from .config import EXPERIMENTS, OUT_ENV, ConfigError, ExperimentConfig, parse_config, parse_config_text
from .datasets import IDXError
from .mathcore import NumericalError
from .writers import git_describe, sha256_file, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
RESOLVED_NAME = "config.resolved"


def exit_code_for(err: BaseException) -> int:
    if isinstance(err, NumericalError):
        return EXIT_NUMERIC
    if isinstance(err, (OSError, IDXError, CheckpointError)):
        return EXIT_IO
    if isinstance(err, (ConfigError, ValueError, KeyError)):
        return EXIT_CONFIG
    return 1


def _artifacts(out: Path) -> list[dict]:
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    return [{"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p)} for p in files]


def run_experiment(cfg: ExperimentConfig, out: Path, argv: Sequence[str] = ()) -> tuple[int, dict]:
    """Run one experiment into ``out``; always writes a manifest, even on failure."""
    from .experiments import RUNNERS

    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(cfg.dump(), encoding="utf-8")
    start = time.perf_counter()
    summary, error, code = {}, None, EXIT_OK
    try:
        summary = RUNNERS[cfg.experiment](cfg, out)
    except Exception as err:  # every failure still gets a manifest
        code = exit_code_for(err)
        error = {"type": type(err).__name__, "message": str(err),
                 "traceback": traceback.format_exc(limit=8)}
    manifest = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.values.items())},
        "config_text": cfg.dump(),
        "config_digest": cfg.digest(),
        "rerun": f"pdeformer {cfg.experiment} --config {RESOLVED_NAME} --run.out <dir>",
        "command": list(argv),
        "version": __version__,
        "git_describe": git_describe(),
        "wall_time_s": round(time.perf_counter() - start, 3),
        "status": "ok" if code == EXIT_OK else "failed",
        "exit_code": code,
        "partial": code != EXIT_OK,
        "error": error,
        "summary": summary,
        "artifacts": [dict(a, partial=code != EXIT_OK) for a in _artifacts(out)],
    }
    write_manifest(out, manifest)
    return code, manifest


def _split_overrides(extra: Sequence[str]) -> list[tuple[str, str]]:
    pairs, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --section.key value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{key}: missing value")
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdeformer",
        description="Compare a Transformer encoder with its PDE information-flow model.",
        epilog=f"Any schema key can be overridden as --section.key value. "
               f"The output directory is run.out, else ${OUT_ENV}.")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", type=Path, default=None,
                        help="'section.key = value' file (omit for all defaults)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = _split_overrides(extra)
        if args.config is None:
            cfg = parse_config_text("", args.experiment, overrides)
        else:
            cfg = parse_config(args.config, args.experiment, overrides)
        out = cfg.output_dir()
    except ConfigError as err:
        print(f"pdeformer: config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as err:
        print(f"pdeformer: cannot read config: {err}", file=sys.stderr)
        return EXIT_IO
    try:
        code, manifest = run_experiment(cfg, out, ["pdeformer", *argv])
    except OSError as err:
        print(f"pdeformer: cannot write to {out}: {err}", file=sys.stderr)
        return EXIT_IO
    if code != EXIT_OK:
        err = manifest["error"]
        print(f"pdeformer: {cfg.experiment} failed ({err['type']}): {err['message']}", file=sys.stderr)
    else:
        print(f"pdeformer: {cfg.experiment} done in {manifest['wall_time_s']:.1f} s -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
