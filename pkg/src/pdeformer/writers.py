"""Artifact writers: CSV tables, 8-bit PGM heatmaps and the run manifest.

Floats in CSV use ``%.17g`` so every value parses back to the same double.
"""
from __future__ import annotations

import hashlib
import json
import subprocess
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FLOAT_FMT = "%.17g"


def format_field(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % float(v)
    text = str(v)
    if any(c in text for c in ',"\n'):
        raise ValueError(f"CSV field {text!r} needs quoting, which the format does not allow")
    return text


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"{path.name}: row has {len(row)} fields, header {len(header)}")
        lines.append(",".join(format_field(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def write_matrix_csv(path, matrix: np.ndarray, prefix: str = "c") -> Path:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise ValueError("matrix must be 2-D")
    header = ["row"] + [f"{prefix}{j}" for j in range(m.shape[1])]
    return write_csv(path, header, ([i, *r] for i, r in enumerate(m.tolist())))


def heatmap_bytes(matrix: np.ndarray) -> bytes:
    """Binary PGM (P5), one pixel per entry, min-max scaled to 0..255."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or not np.isfinite(m).all():
        raise ValueError("heatmap needs a finite 2-D matrix")
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros(m.shape) if hi == lo else (m - lo) / (hi - lo)
    pixels = np.rint(scaled * 255).astype(np.uint8)
    return f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii") + pixels.tobytes()


def write_pgm(path, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(heatmap_bytes(matrix))
    return path


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit P5 image")
    width, height = (int(t) for t in parts[1].split())
    if len(parts[3]) != width * height:
        raise ValueError(f"{path}: payload has {len(parts[3])} bytes, expected {width * height}")
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)


def git_describe() -> str:
    root = Path(__file__).resolve().parents[2]
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=root,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return res.stdout.strip() if res.returncode == 0 and res.stdout.strip() else "unknown"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, payload: dict[str, Any]) -> Path:
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
