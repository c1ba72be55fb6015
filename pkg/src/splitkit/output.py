"""Atomic file writers for reports and matrix renderings.

Every writer goes through a temp file in the destination directory followed
by ``os.replace``, so a crashed run never leaves a half-written artifact.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f"{path.name}.tmp.{os.getpid()}")
    try:
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def write_json(path: str | Path, obj: dict) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2) + "\n").encode())


def write_csv_matrix(path: str | Path, matrix: np.ndarray,
                     row_labels: list[str] | None = None,
                     header: list[str] | None = None) -> None:
    """Comma-delimited matrix dump, values via repr of float64 for round-tripping."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"need a 2-D matrix, got shape {m.shape}")
    lines = []
    if header is not None:
        lines.append(",".join(header))
    for i, row in enumerate(m):
        cells = [f"{float(v):.10g}" for v in row]
        if row_labels is not None:
            cells.insert(0, row_labels[i])
        lines.append(",".join(cells))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def _upscale(cells: np.ndarray, cell: int) -> np.ndarray:
    return np.repeat(np.repeat(cells, cell, axis=0), cell, axis=1)


def write_pgm(path: str | Path, values: np.ndarray, cell: int = 16) -> None:
    """Binary PGM (P5) heatmap: values in [0,1] map to gray 0..255, one cell per entry."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if v.ndim != 2:
        raise ValueError(f"need a 2-D matrix, got shape {v.shape}")
    gray = _upscale(np.round(v * 255).astype(np.uint8), cell)
    head = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, head + gray.tobytes())


def write_ppm(path: str | Path, values: np.ndarray, cell: int = 16) -> None:
    """Binary PPM (P6) heatmap with a blue-to-red colormap over [0,1]."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    if v.ndim != 2:
        raise ValueError(f"need a 2-D matrix, got shape {v.shape}")
    r = np.round(v * 255)
    b = np.round((1.0 - v) * 255)
    g = np.round((1.0 - np.abs(v - 0.5) * 2.0) * 160)
    rgb = np.stack([r, g, b], axis=-1).astype(np.uint8)
    rgb = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    head = f"P6\n{rgb.shape[1]} {rgb.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, head + rgb.tobytes())
