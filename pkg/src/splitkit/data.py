"""Synthetic segmentation scenes: colored shapes on textured noise.

Each sample is an (H, W, 3) float image in [0, 1] plus an integer class mask.
Class 0 is the textured background; classes 1..num_classes-1 are drawn as
rectangles, discs, and triangles filled with a class-specific palette color
(joint geometry for pixels and labels, so masks are pixel-perfect).  The whole
dataset is a pure function of (n, H, W, num_classes, seed).
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .rng import Rng, derive_seed
from .tensor import Tensor


@dataclass
class ToySegSample:
    image: Tensor          # (H, W, 3) float32 in [0, 1], constant leaf
    mask: np.ndarray       # (H, W) int64 class ids


def class_palette(num_classes: int) -> np.ndarray:
    """Vivid, well-separated colors for classes 1..num_classes-1 (row 0 unused)."""
    pal = np.zeros((num_classes, 3), dtype=np.float32)
    for c in range(1, num_classes):
        hue = ((c - 1) * 0.37 + 0.02) % 1.0
        pal[c] = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return pal


def draw_rect(image: np.ndarray, mask: np.ndarray, y0: int, x0: int, y1: int, x1: int,
              color: np.ndarray, cls: int) -> None:
    image[y0:y1, x0:x1, :] = color
    mask[y0:y1, x0:x1] = cls


def draw_disc(image: np.ndarray, mask: np.ndarray, cy: float, cx: float, r: float,
              color: np.ndarray, cls: int) -> None:
    H, W = mask.shape
    yy, xx = np.ogrid[:H, :W]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    image[inside] = color
    mask[inside] = cls


def draw_triangle(image: np.ndarray, mask: np.ndarray, pts: np.ndarray,
                  color: np.ndarray, cls: int) -> None:
    """Fill a triangle given (3, 2) vertex rows (y, x) via half-plane tests."""
    H, W = mask.shape
    yy, xx = np.mgrid[:H, :W]
    inside = np.ones((H, W), dtype=bool)
    signs = []
    for i in range(3):
        (ay, ax), (by, bx) = pts[i], pts[(i + 1) % 3]
        signs.append((xx - ax) * (by - ay) - (yy - ay) * (bx - ax))
    ref = ((pts[2, 1] - pts[0, 1]) * (pts[1, 0] - pts[0, 0])
           - (pts[2, 0] - pts[0, 0]) * (pts[1, 1] - pts[0, 1]))
    if ref == 0:
        return  # degenerate triangle: draw nothing
    for s in signs:
        inside &= (s * ref >= 0)
    image[inside] = color
    mask[inside] = cls


def _render_scene(H: int, W: int, num_classes: int, rng: Rng,
                  palette: np.ndarray) -> ToySegSample:
    # Textured gray background: tinted base + horizontal wave + pixel noise.
    base = 0.25 + 0.3 * float(rng.uniform())
    tint = rng.uniform((3,), low=-0.04, high=0.04)
    phase = float(rng.uniform(low=0.0, high=2.0 * np.pi))
    freq = 2.0 + 4.0 * float(rng.uniform())
    wave = 0.05 * np.sin(np.linspace(0.0, freq * 2.0 * np.pi, W) + phase).astype(np.float32)
    image = np.empty((H, W, 3), dtype=np.float32)
    image[:] = base + tint
    image += wave[None, :, None]
    image += rng.uniform((H, W, 1), low=-0.06, high=0.06)
    mask = np.zeros((H, W), dtype=np.int64)

    smin = max(4, min(H, W) // 10)
    smax = max(smin + 2, min(H, W) // 3)
    for _ in range(2 + rng.randint(0, 3)):
        cls = 1 + rng.randint(0, num_classes - 1)
        color = np.clip(palette[cls] + rng.uniform((3,), low=-0.08, high=0.08), 0.0, 1.0)
        kind = rng.randint(0, 3)
        if kind == 0:
            hgt = smin + rng.randint(0, smax - smin)
            wid = smin + rng.randint(0, smax - smin)
            y0 = rng.randint(0, H - hgt)
            x0 = rng.randint(0, W - wid)
            draw_rect(image, mask, y0, x0, y0 + hgt, x0 + wid, color, cls)
        elif kind == 1:
            r = smin // 2 + rng.randint(0, max(1, (smax - smin) // 2))
            cy = r + rng.randint(0, max(1, H - 2 * r))
            cx = r + rng.randint(0, max(1, W - 2 * r))
            draw_disc(image, mask, cy, cx, r, color, cls)
        else:
            cy = rng.randint(smin, H - smin)
            cx = rng.randint(smin, W - smin)
            span = smax
            pts = np.stack([
                np.clip(np.array([cy + rng.randint(-span, span + 1) for _ in range(3)]), 0, H - 1),
                np.clip(np.array([cx + rng.randint(-span, span + 1) for _ in range(3)]), 0, W - 1),
            ], axis=1)
            draw_triangle(image, mask, pts, color, cls)

    # Per-pixel speckle over everything, then clamp to the valid range.
    image += rng.uniform((H, W, 3), low=-0.03, high=0.03)
    np.clip(image, 0.0, 1.0, out=image)
    return ToySegSample(image=Tensor(image), mask=mask)


def make_toy_dataset(n: int, H: int, W: int, num_classes: int, seed: int) -> list[ToySegSample]:
    """Deterministic list of synthetic scenes; same seed, same bytes."""
    if n < 1 or H < 8 or W < 8:
        raise ValueError(f"degenerate dataset dims: n={n}, H={H}, W={W}")
    if num_classes < 2:
        raise ValueError("need at least 2 classes (background + one shape class)")
    palette = class_palette(num_classes)
    return [
        _render_scene(H, W, num_classes, Rng(derive_seed(seed, 1009, i)), palette)
        for i in range(n)
    ]
