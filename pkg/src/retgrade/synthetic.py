"""Synthetic fundus-like corpus with class-distinct lesions.

Five grades map to five visually distinct lesion patterns on a shared
disc-shaped background: none, small dots, medium blobs, large blobs, and
vessel tufts. The corpus exists so training, evaluation, and the service
can be exercised end to end without any clinical data; it makes no claim
of medical realism beyond coarse geometry.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .fundus import DatasetManifest, FundusImage, ManifestEntry, save_png, split_rng

_STAGE_SYNTH = 6

LESION_COLOR = np.array([25.0, 6.0, 4.0])  # near-black red
TUFT_COLOR = np.array([120.0, 26.0, 16.0])


def _stamp_disc(canvas: np.ndarray, cy: float, cx: float, radius: float,
                color: np.ndarray, alpha_peak: float = 0.95) -> None:
    h, w = canvas.shape[:2]
    y0, y1 = max(0, int(cy - radius) - 1), min(h, int(cy + radius) + 2)
    x0, x1 = max(0, int(cx - radius) - 1), min(w, int(cx + radius) + 2)
    if y0 >= y1 or x0 >= x1:
        return
    ys = np.arange(y0, y1, dtype=np.float64)[:, None]
    xs = np.arange(x0, x1, dtype=np.float64)[None, :]
    d = np.hypot(ys - cy, xs - cx) / max(radius, 1e-6)
    alpha = np.where(d <= 1.0, alpha_peak * np.exp(-(d ** 2) / (2 * 0.45 ** 2)), 0.0)
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = patch * (1 - alpha[..., None]) + color * alpha[..., None]


def _stamp_polyline(canvas: np.ndarray, points: np.ndarray, width: float,
                    color: np.ndarray) -> None:
    for (y0, x0), (y1, x1) in zip(points[:-1], points[1:]):
        steps = max(2, int(np.hypot(y1 - y0, x1 - x0) * 2))
        for t in np.linspace(0.0, 1.0, steps):
            _stamp_disc(canvas, y0 + t * (y1 - y0), x0 + t * (x1 - x0), width, color, 0.85)


def generate_image(seed: int, index: int, label: int, size: int = 128) -> FundusImage:
    """One deterministic synthetic fundus image for a grade label."""
    if not 0 <= label <= 4:
        raise ValueError(f"label {label} outside [0,4]")
    rng = split_rng(seed, index, _STAGE_SYNTH)
    h = w = size
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    disc_r = 0.46 * size

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(ys - cy, xs - cx)
    inside = r < disc_r
    shade = np.clip(1.0 - (r / disc_r) ** 2 * 0.3, 0.0, 1.0)
    red = 8.0 + inside * shade * rng.uniform(168, 180)
    green = 8.0 + inside * shade * rng.uniform(62, 70)
    blue = 8.0 + inside * shade * rng.uniform(20, 26)
    canvas = np.stack([red, green, blue], axis=-1)

    # optic-disc-like bright spot
    angle = rng.uniform(0, 2 * np.pi)
    od_y = cy + 0.55 * disc_r * np.sin(angle)
    od_x = cx + 0.55 * disc_r * np.cos(angle)
    _stamp_disc(canvas, od_y, od_x, 0.09 * size, np.array([235.0, 205.0, 150.0]), 0.8)

    def lesion_center():
        rad = rng.uniform(0, 0.78 * disc_r)
        theta = rng.uniform(0, 2 * np.pi)
        return cy + rad * np.sin(theta), cx + rad * np.cos(theta)

    if label == 1:  # small dots
        for _ in range(int(rng.integers(8, 13))):
            y, x = lesion_center()
            _stamp_disc(canvas, y, x, rng.uniform(1.5, 2.5) * size / 128, LESION_COLOR)
    elif label == 2:  # medium blobs
        for _ in range(int(rng.integers(5, 9))):
            y, x = lesion_center()
            _stamp_disc(canvas, y, x, rng.uniform(5.0, 7.0) * size / 128, LESION_COLOR)
    elif label == 3:  # large blobs
        for _ in range(int(rng.integers(6, 10))):
            y, x = lesion_center()
            _stamp_disc(canvas, y, x, rng.uniform(10.0, 14.0) * size / 128, LESION_COLOR)
    elif label == 4:  # vessel tufts
        for _ in range(int(rng.integers(6, 10))):
            oy, ox = lesion_center()
            for _ in range(int(rng.integers(6, 10))):
                heading = rng.uniform(0, 2 * np.pi)
                length = rng.uniform(14, 22) * size / 128
                pts = [(oy, ox)]
                y, x = oy, ox
                for _ in range(4):
                    heading += rng.uniform(-0.9, 0.9)
                    y += np.sin(heading) * length / 4
                    x += np.cos(heading) * length / 4
                    pts.append((y, x))
                _stamp_polyline(canvas, np.array(pts), 1.4 * size / 128, TUFT_COLOR)

    canvas += rng.uniform(-3, 3, size=canvas.shape)
    return FundusImage(pixels=np.clip(np.rint(canvas), 0, 255).astype(np.uint8),
                       source_id=f"synthetic/{index}")


def generate_corpus(root, count: int, seed: int, size: int = 128,
                    origin: str = "synthetic") -> DatasetManifest:
    """Write a label-balanced corpus under root/<origin>/ plus its manifest."""
    root = Path(root)
    entries = []
    for index in range(count):
        label = index % 5
        img = generate_image(seed, index, label, size=size)
        rel = f"{origin}/img_{index:05d}_g{label}.png"
        save_png(img, root / rel)
        entries.append(ManifestEntry(rel, label, origin, 0))
    manifest = DatasetManifest(entries=entries)
    manifest.save(root / "manifest.csv")
    return manifest
