"""Synthetic hyperspectral scenes for smoke tests and demos.

Scenes mix a few smooth endmember spectra through piecewise-constant,
slightly blurred abundance maps (disks and rectangles) plus mild texture, so
they have sharp edges that bicubic interpolation cannot recover.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import HsiCube


def endmembers(bands: int, count: int, rng: np.random.Generator) -> np.ndarray:
    wl = np.linspace(0.0, 1.0, bands)
    spectra = []
    for _ in range(count):
        centers = rng.uniform(-0.2, 1.2, size=2)
        widths = rng.uniform(0.15, 0.5, size=2)
        heights = rng.uniform(0.2, 1.0, size=2)
        s = 0.05 + sum(a * np.exp(-0.5 * ((wl - c) / w) ** 2) for a, c, w in zip(heights, centers, widths))
        spectra.append(s)
    spectra = np.array(spectra)
    return spectra / spectra.max()


def synthetic_cube(bands: int = 31, height: int = 128, width: int = 128, seed: int = 0,
                   materials: int = 5, shapes: int = 24, name: str | None = None) -> HsiCube:
    rng = np.random.default_rng(seed)
    spectra = endmembers(bands, materials, rng)
    labels = np.zeros((height, width), dtype=int)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(shapes):
        m = int(rng.integers(materials))
        if rng.random() < 0.5:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            r = rng.uniform(3, max(4, min(height, width) / 4))
            labels[(yy - cy) ** 2 + (xx - cx) ** 2 < r * r] = m
        else:
            y0, x0 = int(rng.integers(height)), int(rng.integers(width))
            h, w = int(rng.integers(2, height // 3 + 3)), int(rng.integers(2, width // 3 + 3))
            labels[y0:y0 + h, x0:x0 + w] = m
    abundance = np.eye(materials)[labels].transpose(2, 0, 1)
    abundance = gaussian_filter(abundance, sigma=(0, 0.7, 0.7))
    shading = 0.75 + 0.25 * gaussian_filter(rng.random((height, width)), 1.0)
    shading = (shading - shading.min()) / max(np.ptp(shading), 1e-12) * 0.4 + 0.6
    cube = np.einsum("mhw,mb->bhw", abundance, spectra) * shading
    return HsiCube(np.clip(cube, 0.0, 1.0).astype(np.float32), name=name or f"synthetic_{seed}")
