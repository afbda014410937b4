"""Full-reference quality measures for hyperspectral cubes.

All functions take ``(sr, hr)`` as :class:`~ssfn.data.HsiCube` or
``(L, H, W)`` arrays, compute in float64, and treat ``hr`` as ground truth.
Data range is fixed at 1.0.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
CSV_COLUMNS = ("name", "s", "CC", "SAM", "RMSE", "ERGAS", "PSNR", "SSIM")


class MetricError(ValueError):
    pass


def _pair(sr, hr):
    a = np.asarray(getattr(sr, "data", sr), dtype=np.float64)
    b = np.asarray(getattr(hr, "data", hr), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise MetricError(f"expected (L, H, W) cubes, got {a.shape}")
    return a, b


def cc(sr, hr) -> float:
    """Band-averaged Pearson correlation.

    A band that is constant in either cube counts as 1 when the two bands are
    identical and is skipped otherwise.
    """
    a, b = _pair(sr, hr)
    values = []
    for x, y in zip(a.reshape(len(a), -1), b.reshape(len(b), -1)):
        dx, dy = x - x.mean(), y - y.mean()
        sx, sy = np.sqrt((dx * dx).sum()), np.sqrt((dy * dy).sum())
        if sx == 0 or sy == 0:
            if np.array_equal(x, y):
                values.append(1.0)
            continue
        values.append(float((dx * dy).sum() / (sx * sy)))
    if not values:
        raise MetricError("correlation undefined: every band is constant and differs")
    return float(np.mean(values))


def sam(sr, hr) -> float:
    """Mean spectral angle in degrees over pixels with non-zero spectra."""
    a, b = _pair(sr, hr)
    x = a.reshape(len(a), -1)
    y = b.reshape(len(b), -1)
    nx, ny = np.linalg.norm(x, axis=0), np.linalg.norm(y, axis=0)
    valid = (nx > 0) & (ny > 0)
    if not valid.any():
        log.warning("SAM: every pixel has a zero spectrum; reporting 0")
        return 0.0
    cos = (x[:, valid] * y[:, valid]).sum(axis=0) / (nx[valid] * ny[valid])
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())


def band_rmse(sr, hr) -> np.ndarray:
    a, b = _pair(sr, hr)
    return np.sqrt(((a - b) ** 2).reshape(len(a), -1).mean(axis=1))


def rmse(sr, hr) -> float:
    a, b = _pair(sr, hr)
    return float(np.sqrt(((a - b) ** 2).mean()))


def ergas(sr, hr, s: int) -> float:
    a, b = _pair(sr, hr)
    mu = b.reshape(len(b), -1).mean(axis=1)
    zero = np.flatnonzero(mu == 0)
    if zero.size:
        raise MetricError(f"ERGAS undefined: reference band {int(zero[0])} has zero mean")
    ratios = band_rmse(a, b) / mu
    return float(100.0 * s * np.sqrt(np.mean(ratios ** 2)))


def psnr(sr, hr) -> float:
    """Band-averaged PSNR; a band with zero error contributes ``PSNR_CAP``."""
    a, b = _pair(sr, hr)
    mse = ((a - b) ** 2).reshape(len(a), -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        per_band = np.where(mse == 0, PSNR_CAP, 10.0 * np.log10(1.0 / np.where(mse == 0, 1.0, mse)))
    return float(per_band.mean())


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, valid region only
    cols = sliding_window_view(img, len(g), axis=-2) @ g
    return sliding_window_view(cols, len(g), axis=-1) @ g


def ssim_band(x: np.ndarray, y: np.ndarray) -> float:
    if min(x.shape) < SSIM_WIN:
        raise MetricError(f"SSIM needs at least {SSIM_WIN}x{SSIM_WIN} pixels, got {x.shape}")
    g = gaussian_window()
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def ssim(sr, hr) -> float:
    a, b = _pair(sr, hr)
    return float(np.mean([ssim_band(x, y) for x, y in zip(a, b)]))


@dataclass
class MetricReport:
    name: str
    scale: int
    cc: float
    sam: float
    rmse: float
    ergas: float
    psnr: float
    ssim: float

    def values(self) -> tuple:
        return (self.cc, self.sam, self.rmse, self.ergas, self.psnr, self.ssim)

    def row(self) -> list[str]:
        return [self.name, str(self.scale)] + [f"{v:.6f}" for v in self.values()]


METRIC_FIELDS = tuple(f.name for f in fields(MetricReport))[2:]


def evaluate_pair(sr, hr, s: int, name: str = "") -> MetricReport:
    if not name:
        name = getattr(hr, "name", "") or getattr(sr, "name", "")
    return MetricReport(
        name=name,
        scale=s,
        cc=cc(sr, hr),
        sam=sam(sr, hr),
        rmse=rmse(sr, hr),
        ergas=ergas(sr, hr, s),
        psnr=psnr(sr, hr),
        ssim=ssim(sr, hr),
    )


def aggregate(reports: list[MetricReport], name: str = "average") -> MetricReport:
    if not reports:
        raise MetricError("cannot aggregate an empty report list")
    scales = {r.scale for r in reports}
    if len(scales) != 1:
        raise MetricError(f"reports mix scales {sorted(scales)}")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_FIELDS}
    return MetricReport(name=name, scale=scales.pop(), **means)


def write_report_csv(reports: list[MetricReport], path, with_average: bool = True) -> None:
    rows = list(reports)
    if with_average:
        rows.append(aggregate(reports))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow(r.row())


def read_report_csv(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            MetricReport(row["name"], int(row["s"]), *(float(row[c]) for c in CSV_COLUMNS[2:]))
            for row in reader
        ]

