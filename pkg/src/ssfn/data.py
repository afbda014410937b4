"""Hyperspectral cube I/O, bicubic degradation, patch sampling and splits."""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

BICUBIC_A = -0.5
ROLES = ("train", "test")
_IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}
_TRAILING_INDEX = re.compile(r"(\d+)$")


class CubeError(ValueError):
    pass


@dataclass
class HsiCube:
    """A (bands, rows, cols) reflectance cube with values in [0, 1]."""

    data: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise CubeError(f"cube must be 3-D with non-empty axes, got {self.data.shape}")

    @property
    def band_count(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data, name=None) -> "HsiCube":
        return HsiCube(data, self.name if name is None else name)


@dataclass(frozen=True)
class DegradationSpec:
    scale: int = 4
    antialias: bool = True
    a: float = BICUBIC_A

    def __post_init__(self):
        if self.scale < 1:
            raise CubeError(f"scale must be >= 1, got {self.scale}")


@dataclass
class DatasetManifest:
    entries: list[tuple[str, str]] = field(default_factory=list)
    split_seed: int = 0
    split_ratio: float = 0.8

    def paths(self, role: str) -> list[str]:
        return [p for p, r in self.entries if r == role]

    def write(self, path) -> None:
        lines = [f"# split_seed={self.split_seed} split_ratio={self.split_ratio!r}"]
        lines += [f"{p}\t{r}" for p, r in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        seed, ratio, entries = 0, 0.8, []
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for key, value in re.findall(r"(\w+)=(\S+)", line):
                    if key == "split_seed":
                        seed = int(value)
                    elif key == "split_ratio":
                        ratio = float(value)
                continue
            p, _, role = raw.rstrip().rpartition("\t")
            if not p:
                p, _, role = line.rpartition(" ")
            role = role.strip()
            if role not in ROLES and role != "unassigned":
                raise CubeError(f"bad role {role!r} in manifest line {raw!r}")
            entries.append((p.strip(), role))
        return cls(entries, seed, ratio)


# ---------------------------------------------------------------- I/O

def _band_files(directory: Path) -> list[Path]:
    found = []
    for f in directory.iterdir():
        if f.suffix.lower() in _IMAGE_SUFFIXES and _TRAILING_INDEX.search(f.stem):
            found.append(f)
    return sorted(found, key=lambda f: (int(_TRAILING_INDEX.search(f.stem).group(1)), f.name))


def _read_band(path: Path) -> tuple[np.ndarray, float]:
    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if mode in ("I;16", "I;16L", "I;16B", "I;16N"):
        return arr.astype(np.float64), 65535.0
    if mode == "L":
        return arr.astype(np.float64), 255.0
    if mode == "I" and arr.max(initial=0) <= 65535:
        # PIL widens some 16-bit PNGs to 32-bit integer mode
        return arr.astype(np.float64), 65535.0
    raise CubeError(f"unsupported bit depth / mode {mode!r} in {path}")


def load_cube(path, layout: str = "auto") -> HsiCube:
    """Read a cube from a band-image directory or a planar binary file.

    Band images are normalized by their dtype maximum (255 or 65535) and
    stacked in ascending filename index order.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such cube: {path}")
    if layout == "auto":
        layout = "bands" if path.is_dir() else "planar"
    if layout == "planar":
        return _load_planar(path)
    if layout != "bands":
        raise CubeError(f"unknown layout {layout!r}")

    files = _band_files(path)
    if not files:
        # CAVE nests scene_ms/scene_ms/*.png
        subdirs = [d for d in path.iterdir() if d.is_dir()]
        if len(subdirs) == 1:
            files = _band_files(subdirs[0])
    if not files:
        raise CubeError(f"no bands found in {path}")

    bands, shape, depth = [], None, None
    for f in files:
        band, maxval = _read_band(f)
        if band.ndim != 2:
            raise CubeError(f"band image {f} is not single-channel")
        if shape is None:
            shape, depth = band.shape, maxval
        elif band.shape != shape:
            raise CubeError(f"inconsistent band dimensions: {f} is {band.shape}, expected {shape}")
        elif maxval != depth:
            raise CubeError(f"inconsistent bit depth in {f}")
        bands.append(band / maxval)
    return HsiCube(np.stack(bands).astype(np.float32), name=path.name)


def _header_path(path: Path) -> tuple[Path, Path]:
    if path.suffix in (".hdr", ".raw"):
        return path.with_suffix(".raw"), path.with_suffix(".hdr")
    return path, path.with_name(path.name + ".hdr")


def save_cube(cube: HsiCube, path) -> Path:
    """Write ``cube`` as a band-sequential f32le payload plus a text header.

    Returns the payload path.
    """
    raw, hdr = _header_path(Path(path))
    bands, height, width = cube.shape
    hdr.write_text(
        f"width = {width}\nheight = {height}\nbands = {bands}\n"
        f'dtype = "f32le"\nbyte_order = "little"\nname = "{cube.name}"\n'
    )
    raw.write_bytes(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    return raw


def _load_planar(path: Path) -> HsiCube:
    raw, hdr = _header_path(path)
    if not hdr.exists() or not raw.exists():
        raise FileNotFoundError(f"planar cube needs both {raw} and {hdr}")
    meta = {}
    for line in hdr.read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip().strip('"')
    if meta.get("dtype", "f32le") != "f32le":
        raise CubeError(f"unsupported dtype {meta['dtype']!r}")
    shape = tuple(int(meta[k]) for k in ("bands", "height", "width"))
    payload = np.frombuffer(raw.read_bytes(), dtype="<f4")
    if payload.size != math.prod(shape):
        raise CubeError(f"payload of {raw} has {payload.size} values, header says {shape}")
    name = meta.get("name") or raw.stem
    return HsiCube(payload.reshape(shape).astype(np.float32), name=name)


# ---------------------------------------------------------------- resampling

def cubic_kernel(x, a: float = BICUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_matrix(n_in: int, n_out: int, a: float = BICUBIC_A, antialias: bool = True) -> np.ndarray:
    """Dense (n_out, n_in) bicubic interpolation matrix with clamped borders.

    Rows sum to one. On downscale with ``antialias`` the kernel is stretched
    by the scale ratio.
    """
    if n_in < 1 or n_out < 1:
        raise CubeError(f"sizes must be positive, got {n_in} -> {n_out}")
    ratio = n_in / n_out
    stretch = ratio if (antialias and ratio > 1) else 1.0
    support = 2.0 * stretch
    out = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * ratio
        lo = int(math.floor(center - support))
        hi = int(math.ceil(center + support))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps + 0.5 - center) / stretch, a)
        w /= w.sum()
        np.add.at(out[i], np.clip(taps, 0, n_in - 1), w)
    return out


@functools.lru_cache(maxsize=128)
def _cached_matrix(n_in, n_out, a, antialias):
    m = resize_matrix(n_in, n_out, a, antialias)
    m.flags.writeable = False
    return m


def resize_array(arr: np.ndarray, out_h: int, out_w: int, a: float = BICUBIC_A, antialias: bool = True) -> np.ndarray:
    """Resample the last two axes of ``arr`` (float64 result, clamped to [0, 1])."""
    if out_h < 1 or out_w < 1:
        raise CubeError(f"target size must be positive, got {out_h}x{out_w}")
    h, w = arr.shape[-2:]
    rows = _cached_matrix(h, out_h, a, antialias)
    cols = _cached_matrix(w, out_w, a, antialias)
    out = np.matmul(np.matmul(rows, np.asarray(arr, dtype=np.float64)), cols.T)
    return np.clip(out, 0.0, 1.0)


def bicubic_resize(cube: HsiCube, out_h: int, out_w: int, spec: DegradationSpec | None = None) -> HsiCube:
    """Separable bicubic resampling of every band; identity when the size is unchanged."""
    spec = spec or DegradationSpec()
    if out_h < 1 or out_w < 1:
        raise CubeError(f"target size must be positive, got {out_h}x{out_w}")
    if (out_h, out_w) == cube.shape[1:]:
        return cube.with_data(cube.data.copy())
    out = resize_array(cube.data, out_h, out_w, spec.a, spec.antialias)
    return cube.with_data(out.astype(np.float32))


def degrade(hr: HsiCube, spec: DegradationSpec) -> HsiCube:
    _, h, w = hr.shape
    s = spec.scale
    if h % s or w % s:
        raise CubeError(f"cube {h}x{w} is not divisible by scale {s}")
    return bicubic_resize(hr, h // s, w // s, spec)


def upsample(lr: HsiCube, scale: int) -> HsiCube:
    _, h, w = lr.shape
    return bicubic_resize(lr, h * scale, w * scale, DegradationSpec(scale))


# ---------------------------------------------------------------- sampling

def crop(cube: HsiCube, top: int, left: int, h: int, w: int) -> HsiCube:
    return cube.with_data(cube.data[:, top:top + h, left:left + w].copy())


def crop_topleft(cube: HsiCube, side: int) -> HsiCube:
    _, h, w = cube.shape
    if side < 1 or side > h or side > w:
        raise CubeError(f"cannot crop {side}x{side} from {h}x{w}")
    return crop(cube, 0, 0, side, side)


def sample_patch_position(cube: HsiCube, hr_side: int, scale: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform top-left corner, aligned to multiples of ``scale``."""
    _, h, w = cube.shape
    if h < hr_side or w < hr_side:
        raise CubeError(f"cube {cube.name!r} ({h}x{w}) is too small for a {hr_side} patch")
    top = int(rng.integers(0, (h - hr_side) // scale + 1)) * scale
    left = int(rng.integers(0, (w - hr_side) // scale + 1)) * scale
    return top, left


def patch_coordinates(cube: HsiCube, lr_size: int, spec: DegradationSpec, count: int, rng_seed: int):
    rng = np.random.default_rng(rng_seed)
    hr_side = lr_size * spec.scale
    return [sample_patch_position(cube, hr_side, spec.scale, rng) for _ in range(count)]


def extract_patch_pairs(cube: HsiCube, lr_size: int, spec: DegradationSpec, count: int, rng_seed: int):
    hr_side = lr_size * spec.scale
    _, h, w = cube.shape
    if h < hr_side or w < hr_side:
        raise CubeError(f"cube {cube.name!r} ({h}x{w}) is too small for a {hr_side} patch")
    pairs = []
    for top, left in patch_coordinates(cube, lr_size, spec, count, rng_seed):
        hr = crop(cube, top, left, hr_side, hr_side)
        pairs.append((degrade(hr, spec), hr))
    return pairs


def split_dataset(manifest: DatasetManifest) -> DatasetManifest:
    n = len(manifest.entries)
    if n < 2:
        raise CubeError(f"need at least 2 entries to split, got {n}")
    if not 0 < manifest.split_ratio < 1:
        raise CubeError(f"split ratio must be in (0, 1), got {manifest.split_ratio}")
    order = np.random.default_rng(manifest.split_seed).permutation(n)
    # round before ceil so 0.8 * 30 stays 24
    n_train = math.ceil(round(manifest.split_ratio * n, 9))
    n_train = min(max(n_train, 1), n - 1)
    entries = [
        (manifest.entries[k][0], "train" if rank < n_train else "test")
        for rank, k in enumerate(order)
    ]
    return replace(manifest, entries=entries)
