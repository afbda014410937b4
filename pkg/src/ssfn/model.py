"""Spatial-spectral feedback network, written functionally over a named
parameter dictionary.

One parameter set drives every unrolled iteration. Channel plan for base
width ``C`` and ``G`` groups (``C_g = C // G``)::

    embed     per group   3x3  |g| -> C_g, ReLU
    compress  per group   1x1  C + C_g -> C_g       (pooled hidden ++ embedding)
    local     per group   2 residual blocks at C_g
    global                deconv 2x2/2  C -> C, 2 residual blocks at C
    recon                 3x3 C -> C, pixel shuffle r = s/2, 3x3 C/r^2 -> L
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .data import resize_array
from .nn_ops import (
    ShapeError,
    avg_pool_k2s2,
    conv2d,
    deconv2d_k2s2,
    l1_loss,
    pixel_shuffle,
    relu,
)

RES_BLOCKS = 2
RES_BRANCH_INIT_SCALE = 0.1
LOSS_MODES = ("average", "per_iteration")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    band_count: int = 31
    groups: int = 8
    iterations: int = 6
    scale: int = 4
    base_filters: int = 256
    loss_mode: str = "average"

    def __post_init__(self):
        self.validate()

    @property
    def group_filters(self) -> int:
        return self.base_filters // self.groups

    @property
    def shuffle_factor(self) -> int:
        return self.scale // 2

    def validate(self):
        L, G, C, s = self.band_count, self.groups, self.base_filters, self.scale
        if not 1 <= G <= L:
            raise ConfigError(f"groups must satisfy 1 <= G <= L, got G={G}, L={L}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if s not in (2, 4, 8):
            raise ConfigError(f"scale must be 2, 4 or 8, got {s}")
        if C < 1 or C % G:
            raise ConfigError(f"base_filters {C} not divisible by groups {G}")
        r = self.shuffle_factor
        if C % (r * r):
            raise ConfigError(f"base_filters {C} not divisible by shuffle factor^2 {r * r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def group_bands(L: int, G: int) -> list[range]:
    """Split ``L`` bands into ``G`` contiguous groups; earlier groups take the remainder."""
    if G < 1 or G > L:
        raise ConfigError(f"cannot split {L} bands into {G} groups")
    base, rem = divmod(L, G)
    groups, start = [], 0
    for g in range(G):
        size = base + (1 if g < rem else 0)
        groups.append(range(start, start + size))
        start += size
    return groups


# ---------------------------------------------------------------- parameters

def _conv_shapes(prefix, c_out, c_in, k):
    return [(f"{prefix}.weight", (c_out, c_in, k, k)), (f"{prefix}.bias", (c_out,))]


def _resblock_shapes(prefix, width):
    return _conv_shapes(f"{prefix}.conv1", width, width, 3) + _conv_shapes(f"{prefix}.conv2", width, width, 3)


def param_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape for every learnable tensor, in canonical order."""
    C, Cg, L = config.base_filters, config.group_filters, config.band_count
    r = config.shuffle_factor
    shapes = []
    for g, bands in enumerate(group_bands(L, config.groups)):
        shapes += _conv_shapes(f"embed.{g}", Cg, len(bands), 3)
    for g in range(config.groups):
        shapes += _conv_shapes(f"compress.{g}", Cg, C + Cg, 1)
        for b in range(RES_BLOCKS):
            shapes += _resblock_shapes(f"local.{g}.res{b}", Cg)
    shapes += [("global.deconv.weight", (config.groups * Cg, C, 2, 2)), ("global.deconv.bias", (C,))]
    for b in range(RES_BLOCKS):
        shapes += _resblock_shapes(f"global.res{b}", C)
    shapes += _conv_shapes("recon.conv1", C, C, 3)
    shapes += _conv_shapes("recon.conv2", L, C // (r * r), 3)
    return OrderedDict(shapes)


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> "OrderedDict[str, torch.Tensor]":
    """Kaiming fan-in normal kernels and zero biases, with two adjustments.

    The closing conv of every residual branch is scaled by
    ``RES_BRANCH_INIT_SCALE`` and the final reconstruction conv starts at
    zero, so an untrained network outputs the bicubic upsample instead of
    residuals that grow through the unnormalized blocks and feedback loop.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name == "recon.conv2.weight":
            values = np.zeros(shape)
        else:
            if name == "global.deconv.weight":
                fan_in = shape[0]  # non-overlapping 2x2 scatter: one tap per output
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            if ".res" in name and name.endswith("conv2.weight"):
                values *= RES_BRANCH_INIT_SCALE
        params[name] = torch.tensor(values, dtype=dtype)
    return params


def random_params(config: ModelConfig, seed: int = 0, std: float = 0.1, dtype=torch.float32):
    """Every tensor (biases included) drawn i.i.d. normal; for tests and checks."""
    rng = np.random.default_rng(seed)
    return OrderedDict(
        (n, torch.tensor(rng.normal(0.0, std, size=s), dtype=dtype)) for n, s in param_shapes(config).items()
    )


def zero_params(config: ModelConfig, dtype=torch.float32):
    return OrderedDict((n, torch.zeros(s, dtype=dtype)) for n, s in param_shapes(config).items())


# ---------------------------------------------------------------- blocks

def _conv(x, params, prefix):
    return conv2d(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"])


def residual_block(x, params, prefix):
    y = relu(_conv(x, params, f"{prefix}.conv1"))
    return x + _conv(y, params, f"{prefix}.conv2")


def embed(lr: torch.Tensor, grouping, params) -> list:
    covered = sum(len(g) for g in grouping)
    if lr.shape[1] != covered:
        raise ShapeError(f"input has {lr.shape[1]} bands, grouping covers {covered}")
    return [relu(_conv(lr[:, g.start:g.stop], params, f"embed.{i}")) for i, g in enumerate(grouping)]


def init_hidden(batch: int, config: ModelConfig, lr_size, dtype=torch.float32) -> torch.Tensor:
    h, w = lr_size
    return torch.zeros(batch, config.base_filters, 2 * h, 2 * w, dtype=dtype)


def ssfb_step(features: list, hidden_prev: torch.Tensor, params) -> torch.Tensor:
    pooled = avg_pool_k2s2(hidden_prev)
    local = []
    for g, feat in enumerate(features):
        if feat.shape[2:] != pooled.shape[2:]:
            raise ShapeError(f"group {g} features {tuple(feat.shape[2:])} vs pooled hidden {tuple(pooled.shape[2:])}")
        x = _conv(torch.cat([pooled, feat], dim=1), params, f"compress.{g}")
        for b in range(RES_BLOCKS):
            x = residual_block(x, params, f"local.{g}.res{b}")
        local.append(x)
    x = deconv2d_k2s2(torch.cat(local, dim=1), params["global.deconv.weight"], params["global.deconv.bias"])
    for b in range(RES_BLOCKS):
        x = residual_block(x, params, f"global.res{b}")
    return x


def reconstruct(hidden: torch.Tensor, config: ModelConfig, params) -> torch.Tensor:
    x = _conv(hidden, params, "recon.conv1")
    x = pixel_shuffle(x, config.shuffle_factor)
    return _conv(x, params, "recon.conv2")


def bicubic_upsample(lr: torch.Tensor, scale: int) -> torch.Tensor:
    """Bicubic upsample of a batch; shares the numpy path of :mod:`ssfn.data`."""
    _, _, h, w = lr.shape
    up = resize_array(lr.detach().cpu().numpy(), h * scale, w * scale)
    return torch.from_numpy(up).to(lr.dtype)


@dataclass
class IterationOutputs:
    residuals: list
    sr: list
    output: torch.Tensor
    upsampled: torch.Tensor


def forward(lr: torch.Tensor, config: ModelConfig, params, upsampled: torch.Tensor | None = None) -> IterationOutputs:
    """Unroll the feedback loop for ``config.iterations`` steps.

    ``upsampled`` may carry a precomputed bicubic upsample of ``lr``.
    """
    if lr.dim() != 4:
        raise ShapeError(f"lr must be (N, L, h, w), got {tuple(lr.shape)}")
    n, bands, h, w = lr.shape
    if bands != config.band_count:
        raise ShapeError(f"input has {bands} bands, model expects {config.band_count}")
    if h % 2 or w % 2:
        raise ShapeError(f"LR size must be even, got {h}x{w}")
    up = bicubic_upsample(lr, config.scale) if upsampled is None else upsampled

    features = embed(lr, group_bands(bands, config.groups), params)
    hidden = init_hidden(n, config, (h, w), dtype=lr.dtype)
    residuals, srs = [], []
    for _ in range(config.iterations):
        hidden = ssfb_step(features, hidden, params)
        res = reconstruct(hidden, config, params)
        residuals.append(res)
        srs.append(res + up)
    mean_res = residuals[0]
    for res in residuals[1:]:
        mean_res = mean_res + res
    if len(residuals) > 1:
        mean_res = mean_res / len(residuals)
    return IterationOutputs(residuals, srs, mean_res + up, up)


def loss(outputs: IterationOutputs, hr: torch.Tensor, mode: str = "average") -> torch.Tensor:
    if mode == "average":
        return l1_loss(outputs.output, hr)
    if mode == "per_iteration":
        return sum(l1_loss(sr, hr) for sr in outputs.sr) / len(outputs.sr)
    raise ConfigError(f"unknown loss mode {mode!r}")
