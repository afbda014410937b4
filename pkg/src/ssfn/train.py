"""Seeded training loop, checkpoints, resumable runs and checkpoint evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import metrics
from .data import (
    DatasetManifest,
    DegradationSpec,
    HsiCube,
    crop,
    crop_topleft,
    degrade,
    load_cube,
    sample_patch_position,
    upsample,
)
from .model import ConfigError, ModelConfig, forward, init_params, loss, param_shapes, zero_params
from .nn_ops import AdamState, NonFiniteError, adam_step

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SSFNCKPT"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss", "lr", "seconds")
SCHEDULES = ("constant", "halve")


class CheckpointError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    lr: float = 2e-4
    total_steps: int = 1000
    checkpoint_every: int = 500
    seed: int = 0
    lr_schedule: str = "constant"
    halve_every: int = 100_000
    augment: bool = False
    lr_patch: int = 32
    antialias: bool = True
    eval_every: int = 0
    eval_crop: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}")
        if self.lr_patch < 2 or self.lr_patch % 2:
            raise ConfigError(f"lr_patch must be even and >= 2, got {self.lr_patch}")
        if self.halve_every < 1 or self.checkpoint_every < 0:
            raise ConfigError("halve_every must be >= 1 and checkpoint_every >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Rate applied on the update that moves the counter from ``step`` to ``step + 1``."""
    if cfg.lr_schedule == "halve":
        return cfg.lr * 0.5 ** (step // cfg.halve_every)
    return cfg.lr


# ---------------------------------------------------------------- config files

def read_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Parse a TOML file with optional ``[model]`` and ``[train]`` tables."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    unknown = set(doc) - {"model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return ModelConfig.from_dict(doc.get("model", {})), TrainConfig.from_dict(doc.get("train", {}))


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def write_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> None:
    lines = ["[model]"] + [f"{k} = {_toml_value(v)}" for k, v in model_cfg.to_dict().items()]
    if train_cfg is not None:
        lines += ["", "[train]"] + [f"{k} = {_toml_value(v)}" for k, v in train_cfg.to_dict().items()]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    train_config: TrainConfig | None = None
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    rng_state: dict | None = None
    version: int = CHECKPOINT_VERSION

    @property
    def payload_bytes(self) -> int:
        """Size of the parameter payload alone (32-bit values)."""
        return 4 * sum(p.numel() for p in self.params.values())

    def save(self, path) -> Path:
        """Write the checkpoint.

        Layout: ``SSFNCKPT``, a little-endian u64 header length, a UTF-8 JSON
        header (version, configs, step, optimizer scalars, RNG state and a
        tensor index), then every tensor as contiguous f32le values. Tensors
        appear in order: parameters, ADAM first moments, ADAM second moments.
        """
        index, chunks, offset = [], [], 0
        groups = [("param", self.params), ("adam_m", self.adam.m), ("adam_v", self.adam.v)]
        for group, tensors in groups:
            for name, t in tensors.items():
                blob = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes()
                index.append({"group": group, "name": name, "shape": list(t.shape), "offset": offset})
                chunks.append(blob)
                offset += len(blob)
        header = {
            "version": self.version,
            "model_config": self.model_config.to_dict(),
            "train_config": None if self.train_config is None else self.train_config.to_dict(),
            "step": self.step,
            "adam": {k: getattr(self.adam, k) for k in ("lr", "beta1", "beta2", "eps", "step")},
            "rng_state": self.rng_state,
            "tensors": index,
        }
        head = json.dumps(header).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head)
            for blob in chunks:
                fh.write(blob)
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if not raw.startswith(CHECKPOINT_MAGIC):
            raise CheckpointError(f"{path} is not a checkpoint file")
        start = len(CHECKPOINT_MAGIC)
        (n,) = struct.unpack_from("<Q", raw, start)
        header = json.loads(raw[start + 8:start + 8 + n])
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {header.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
            )
        body = memoryview(raw)[start + 8 + n:]
        groups = {"param": OrderedDict(), "adam_m": OrderedDict(), "adam_v": OrderedDict()}
        for entry in header["tensors"]:
            count = math.prod(entry["shape"])
            arr = np.frombuffer(body, dtype="<f4", count=count, offset=entry["offset"])
            groups[entry["group"]][entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))
        model_cfg = ModelConfig.from_dict(header["model_config"])
        expected = param_shapes(model_cfg)
        got = OrderedDict((k, tuple(v.shape)) for k, v in groups["param"].items())
        if got != expected:
            raise CheckpointError("parameter tensors do not match the embedded model config")
        tc = header.get("train_config")
        adam = AdamState(**header["adam"], m=groups["adam_m"], v=groups["adam_v"])
        return cls(
            model_config=model_cfg,
            params=groups["param"],
            train_config=None if tc is None else TrainConfig.from_dict(tc),
            adam=adam,
            step=header["step"],
            rng_state=header.get("rng_state"),
        )


# ---------------------------------------------------------------- logs

@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    seconds: float


@dataclass
class EvalRecord:
    step: int
    report: metrics.MetricReport


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)

    def append(self, record: StepRecord):
        if self.steps and record.step <= self.steps[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.steps.append(record)

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.steps]


def _append_log_csv(path: Path, record: StepRecord):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_COLUMNS)
        w.writerow([record.step, repr(record.loss), repr(record.lr), f"{record.seconds:.3f}"])


def read_log_csv(path) -> list[StepRecord]:
    with open(path, newline="") as fh:
        return [
            StepRecord(int(r["step"]), float(r["loss"]), float(r["lr"]), float(r["seconds"]))
            for r in csv.DictReader(fh)
        ]


# ---------------------------------------------------------------- training

def _load_cubes(paths) -> list[HsiCube]:
    return [load_cube(p) for p in paths]


def _augment(data: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    data = np.rot90(data, k, axes=(1, 2))
    if flip:
        data = data[:, :, ::-1]
    return np.ascontiguousarray(data)


def sample_batch(cubes, train_cfg: TrainConfig, scale: int, rng: np.random.Generator):
    """Draw a cube uniformly, then an aligned crop uniformly, ``batch_size`` times."""
    spec = DegradationSpec(scale, antialias=train_cfg.antialias)
    hr_side = train_cfg.lr_patch * scale
    lrs, hrs = [], []
    for _ in range(train_cfg.batch_size):
        cube = cubes[int(rng.integers(len(cubes)))]
        top, left = sample_patch_position(cube, hr_side, scale, rng)
        hr = crop(cube, top, left, hr_side, hr_side)
        if train_cfg.augment:
            hr = hr.with_data(_augment(hr.data, rng))
        lrs.append(degrade(hr, spec).data)
        hrs.append(hr.data)
    return torch.from_numpy(np.stack(lrs)), torch.from_numpy(np.stack(hrs))


def train_step(params, adam: AdamState, model_cfg: ModelConfig, lr_batch, hr_batch, lr: float) -> float:
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    value = loss(forward(lr_batch, model_cfg, params), hr_batch, model_cfg.loss_mode)
    if not torch.isfinite(value):
        raise NonFiniteError(f"loss is {value.item()}")
    value.backward()
    adam_step(params, adam, lr=lr)
    return value.item()


def _run(ckpt: Checkpoint, train_cfg: TrainConfig, manifest: DatasetManifest, out_dir, cubes=None):
    model_cfg = ckpt.model_config
    run_log = TrainLog()
    if ckpt.step >= train_cfg.total_steps:
        return ckpt, run_log
    if cubes is None:
        paths = manifest.paths("train")
        if not paths:
            raise ValueError("manifest has no training entries")
        cubes = _load_cubes(paths)
    hr_side = train_cfg.lr_patch * model_cfg.scale
    if not any(min(c.shape[1:]) >= hr_side for c in cubes):
        raise ValueError(f"no training cube is large enough for a {hr_side}x{hr_side} patch")
    cubes = [c for c in cubes if min(c.shape[1:]) >= hr_side]
    for c in cubes:
        if c.band_count != model_cfg.band_count:
            raise ConfigError(f"cube {c.name!r} has {c.band_count} bands, model expects {model_cfg.band_count}")
    val_cubes = None
    if train_cfg.eval_every and manifest is not None and manifest.paths("test"):
        val_cubes = _load_cubes(manifest.paths("test"))

    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    out_dir = None if out_dir is None else Path(out_dir)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    ckpt.train_config = train_cfg
    t0 = time.perf_counter()

    while ckpt.step < train_cfg.total_steps:
        lr_batch, hr_batch = sample_batch(cubes, train_cfg, model_cfg.scale, rng)
        rate = learning_rate(train_cfg, ckpt.step)
        try:
            value = train_step(ckpt.params, ckpt.adam, model_cfg, lr_batch, hr_batch, rate)
        except NonFiniteError as exc:
            diag = None
            if out_dir is not None:
                ckpt.rng_state = rng.bit_generator.state
                diag = ckpt.save(out_dir / f"diverged_step{ckpt.step}.ckpt")
            raise TrainingDiverged(f"training diverged at step {ckpt.step + 1}: {exc}", diag) from exc
        ckpt.step += 1
        ckpt.rng_state = rng.bit_generator.state
        record = StepRecord(ckpt.step, value, rate, time.perf_counter() - t0)
        run_log.append(record)
        if out_dir is not None:
            _append_log_csv(out_dir / "train_log.csv", record)
        if val_cubes and ckpt.step % train_cfg.eval_every == 0:
            reports = evaluate_params(ckpt.params, model_cfg, val_cubes, train_cfg.eval_crop, train_cfg.antialias)
            run_log.evals.append(EvalRecord(ckpt.step, metrics.aggregate(reports)))
        if out_dir is not None and (
            (train_cfg.checkpoint_every and ckpt.step % train_cfg.checkpoint_every == 0)
            or ckpt.step == train_cfg.total_steps
        ):
            ckpt.save(out_dir / f"step{ckpt.step:07d}.ckpt")

    for p in ckpt.params.values():
        p.requires_grad_(False)
        p.grad = None
    if out_dir is not None:
        ckpt.save(out_dir / "final.ckpt")
    return ckpt, run_log


def new_checkpoint(model_cfg: ModelConfig, train_cfg: TrainConfig) -> Checkpoint:
    params = init_params(model_cfg, seed=train_cfg.seed)
    rng = np.random.default_rng([train_cfg.seed, 1])
    return Checkpoint(
        model_config=model_cfg,
        params=params,
        train_config=train_cfg,
        adam=AdamState(lr=train_cfg.lr),
        rng_state=rng.bit_generator.state,
    )


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, manifest: DatasetManifest, out_dir=None, cubes=None):
    """Train from scratch; returns ``(final checkpoint, TrainLog)``.

    Patch sampling and weight init are driven by ``train_cfg.seed`` only, so a
    rerun with the same inputs reproduces the parameter trajectory. When
    ``out_dir`` is given, checkpoints and ``train_log.csv`` are written there.
    ``cubes`` overrides loading the manifest's training entries.
    """
    return _run(new_checkpoint(model_cfg, train_cfg), train_cfg, manifest, out_dir, cubes)


def resume(checkpoint, train_cfg: TrainConfig, manifest: DatasetManifest, out_dir=None,
           model_cfg: ModelConfig | None = None, cubes=None):
    """Continue a run from a checkpoint file (or loaded :class:`Checkpoint`)
    up to ``train_cfg.total_steps``."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    if model_cfg is not None and model_cfg != ckpt.model_config:
        raise ConfigError(f"model config mismatch: checkpoint has {ckpt.model_config}, got {model_cfg}")
    if ckpt.rng_state is None:
        raise CheckpointError("checkpoint carries no RNG state and cannot be resumed")
    ckpt.params = OrderedDict((k, v.clone()) for k, v in ckpt.params.items())
    return _run(ckpt, train_cfg, manifest, out_dir, cubes)


# ---------------------------------------------------------------- evaluation

@torch.no_grad()
def super_resolve(lr: HsiCube, model_cfg: ModelConfig, params):
    """Return the averaged SR cube and the per-iteration SR cubes."""
    if lr.band_count != model_cfg.band_count:
        raise ConfigError(f"input has {lr.band_count} bands, checkpoint expects {model_cfg.band_count}")
    out = forward(torch.from_numpy(np.ascontiguousarray(lr.data, dtype=np.float32))[None], model_cfg, params)
    final = HsiCube(out.output[0].numpy(), name=lr.name)
    steps = [HsiCube(t[0].numpy(), name=f"{lr.name}_t{i + 1}") for i, t in enumerate(out.sr)]
    return final, steps


def iter_test_results(params, model_cfg: ModelConfig, hr_cubes, crop_side=512, antialias=True):
    """Yield ``(hr crop, sr cube, report)`` per test cube."""
    spec = DegradationSpec(model_cfg.scale, antialias=antialias)
    for cube in hr_cubes:
        hr = crop_topleft(cube, crop_side)
        sr, _ = super_resolve(degrade(hr, spec), model_cfg, params)
        yield hr, sr, metrics.evaluate_pair(sr, hr, model_cfg.scale, name=cube.name)


def evaluate_params(params, model_cfg, hr_cubes, crop_side=512, antialias=True):
    return [rep for _, _, rep in iter_test_results(params, model_cfg, hr_cubes, crop_side, antialias)]


def evaluate_checkpoint(checkpoint, manifest: DatasetManifest, crop_side: int = 512, antialias: bool = True):
    """Per-test-image reports followed by their mean (named ``average``)."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    paths = manifest.paths("test")
    if not paths:
        raise ValueError("manifest has no test entries")
    reports = evaluate_params(ckpt.params, ckpt.model_config, _load_cubes(paths), crop_side, antialias)
    return reports + [metrics.aggregate(reports)]


def bicubic_baseline(manifest: DatasetManifest, scale: int, crop_side: int = 512, antialias: bool = True,
                     cubes=None):
    """Reports for plain bicubic upsampling of the degraded test crops, plus the mean."""
    spec = DegradationSpec(scale, antialias=antialias)
    if cubes is None:
        paths = manifest.paths("test")
        if not paths:
            raise ValueError("manifest has no test entries")
        cubes = _load_cubes(paths)
    reports = []
    for cube in cubes:
        hr = crop_topleft(cube, crop_side)
        sr = upsample(degrade(hr, spec), scale)
        reports.append(metrics.evaluate_pair(sr, hr, scale, name=cube.name))
    return reports + [metrics.aggregate(reports)]


def zero_checkpoint(model_cfg: ModelConfig) -> Checkpoint:
    return Checkpoint(model_config=model_cfg, params=zero_params(model_cfg))

