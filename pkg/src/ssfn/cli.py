"""``ssfn`` command line: prepare, train, eval, sr, ablate, spectra, baseline."""

from __future__ import annotations

import argparse
import csv
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics, plotting
from .data import (
    CubeError,
    DatasetManifest,
    HsiCube,
    load_cube,
    save_cube,
    split_dataset,
)
from .model import ConfigError, ModelConfig, param_count
from .train import (
    Checkpoint,
    TrainConfig,
    bicubic_baseline,
    evaluate_params,
    iter_test_results,
    read_config,
    resume,
    super_resolve,
    train,
    write_config,
)

log = logging.getLogger("ssfn")

DEFAULT_PIXELS = "20,20;100,100;340,340"
DEFAULT_BAND = 27


class CommandError(Exception):
    pass


# ---------------------------------------------------------------- prepare

def find_cubes(dataset_dir: Path, layout: str) -> list[Path]:
    if layout == "bands":
        return sorted(d for d in dataset_dir.iterdir() if d.is_dir())
    if layout == "planar":
        return sorted(p for p in dataset_dir.iterdir() if p.suffix == ".raw")
    raise CommandError(f"unknown layout {layout!r}")


def cmd_prepare(dataset_dir, layout, out_manifest, seed=0, ratio=0.8) -> DatasetManifest:
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise CommandError(f"dataset directory {dataset_dir} is not readable")
    candidates = find_cubes(dataset_dir, layout)
    if not candidates:
        raise CommandError(f"no cubes found in {dataset_dir} (layout {layout})")
    bad, shapes = [], {}
    for path in candidates:
        try:
            shapes[path] = load_cube(path, layout).shape
        except (CubeError, OSError) as exc:
            bad.append(f"{path}: {exc}")
    if bad:
        raise CommandError("invalid cubes:\n  " + "\n  ".join(bad))
    if len({s[0] for s in shapes.values()}) > 1:
        raise CommandError(f"cubes disagree on band count: {sorted({s[0] for s in shapes.values()})}")
    manifest = DatasetManifest([(str(p.resolve()), "unassigned") for p in candidates], seed, ratio)
    manifest = split_dataset(manifest)
    manifest.write(out_manifest)
    log.info("%d cubes: %d train / %d test", len(candidates), len(manifest.paths("train")), len(manifest.paths("test")))
    return manifest


# ---------------------------------------------------------------- train

def load_run_config(config_path, scale=None, seed=None) -> tuple[ModelConfig, TrainConfig]:
    model_cfg, train_cfg = read_config(config_path)
    if scale is not None:
        model_cfg = replace(model_cfg, scale=scale)
    if seed is not None:
        train_cfg = replace(train_cfg, seed=seed)
    return model_cfg, train_cfg


def cmd_train(config, manifest, out_dir, scale=None, seed=None, resume_from=None):
    model_cfg, train_cfg = load_run_config(config, scale, seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.toml", model_cfg, train_cfg)
    shutil.copyfile(manifest, out_dir / "manifest.txt")
    man = DatasetManifest.read(manifest)
    if resume_from:
        ckpt, run_log = resume(resume_from, train_cfg, man, out_dir, model_cfg=model_cfg)
    else:
        log_path = out_dir / "train_log.csv"
        if log_path.exists():
            log_path.unlink()
        ckpt, run_log = train(model_cfg, train_cfg, man, out_dir)
    if run_log.steps:
        plotting.loss_figure([r.step for r in run_log.steps], run_log.losses, out_dir / "loss.png")
    log.info("finished at step %d", ckpt.step)
    return ckpt, run_log


# ---------------------------------------------------------------- eval

def cmd_eval(checkpoint, manifest, out_dir, band=DEFAULT_BAND, crop_side=512, antialias=True, error_max=None):
    ckpt = Checkpoint.load(checkpoint)
    cfg = ckpt.model_config
    if not 1 <= band <= cfg.band_count:
        raise CommandError(f"band {band} out of range 1..{cfg.band_count}")
    man = DatasetManifest.read(manifest)
    paths = man.paths("test")
    if not paths:
        raise CommandError("manifest has no test entries")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = []
    cubes = (load_cube(p) for p in paths)
    for hr, sr, report in iter_test_results(ckpt.params, cfg, cubes, crop_side, antialias):
        reports.append(report)
        err = np.abs(sr.data[band - 1].astype(np.float64) - hr.data[band - 1])
        stem = f"{report.name}_band{band}"
        top = plotting.save_error_map(err, out_dir / f"errmap_{stem}.png", error_max)
        plotting.error_map_figure(err, out_dir / f"errmap_{stem}_color.png", f"{report.name}, band {band}", top)
    metrics.write_report_csv(reports, out_dir / "metrics.csv")
    return reports


def cmd_baseline(manifest, out_dir, scale=4, crop_side=512, antialias=True):
    reports = bicubic_baseline(DatasetManifest.read(manifest), scale, crop_side, antialias)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics.write_report_csv(reports[:-1], out_dir / "bicubic_metrics.csv")
    return reports


# ---------------------------------------------------------------- sr

def _sibling(path: Path, suffix: str) -> Path:
    stem = path.stem if path.suffix == ".raw" else path.name
    return path.with_name(f"{stem}{suffix}.raw")


def cmd_sr(checkpoint, input_cube, out_cube, per_iteration=False) -> HsiCube:
    ckpt = Checkpoint.load(checkpoint)
    lr = load_cube(input_cube)
    if lr.band_count != ckpt.model_config.band_count:
        raise CommandError(f"input has {lr.band_count} bands, checkpoint expects {ckpt.model_config.band_count}")
    sr, steps = super_resolve(lr, ckpt.model_config, ckpt.params)
    out_cube = Path(out_cube)
    out_cube.parent.mkdir(parents=True, exist_ok=True)
    save_cube(sr, out_cube)
    if per_iteration:
        for t, cube in enumerate(steps, start=1):
            save_cube(cube, _sibling(out_cube, f"_t{t}"))
    return sr


# ---------------------------------------------------------------- ablate

ABLATION_COLUMNS = ("T", "G", "param_count", "final_loss", "psnr", "sam")


def cmd_ablate(config, t_list, g_list, manifest, out_dir, seed=None, crop_side=None):
    base_model, train_cfg = load_run_config(config, seed=seed)
    combos = []
    for g in g_list:
        for t in t_list:
            try:
                combos.append(replace(base_model, iterations=t, groups=g))
            except ConfigError as exc:
                raise CommandError(f"invalid combination T={t}, G={g}: {exc}") from exc
    man = DatasetManifest.read(manifest)
    if not man.paths("test"):
        raise CommandError("manifest has no test entries for validation")
    train_cubes = [load_cube(p) for p in man.paths("train")]
    test_cubes = [load_cube(p) for p in man.paths("test")]
    side = crop_side or train_cfg.eval_crop
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.toml", base_model, train_cfg)
    rows = []
    for cfg in combos:
        ckpt, run_log = train(cfg, train_cfg, man, cubes=train_cubes)
        agg = metrics.aggregate(evaluate_params(ckpt.params, cfg, test_cubes, side, train_cfg.antialias))
        rows.append({
            "T": cfg.iterations,
            "G": cfg.groups,
            "param_count": param_count(cfg),
            "final_loss": run_log.losses[-1],
            "psnr": agg.psnr,
            "sam": agg.sam,
        })
        log.info("T=%d G=%d psnr=%.4f sam=%.4f", cfg.iterations, cfg.groups, agg.psnr, agg.sam)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r["T"], r["G"], r["param_count"], f"{r['final_loss']:.8f}", f"{r['psnr']:.6f}", f"{r['sam']:.6f}"])
    plotting.ablation_figure(rows, out_dir / "ablation.png")
    return rows


# ---------------------------------------------------------------- spectra

def parse_pixels(text: str) -> list[tuple[int, int]]:
    pixels = []
    for item in text.replace(" ", "").split(";"):
        if not item:
            continue
        try:
            r, c = (int(v) for v in item.split(","))
        except ValueError as exc:
            raise CommandError(f"bad pixel {item!r}; expected 'row,col'") from exc
        pixels.append((r, c))
    if not pixels:
        raise CommandError("no pixels given")
    return pixels


def spectra_table(sr: HsiCube, hr: HsiCube, pixels):
    if sr.shape != hr.shape:
        raise CommandError(f"cube shapes differ: {sr.shape} vs {hr.shape}")
    _, h, w = hr.shape
    for r, c in pixels:
        if not (0 <= r < h and 0 <= c < w):
            raise CommandError(f"pixel ({r}, {c}) outside {h}x{w} image")
    sr_px = np.stack([sr.data[:, r, c].astype(np.float64) for r, c in pixels], axis=1)
    hr_px = np.stack([hr.data[:, r, c].astype(np.float64) for r, c in pixels], axis=1)
    header = ["band", "sr_avg", "hr_avg"]
    for r, c in pixels:
        header += [f"sr_{r}_{c}", f"hr_{r}_{c}"]
    rows = []
    for b in range(hr.band_count):
        row = [b + 1, sr_px[b].mean(), hr_px[b].mean()]
        for k in range(len(pixels)):
            row += [sr_px[b, k], hr_px[b, k]]
        rows.append(row)
    return header, rows, sr_px, hr_px


def cmd_spectra(sr_cube, hr_cube, pixels, out_csv):
    sr, hr = load_cube(sr_cube), load_cube(hr_cube)
    header, rows, sr_px, hr_px = spectra_table(sr, hr, pixels)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    labels = [f"({r}, {c})" for r, c in pixels] + ["average"]
    sr_curves = list(sr_px.T) + [sr_px.mean(axis=1)]
    hr_curves = list(hr_px.T) + [hr_px.mean(axis=1)]
    bands = np.arange(1, hr.band_count + 1)
    plotting.spectra_figure(bands, sr_curves, hr_curves, labels, out_csv.with_suffix(".png"))
    return header, rows


# ---------------------------------------------------------------- argparse

def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssfn", description="Hyperspectral single-image super-resolution toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="validate a dataset and write a train/test manifest")
    s.add_argument("dataset_dir")
    s.add_argument("--layout", choices=("bands", "planar"), default="bands")
    s.add_argument("--out", required=True, help="manifest file to write")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ratio", type=float, default=0.8)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint", help="resume from this checkpoint")

    s = sub.add_parser("eval", help="metrics and error maps on the test split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--band", type=int, default=DEFAULT_BAND, help="1-based band for error maps")
    s.add_argument("--crop", type=int, default=512)
    s.add_argument("--error-max", type=float, help="error value mapped to white (default: per-map max)")
    s.add_argument("--no-antialias", action="store_true")

    s = sub.add_parser("baseline", help="bicubic baseline metrics on the test split")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--crop", type=int, default=512)
    s.add_argument("--no-antialias", action="store_true")

    s = sub.add_parser("sr", help="super-resolve one cube")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.add_argument("--per-iteration", action="store_true")

    s = sub.add_parser("ablate", help="sweep iterations T and groups G")
    s.add_argument("--config", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--T", dest="t_list", type=_int_list, required=True)
    s.add_argument("--G", dest="g_list", type=_int_list, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--crop", type=int)

    s = sub.add_parser("spectra", help="spectral curves at selected pixels")
    s.add_argument("sr")
    s.add_argument("hr")
    s.add_argument("--pixels", default=DEFAULT_PIXELS, help="'row,col;row,col;...'")
    s.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.command == "prepare":
            cmd_prepare(args.dataset_dir, args.layout, args.out, args.seed, args.ratio)
        elif args.command == "train":
            cmd_train(args.config, args.manifest, args.out, args.scale, args.seed, args.checkpoint)
        elif args.command == "eval":
            cmd_eval(args.checkpoint, args.manifest, args.out, args.band, args.crop, not args.no_antialias,
                     args.error_max)
        elif args.command == "baseline":
            cmd_baseline(args.manifest, args.out, args.scale, args.crop, not args.no_antialias)
        elif args.command == "sr":
            cmd_sr(args.checkpoint, args.input, args.out, args.per_iteration)
        elif args.command == "ablate":
            cmd_ablate(args.config, args.t_list, args.g_list, args.manifest, args.out, args.seed, args.crop)
        elif args.command == "spectra":
            cmd_spectra(args.sr, args.hr, parse_pixels(args.pixels), args.out)
    except (CommandError, ConfigError, CubeError, FileNotFoundError, ValueError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
