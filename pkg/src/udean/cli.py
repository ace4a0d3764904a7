"""Command-line experiment runner.

Run directory layout under ``paths.output_dir`` (relative paths resolve
against $UDEAN_OUTPUT_ROOT, else the working directory)::

    config.yaml          resolved config of the last command
    data/                manifest.jsonl + volumes
    run/                 loss_log.jsonl, validation.csv, checkpoints/, DONE
    eval/                metrics.csv, summary.csv, error_maps/
    report/              figures + summary.txt
    features/            dumped f_s / f_t maps
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .degradation import (DeformationParams, DegradationError, PatchSpec, ScaleFactor, apply_misalignment,
                          kspace_truncate, make_phantom, tricubic_upsample)
from .inference import (InferenceError, StitchPlan, dump_features, error_map, evaluate, network_method,
                        reconstruct)
from .network import NetworkError, load_checkpoint, read_checkpoint_header
from .trainer import NumericAbort, PatchSource, TrainError, train
from .volume_io import (DatasetManifest, ManifestEntry, VolumeError, load_volume,
                        normalize_unit_range, save_volume, split_groups)

log = logging.getLogger("udean")

OUTPUT_ROOT_ENV = "UDEAN_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def output_dir(cfg: C.ExperimentConfig) -> Path:
    out = Path(cfg.paths.output_dir)
    if not out.is_absolute():
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / out
    return out


def derived_seed(seed: int, *keys) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def stitch_plan(cfg: C.ExperimentConfig) -> StitchPlan:
    shape = tuple(cfg.patch.lr_patch_shape)
    if cfg.patch.stitch_stride is None:
        return StitchPlan.default(shape)
    return StitchPlan(shape, tuple(cfg.patch.stitch_stride))


def patch_spec(cfg: C.ExperimentConfig) -> PatchSpec:
    return PatchSpec(tuple(cfg.patch.lr_patch_shape), ScaleFactor.parse(cfg.scale), cfg.train.batch_size)


# --- prepare-data ----------------------------------------------------------

def _input_volumes(cfg, phantom):
    if phantom:
        shape = tuple(cfg.data.phantom_shape)
        return {f"P{i:03d}": make_phantom(shape, derived_seed(cfg.seed, 1, i)) for i in range(phantom)}
    if not cfg.paths.input_dir:
        raise C.ConfigError("no input volumes: set paths.input_dir or pass --phantom N")
    src = Path(cfg.paths.input_dir)
    files = sorted(p for p in src.iterdir()
                   if p.name.endswith((".nii", ".nii.gz", ".f32")))
    if not files:
        raise C.ConfigError(f"no .nii/.nii.gz/.f32 volumes in {src}")
    return {p.name.split(".")[0]: load_volume(p) for p in files}


def _normalize_all(vols: dict, scope: str) -> dict:
    if scope == "per-volume":
        return {k: normalize_unit_range(v) for k, v in vols.items()}
    lo = min(float(v.data.min()) for v in vols.values())
    hi = max(float(v.data.max()) for v in vols.values())
    span = hi - lo if hi > lo else 1.0
    return {k: v.replace(data=(v.data - lo) / span, intensity_range=(lo, hi)) for k, v in vols.items()}


def prepare_data(cfg: C.ExperimentConfig, phantom: int | None = None) -> DatasetManifest:
    scale = ScaleFactor.parse(cfg.scale)
    vols = _normalize_all(_input_volumes(cfg, phantom), cfg.data.normalization)
    manifest = split_groups(sorted(vols), cfg.data.counts, cfg.seed, cfg.data.mode)
    data_dir = output_dir(cfg) / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    ext = ".f32" if cfg.data.volume_format == "raw-f32" else ".nii"
    lr_cache = {}
    order = {pid: i for i, pid in enumerate(sorted(vols))}

    def write(v, name):
        save_volume(v, data_dir / (name + ext), cfg.data.volume_format)
        return name + ext

    entries = []
    for e in manifest.entries:
        hr = vols[e.participant_id]
        if e.role == "LR":
            if e.participant_id not in lr_cache:
                lr_cache[e.participant_id] = write(kspace_truncate(hr, scale), f"{e.participant_id}_LR")
            path = lr_cache[e.participant_id]
        elif e.group == "source" and cfg.data.mode == "misaligned":
            r = cfg.deformation
            d = DeformationParams.random(derived_seed(cfg.seed, 2, order[e.participant_id]),
                                         r.max_rot_deg, r.max_trans_vox, r.max_shrink_vox)
            moved = apply_misalignment(hr, d)
            moved = moved.replace(data=np.clip(moved.data, 0.0, 1.0))
            path = write(moved, f"{e.participant_id}_HR_source")
        else:
            path = write(hr, f"{e.participant_id}_HR")
        entries.append(ManifestEntry(e.participant_id, e.group, path, e.role))
    manifest = DatasetManifest(entries, manifest.seed, manifest.mode)
    manifest.validate()
    manifest.save(data_dir / "manifest.jsonl")
    return manifest


def load_manifest(cfg) -> DatasetManifest:
    path = output_dir(cfg) / "data" / "manifest.jsonl"
    if not path.exists():
        raise C.ConfigError(f"no manifest at {path}; run prepare-data first")
    return DatasetManifest.load(path).resolve(path.parent)


# --- checkpoints -----------------------------------------------------------

def check_checkpoint(cfg: C.ExperimentConfig, path):
    if not Path(path).exists():
        raise C.ConfigError(f"checkpoint {path} not found")
    try:
        header = read_checkpoint_header(path)
    except (NetworkError, ValueError, KeyError, OSError) as exc:
        raise C.ConfigError(f"unreadable checkpoint {path}: {exc}") from exc
    net = header["network"]
    want = cfg.network.to_dict()
    for key in ("scale", "feat_channels", "n_groups", "n_blocks", "reduction"):
        if net.get(key) != want[key]:
            raise C.ConfigError(f"checkpoint {key}={net.get(key)!r} incompatible with config {want[key]!r}")
    return header


def default_checkpoint(cfg):
    return output_dir(cfg) / "run" / "checkpoints" / "best.npz"


# --- commands --------------------------------------------------------------

def cmd_prepare_data(cfg, args):
    m = prepare_data(cfg, args.phantom)
    print(f"wrote {len(m.entries)} manifest entries to {output_dir(cfg) / 'data'}")


def cmd_train(cfg, args):
    manifest = load_manifest(cfg)
    run = output_dir(cfg) / "run"
    run.mkdir(parents=True, exist_ok=True)
    C.dump_config(cfg, run / "config.yaml")
    result = train(manifest, cfg.train, cfg.network, cfg.loss, patch_spec(cfg), run_dir=run,
                   stitch=stitch_plan(cfg), meta={"seed": cfg.seed})
    print(f"trained {len(result.history)} iterations; best epoch {result.best_epoch}")


def cmd_infer(cfg, args):
    ck = args.checkpoint or default_checkpoint(cfg)
    check_checkpoint(cfg, ck)
    if not args.volume:
        raise C.ConfigError("infer needs --volume")
    lr = load_volume(args.volume)
    comps, _ = load_checkpoint(ck)
    sr = reconstruct(lr, comps, stitch_plan(cfg))
    out = Path(args.out) if args.out else output_dir(cfg) / "infer" / (Path(args.volume).name.split(".")[0] + "_SR.f32")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_volume(sr, out)
    print(f"wrote {out} with shape {sr.shape}")


def cmd_evaluate(cfg, args):
    manifest = load_manifest(cfg)
    methods = {}
    specs = args.method or [f"udean={args.checkpoint or default_checkpoint(cfg)}"]
    loaded = []
    for spec in specs:
        tag, _, path = spec.partition("=")
        if not path:
            raise C.ConfigError(f"--method expects tag=checkpoint, got {spec!r}")
        check_checkpoint(cfg, path)
        loaded.append((tag, path))
    plan = stitch_plan(cfg)
    for tag, path in loaded:
        comps, _ = load_checkpoint(path)
        methods[tag] = network_method(comps, plan)
    out = output_dir(cfg) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    records, summary = evaluate(manifest, methods, cfg.scale, csv_path=out / "metrics.csv")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"])
        for tag, s in summary.items():
            w.writerow([tag, s["n"], repr(s["ssim_mean"]), repr(s["ssim_std"]),
                        repr(s["psnr_mean"]), repr(s["psnr_std"])])
    if args.error_maps:
        pid = manifest.ids("test")[0]
        lr = load_volume(manifest.path_for("test", "LR", pid))
        hr = load_volume(manifest.path_for("test", "HR", pid))
        for tag, fn in [("tricubic", None)] + list(methods.items()):
            sr = tricubic_upsample(lr, cfg.scale) if fn is None else fn(lr)
            error_map(sr, hr, out / "error_maps", prefix=f"{pid}_{tag}")
    for tag, s in summary.items():
        print(f"{tag:12s} SSIM {s['ssim_mean']:.4f} +- {s['ssim_std']:.4f}   "
              f"PSNR {s['psnr_mean']:.3f} +- {s['psnr_std']:.3f}")


def cmd_dump_features(cfg, args):
    ck = args.checkpoint or default_checkpoint(cfg)
    check_checkpoint(cfg, ck)
    comps, _ = load_checkpoint(ck)
    manifest = load_manifest(cfg)
    spec = patch_spec(cfg)
    src = PatchSource(manifest, spec, "unsupervised")
    rng = np.random.default_rng(derived_seed(cfg.seed, 3))
    x, y = src.batch(rng, args.n_patches)
    f_s, _ = dump_features(comps, y[:, 0].numpy(), x[:, 0].numpy(), output_dir(cfg) / "features")
    print(f"dumped {len(f_s)} f_s and f_t maps of shape {f_s.shape[1:]}")


def cmd_report(cfg, args):
    from .report import write_report

    run = Path(args.run_dir) if args.run_dir else output_dir(cfg) / "run"
    summary = write_report(run, output_dir(cfg) / "report")
    print(summary)


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "dump-features": cmd_dump_features,
}


def build_parser():
    p = argparse.ArgumentParser(prog="udean", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config")
        s.add_argument("--seed", type=int)
        s.add_argument("--scale", choices=["2x2x1", "2x2x2"])
        s.add_argument("--mode", choices=["unpaired", "misaligned"])
        s.add_argument("--checkpoint")
        if name == "prepare-data":
            s.add_argument("--phantom", type=int, metavar="N", help="generate N synthetic volumes")
        if name == "infer":
            s.add_argument("--volume", help="LR volume to super-resolve")
            s.add_argument("--out", help="output SR volume path")
        if name == "evaluate":
            s.add_argument("--method", action="append", metavar="TAG=CHECKPOINT")
            s.add_argument("--error-maps", action="store_true")
        if name == "dump-features":
            s.add_argument("--n-patches", type=int, default=32)
        if name == "report":
            s.add_argument("--run-dir")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = C.load_config(args.config) if args.config else C.ExperimentConfig()
        cfg = C.override(cfg, seed=args.seed, scale=args.scale, mode=args.mode)
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        C.dump_config(cfg, out / "config.yaml")
        COMMANDS[args.command](cfg, args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (C.ConfigError, VolumeError, DegradationError, NetworkError, TrainError, InferenceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
