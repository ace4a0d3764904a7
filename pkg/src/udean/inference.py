"""Patch-stitched SR reconstruction, image metrics, error maps and feature dumps."""
from __future__ import annotations

import contextlib
import csv
import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .degradation import ScaleFactor, tricubic_upsample
from .losses import ssim_map
from .network import COMPONENTS, ComponentSet
from .volume_io import DatasetManifest, VolumeImage, load_volume


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class StitchPlan:
    patch_shape: tuple
    stride: tuple
    blend: str = "uniform-average"

    def __post_init__(self):
        if any(s < 1 or s > p for s, p in zip(self.stride, self.patch_shape)):
            raise InferenceError(f"stride {self.stride} must lie in [1, patch {self.patch_shape}]")
        if self.blend != "uniform-average":
            raise InferenceError(f"unknown blend {self.blend!r}")

    @classmethod
    def default(cls, patch_shape):
        px, py, pz = patch_shape
        return cls(tuple(patch_shape), (max(1, px // 2), max(1, py // 2), 1))


def _starts(n, p, s):
    if p > n:
        raise InferenceError(f"volume extent {n} smaller than patch extent {p}")
    starts = list(range(0, n - p + 1, s))
    if starts[-1] != n - p:
        starts.append(n - p)
    return starts


def reconstruct(lr: VolumeImage, c, plan: StitchPlan, scale=None, batch: int = 16) -> VolumeImage:
    """Blend overlapping patch outputs of LR encoder + SR decoder into one SR volume.

    ``c`` is a ComponentSet or, for tests, any callable mapping an LR batch
    tensor to an SR batch tensor (then ``scale`` must be given).
    """
    if isinstance(c, ComponentSet):
        scale = c.config.scale
        fn = c.super_resolve
        dtype = next(c.parameters()).dtype
    else:
        if scale is None:
            raise InferenceError("scale needed when reconstructing with a bare callable")
        fn, dtype = c, torch.float32
    scale = ScaleFactor.parse(scale)
    p = plan.patch_shape
    grid = [_starts(n, pp, s) for n, pp, s in zip(lr.shape, p, plan.stride)]
    origins = [(a, b, z) for a in grid[0] for b in grid[1] for z in grid[2]]
    out_shape = tuple(n * k for n, k in zip(lr.shape, scale))
    acc = np.zeros(out_shape)
    weight = np.zeros(out_shape)
    hp = tuple(a * k for a, k in zip(p, scale))
    data = np.asarray(lr.data)
    with torch.no_grad():
        for i in range(0, len(origins), batch):
            chunk = origins[i:i + batch]
            x = np.stack([data[o[0]:o[0] + p[0], o[1]:o[1] + p[1], o[2]:o[2] + p[2]] for o in chunk])
            y = fn(torch.from_numpy(x[:, None]).to(dtype)).double().numpy()[:, 0]
            # fixed origin order keeps the per-voxel sums reproducible
            for o, patch in zip(chunk, y):
                sl = tuple(slice(a * k, a * k + h) for a, k, h in zip(o, scale, hp))
                acc[sl] += patch
                weight[sl] += 1.0
    if (weight == 0).any():
        raise InferenceError("stitch plan left voxels uncovered")
    sr = np.clip(acc / weight, 0.0, 1.0)
    return lr.replace(data=sr, spacing=tuple(sp / k for sp, k in zip(lr.spacing, scale)),
                      intensity_range=None)


@contextlib.contextmanager
def trace_components(c: ComponentSet):
    """Count forward calls and parameter reads per component while active."""
    counts = Counter()
    handles = []
    for name in COMPONENTS:
        for m in c.component(name).modules():
            if any(True for _ in m.parameters(recurse=False)):
                handles.append(m.register_forward_pre_hook(
                    lambda mod, inp, _n=name: counts.update([_n])))
    try:
        yield counts
    finally:
        for h in handles:
            h.remove()


# --- metrics ---------------------------------------------------------------

def psnr(x, y, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InferenceError(f"shape mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range ** 2 / mse)


def ssim_metric(x, y, data_range: float = 1.0) -> float:
    """Mean slice-wise SSIM (11x11 Gaussian window, sigma 1.5) of two 3D volumes."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    y = torch.as_tensor(np.asarray(y, dtype=np.float64))
    if x.ndim != 3:
        raise InferenceError("ssim_metric expects 3D volumes")
    return float(ssim_map(x, y, data_range=data_range).mean())


def error_map(sr: VolumeImage, hr: VolumeImage, out_dir=None, prefix: str = "error",
              vmax: float = 0.2) -> VolumeImage:
    """|sr - hr|; optionally one 8-bit PNG per axial slice on a fixed [0, vmax] scale."""
    err = np.abs(np.asarray(sr.data, dtype=np.float64) - np.asarray(hr.data, dtype=np.float64))
    if out_dir is not None:
        from PIL import Image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        img8 = np.round(np.clip(err / vmax, 0, 1) * 255).astype(np.uint8)
        for z in range(err.shape[2]):
            Image.fromarray(np.ascontiguousarray(img8[:, :, z].T)).save(
                out / f"{prefix}_z{z:03d}_scale0-{vmax:g}.png", optimize=False)
    return hr.replace(data=err, intensity_range=None)


# --- evaluation ------------------------------------------------------------

@dataclass
class EvalRecord:
    volume_id: str
    method: str
    ssim: float
    psnr: float

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)


def summarize(records) -> dict:
    """Mean and population std of SSIM/PSNR per method, in first-seen method order."""
    out = {}
    for r in records:
        out.setdefault(r.method, []).append(r)
    summary = {}
    for m, rows in out.items():
        s = np.array([r.ssim for r in rows])
        p = np.array([r.psnr for r in rows])
        summary[m] = {"ssim_mean": float(s.mean()), "ssim_std": float(s.std()),
                      "psnr_mean": float(p.mean()), "psnr_std": float(p.std()), "n": len(rows)}
    return summary


def evaluate_pairs(pairs, c: ComponentSet, plan: StitchPlan) -> dict:
    ss, ps = [], []
    for lr, hr in pairs:
        sr = reconstruct(lr, c, plan)
        ss.append(ssim_metric(sr.data, hr.data))
        ps.append(psnr(sr.data, hr.data))
    return {"ssim_mean": float(np.mean(ss)), "ssim_std": float(np.std(ss)),
            "psnr_mean": float(np.mean(ps)), "psnr_std": float(np.std(ps))}


def tricubic_method(scale):
    return lambda lr: tricubic_upsample(lr, scale)


def network_method(c: ComponentSet, plan: StitchPlan):
    return lambda lr: reconstruct(lr, c, plan)


def evaluate(manifest: DatasetManifest, methods: dict, scale, group: str = "test",
             csv_path=None):
    """Score every method on every (LR, HR) pair of a group.

    ``methods`` maps a tag to a callable LR VolumeImage -> SR VolumeImage.
    A tricubic reference row is always added. Returns (records, summary).
    """
    methods = dict(methods)
    methods.setdefault("tricubic", tricubic_method(scale))
    methods = {"tricubic": methods.pop("tricubic"), **methods}
    records = []
    for pid in manifest.ids(group):
        lr = load_volume(manifest.path_for(group, "LR", pid))
        hr = load_volume(manifest.path_for(group, "HR", pid))
        for tag, fn in methods.items():
            sr = fn(lr)
            records.append(EvalRecord(pid, tag, ssim_metric(sr.data, hr.data), psnr(sr.data, hr.data)))
    if not records:
        raise InferenceError(f"group {group!r} has no LR/HR pairs")
    summary = summarize(records)
    if csv_path is not None:
        write_metrics_csv(csv_path, records)
    return records, summary


def write_metrics_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "volume_id", "ssim", "psnr"])
        for r in records:
            w.writerow([r.method, r.volume_id, repr(r.ssim), repr(r.psnr)])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        return [EvalRecord(row["volume_id"], row["method"], float(row["ssim"]), float(row["psnr"]))
                for row in csv.DictReader(fh)]


# --- feature dumps ---------------------------------------------------------

def compute_features(c: ComponentSet, hr_patches, lr_patches):
    """f_s from HR patches via the extractor, f_t from LR patches via the LR encoder."""
    dtype = next(c.parameters()).dtype

    def as_batch(ps):
        return torch.from_numpy(np.stack([np.asarray(p) for p in ps])[:, None]).to(dtype)

    with torch.no_grad():
        f_s = c.extract(as_batch(hr_patches)).double().numpy()
        f_t = c.lr_encoder(as_batch(lr_patches)).double().numpy()
    return f_s, f_t


def dump_features(c: ComponentSet, hr_patches, lr_patches, out_dir):
    """Write f_s / f_t maps as raw little-endian float32 files plus a JSON manifest."""
    f_s, f_t = compute_features(c, hr_patches, lr_patches)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for tag, arr in (("f_s", f_s), ("f_t", f_t)):
        for i, f in enumerate(arr):
            name = f"{tag}_{i:04d}.f32"
            (out / name).write_bytes(np.ascontiguousarray(f, dtype="<f4").tobytes())
            entries.append({"file": name, "domain": tag, "index": i, "shape": list(f.shape)})
    (out / "features.json").write_text(json.dumps(
        {"version": 1, "dtype": "float32-le", "order": "C", "entries": entries}, indent=1) + "\n")
    return f_s, f_t


def load_feature_dump(out_dir):
    out = Path(out_dir)
    meta = json.loads((out / "features.json").read_text())
    arrays = {"f_s": [], "f_t": []}
    for e in meta["entries"]:
        a = np.frombuffer((out / e["file"]).read_bytes(), dtype="<f4").reshape(e["shape"])
        arrays[e["domain"]].append(a)
    return np.stack(arrays["f_s"]), np.stack(arrays["f_t"])
