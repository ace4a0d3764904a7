"""Desk-scale experiment protocol on synthetic phantoms.

Shared by the acceptance suite and ``scripts/desk_experiment.py``: a tiny
network, 32x32x12 phantoms and short cosine schedules, sized to run on one
CPU core.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import config as C
from .cli import derived_seed, load_manifest, prepare_data, stitch_plan
from .degradation import PatchSpec, ScaleFactor
from .inference import compute_features, evaluate, network_method
from .losses import LossWeights
from .network import ComponentSet, NetworkConfig
from .trainer import PatchSource, TrainConfig, train

TINY_NETWORK = dict(feat_channels=16, n_groups=2, n_blocks=2, reduction=4, disc_base_channels=8)

VARIANTS = {
    # tag: (training mode, image-space DA, feature-space DA)
    "udean": ("unsupervised", True, True),
    "udean_image_da": ("unsupervised", True, False),
    "udean_feature_da": ("unsupervised", False, True),
    "supervised": ("supervised_baseline", True, True),
}


@dataclass
class DeskProtocol:
    seed: int = 0
    scale: str = "2x2x2"
    n_volumes: int = 24
    # source / target / validation / test; misaligned mode shares source and target ids
    counts: tuple = (12, 12, 4, 8)
    phantom_shape: tuple = (32, 32, 12)
    lr_patch_shape: tuple = (16, 16, 3)
    batch_size: int = 4
    epochs: int = 30
    iters_per_epoch: int = 50
    lr_max: float = 1e-3
    network: dict = field(default_factory=lambda: dict(TINY_NETWORK))

    def experiment_config(self, root) -> C.ExperimentConfig:
        return C.from_dict({
            "seed": self.seed, "scale": self.scale,
            "paths": {"output_dir": str(root)},
            "data": {"mode": "misaligned", "counts": list(self.counts),
                     "phantom_shape": list(self.phantom_shape)},
            "patch": {"lr_patch_shape": list(self.lr_patch_shape)},
            "network": self.network,
            "train": {"epochs": self.epochs, "batch_size": self.batch_size,
                      "iters_per_epoch": self.iters_per_epoch, "lr_max": self.lr_max},
        })

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(scale=self.scale, **self.network)

    def patch_spec(self) -> PatchSpec:
        return PatchSpec(tuple(self.lr_patch_shape), ScaleFactor.parse(self.scale), self.batch_size)

    def train_config(self, variant: str, seed: int | None = None) -> TrainConfig:
        mode, da_img, da_feat = VARIANTS[variant]
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr_max=self.lr_max,
                           seed=self.seed if seed is None else seed, mode=mode,
                           iters_per_epoch=self.iters_per_epoch,
                           da_image_enabled=da_img, da_feature_enabled=da_feat)


def prepare(protocol: DeskProtocol, root):
    """Write the phantom dataset under ``root`` (reused when already present)."""
    cfg = protocol.experiment_config(root)
    if not (Path(root) / "data" / "manifest.jsonl").exists():
        prepare_data(cfg, protocol.n_volumes)
    return load_manifest(cfg)


def run_variant(protocol: DeskProtocol, manifest, variant: str, run_dir=None, seed=None,
                on_iteration=None):
    torch.manual_seed(protocol.seed if seed is None else seed)
    tcfg = protocol.train_config(variant, seed)
    cfg = protocol.experiment_config(".")
    start = time.perf_counter()
    result = train(manifest, tcfg, protocol.network_config(), LossWeights(), protocol.patch_spec(),
                   run_dir=run_dir, stitch=stitch_plan(cfg), on_iteration=on_iteration,
                   meta={"variant": variant})
    result.seconds = time.perf_counter() - start
    return result


def evaluate_variants(protocol: DeskProtocol, manifest, components: dict, csv_path=None):
    """Test-set table for trained ComponentSets keyed by variant tag (tricubic first)."""
    plan = stitch_plan(protocol.experiment_config("."))
    methods = {tag: network_method(c.eval(), plan) for tag, c in components.items()}
    return evaluate(manifest, methods, protocol.scale, group="test", csv_path=csv_path)


def ordering_checks(summary: dict) -> dict:
    """Named pass/fail flags for the method ordering on the test table."""
    u, tri, sup = summary["udean"], summary["tricubic"], summary["supervised"]
    checks = {}
    for key in ("ssim_mean", "psnr_mean"):
        checks[f"udean>tricubic:{key}"] = u[key] - tri[key] > 0
        checks[f"udean>=supervised:{key}"] = u[key] - sup[key] > 0
        for abl in ("udean_image_da", "udean_feature_da"):
            checks[f"{abl}>=tricubic:{key}"] = summary[abl][key] >= tri[key]
    return checks


# --- smoke ---------------------------------------------------------------------

def smoke_run(protocol: DeskProtocol, manifest, seed: int, iterations: int = 200):
    """Short UDEAN run with isolation checks on; returns the per-iteration history."""
    p = replace(protocol, epochs=1, iters_per_epoch=iterations, seed=seed, batch_size=8)
    tcfg = replace(p.train_config("udean"), check_isolation=True)
    torch.manual_seed(seed)
    result = train(manifest, tcfg, p.network_config(), LossWeights(), p.patch_spec())
    return result


def smoke_drop(history) -> float:
    """Relative fall of the median generator total after warm-up vs iterations 1-10."""
    totals = np.array([r["total"] for r in history])
    head = totals[:10].mean()
    return float(1.0 - np.median(totals[10:]) / head)


# --- feature separability --------------------------------------------------------

def sample_feature_patches(protocol: DeskProtocol, manifest, n: int, seed: int):
    """Matched lists of HR source patches and LR target patches from the training groups."""
    src = PatchSource(manifest, protocol.patch_spec(), "unsupervised")
    x, y = src.batch(np.random.default_rng(derived_seed(seed, 7)), n)
    return y[:, 0].numpy(), x[:, 0].numpy()


def feature_vectors(c: ComponentSet, hr_patches, lr_patches, chunk: int = 16):
    """Per-voxel channel vectors of f_s and f_t."""
    fs, ft = [], []
    for i in range(0, len(hr_patches), chunk):
        a, b = compute_features(c, hr_patches[i:i + chunk], lr_patches[i:i + chunk])
        fs.append(a)
        ft.append(b)
    f_s, f_t = np.concatenate(fs), np.concatenate(ft)
    ch = f_s.shape[1]
    return (np.moveaxis(f_s, 1, -1).reshape(-1, ch), np.moveaxis(f_t, 1, -1).reshape(-1, ch))


def linear_probe_accuracy(f_s: np.ndarray, f_t: np.ndarray, seed: int = 0, max_samples: int = 20000) -> float:
    """Held-out accuracy of a logistic-regression classifier separating f_s from f_t."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.preprocessing import StandardScaler

    rng = np.random.default_rng(seed)
    n = min(len(f_s), len(f_t), max_samples // 2)
    a = f_s[rng.choice(len(f_s), n, replace=False)]
    b = f_t[rng.choice(len(f_t), n, replace=False)]
    X = np.concatenate([a, b])
    y = np.concatenate([np.ones(n), np.zeros(n)])
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=0.3, random_state=seed, stratify=y)
    scaler = StandardScaler().fit(X_tr)
    clf = LogisticRegression(max_iter=2000).fit(scaler.transform(X_tr), y_tr)
    return float(clf.score(scaler.transform(X_te), y_te))


def probe(c: ComponentSet, protocol: DeskProtocol, manifest, n_patches: int = 64, seed: int = 0) -> float:
    hr, lr = sample_feature_patches(protocol, manifest, n_patches, seed)
    return linear_probe_accuracy(*feature_vectors(c, hr, lr), seed=seed)


def fresh_components(protocol: DeskProtocol, seed: int) -> ComponentSet:
    torch.manual_seed(seed)
    return ComponentSet(protocol.network_config()).eval()


def fmt_summary(summary: dict) -> str:
    lines = []
    for tag, s in summary.items():
        lines.append(f"{tag:18s} SSIM {s['ssim_mean']:.4f} +- {s['ssim_std']:.4f}  "
                     f"PSNR {s['psnr_mean']:.3f} +- {s['psnr_std']:.3f}")
    return "\n".join(lines)


__all__ = ["DeskProtocol", "VARIANTS", "prepare", "run_variant", "evaluate_variants", "ordering_checks",
           "smoke_run", "smoke_drop", "probe", "linear_probe_accuracy", "feature_vectors",
           "fresh_components", "fmt_summary"]
