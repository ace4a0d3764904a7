"""Alternating adversarial training: one discriminator pass, then one generator pass per batch."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .degradation import PatchSpec, kspace_truncate_torch
from .network import GENERATOR_COMPONENTS, INFERENCE_COMPONENTS, ComponentSet, NetworkConfig, save_checkpoint
from .volume_io import DatasetManifest, load_volume

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    pass


class TrainError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    lr_max: float = 1e-4
    lr_min: float = 1e-8
    seed: int = 0
    mode: str = "unsupervised"
    da_image_enabled: bool = True
    da_feature_enabled: bool = True
    # 0: one epoch = enough patches to cover the target LR voxels once on average
    iters_per_epoch: int = 0
    check_isolation: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if self.lr_min > self.lr_max:
            raise TrainError("lr_min must not exceed lr_max")
        if self.mode not in ("unsupervised", "supervised_baseline"):
            raise TrainError(f"unknown training mode {self.mode!r}")


@dataclass
class ForwardBundle:
    y_s: torch.Tensor
    x_t: torch.Tensor
    f_s: torch.Tensor
    x_st: torch.Tensor
    f_sts: torch.Tensor
    y_sts: torch.Tensor
    f_t: torch.Tensor
    x_hat_t: torch.Tensor
    y_hat_s: torch.Tensor


def cosine_lr(t, total, lr_max=1e-4, lr_min=1e-8):
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / total))


def param_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def forward_step(y_s, x_t, c: ComponentSet) -> ForwardBundle:
    c.check_hr(y_s)
    expect = tuple(n // k for n, k in zip(y_s.shape[-3:], c.config.scale))
    if tuple(x_t.shape[-3:]) != expect:
        raise TrainError(f"LR patch {tuple(x_t.shape[-3:])} does not match HR patch / scale {expect}")
    f_s = c.extract(y_s)
    x_st = c.lr_decoder(f_s)
    f_sts = c.lr_encoder(x_st)
    y_sts = c.sr_decoder(f_sts)
    f_t = c.lr_encoder(x_t)
    x_hat_t = c.lr_decoder(f_t)
    y_hat_s = c.sr_decoder(f_s)
    return ForwardBundle(y_s, x_t, f_s, x_st, f_sts, y_sts, f_t, x_hat_t, y_hat_s)


def make_optimizers(c: ComponentSet, tcfg: TrainConfig):
    def adam(params):
        return torch.optim.Adam(params, lr=tcfg.lr_max, betas=(tcfg.adam_beta1, tcfg.adam_beta2),
                                eps=tcfg.adam_eps)

    if tcfg.mode == "supervised_baseline":
        gen = list(c.parameters_of(INFERENCE_COMPONENTS))
    else:
        gen = c.generator_parameters()
    return {"generator": adam(gen),
            "lr_discriminator": adam(c.lr_discriminator.parameters()),
            "feature_discriminator": adam(c.feature_discriminator.parameters())}


def set_lr(optimizers, lr):
    for opt in optimizers.values():
        for g in opt.param_groups:
            g["lr"] = lr


class _frozen:
    """Disable gradients on some modules for the duration of a step."""

    def __init__(self, *modules):
        self.params = [p for m in modules for p in m.parameters()]

    def __enter__(self):
        self.saved = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, r in zip(self.params, self.saved):
            p.requires_grad_(r)


def discriminator_step(b: ForwardBundle, c: ComponentSet, optimizers, tcfg: TrainConfig):
    lrd = fd = None
    gens = [c.component(n) for n in GENERATOR_COMPONENTS]
    with _frozen(*gens):
        if tcfg.da_image_enabled:
            opt = optimizers["lr_discriminator"]
            opt.zero_grad(set_to_none=True)
            loss = L.disc_lr(c.lr_discriminator(b.x_t.detach()), c.lr_discriminator(b.x_st.detach()))
            loss.backward()
            opt.step()
            lrd = loss.item()
        if tcfg.da_feature_enabled:
            opt = optimizers["feature_discriminator"]
            opt.zero_grad(set_to_none=True)
            loss = L.disc_feature(c.feature_discriminator(b.f_s.detach()),
                                  c.feature_discriminator(b.f_t.detach()))
            loss.backward()
            opt.step()
            fd = loss.item()
    return lrd, fd


def generator_losses(b: ForwardBundle, c: ComponentSet, w: L.LossWeights, tcfg: TrainConfig):
    """Differentiable loss components and their weighted total."""
    d_lr, d_f = c.lr_discriminator, c.feature_discriminator
    use_lr_d = tcfg.da_image_enabled
    zero = b.y_s.new_zeros(())

    def hr_realness(y):
        if use_lr_d and w.hr_adversarial:
            return d_lr(kspace_truncate_torch(y, c.config.scale))
        return None

    i_cyc, _ = L.image_cycle(b.y_sts, b.y_s, hr_realness(b.y_sts), w)
    hr_con, _ = L.hr_consistency(b.y_hat_s, b.y_s, hr_realness(b.y_hat_s), w)
    lr_con, _ = L.lr_consistency(b.x_hat_t, b.x_t, d_lr(b.x_hat_t) if use_lr_d else None, w)
    parts = {
        "i_cyc": i_cyc,
        "f_cyc": L.feature_cycle(b.f_sts, b.f_s),
        "hr_con": hr_con,
        "lr_con": lr_con,
        "da": L.da_image(d_lr(b.x_st), d_lr(b.x_t)) if use_lr_d else zero,
        "fa": L.da_feature(d_f(b.f_t), d_f(b.f_s)) if tcfg.da_feature_enabled else zero,
    }
    return parts, L.total_generator(parts, w)


def generator_step(b: ForwardBundle, c: ComponentSet, w: L.LossWeights, optimizers,
                   tcfg: TrainConfig) -> L.LossReport:
    with _frozen(c.lr_discriminator, c.feature_discriminator):
        parts, total = generator_losses(b, c, w, tcfg)
        bad = L.first_non_finite({**parts, "total": total})
        if bad:
            raise NumericAbort(f"non-finite generator loss component {bad[0]} = {bad[1]}")
        opt = optimizers["generator"]
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
    return L.LossReport(**{k: v.item() for k, v in parts.items()}, total=total.item())


def supervised_step(x, y, c: ComponentSet, w: L.LossWeights, optimizers) -> L.LossReport:
    """Baseline: LR encoder + SR decoder fit directly to (possibly misaligned) HR patches."""
    sr = c.super_resolve(x)
    loss, parts = L.image_cycle(sr, y, None, w)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericAbort(f"non-finite supervised loss {value}")
    opt = optimizers["generator"]
    opt.zero_grad(set_to_none=True)
    loss.backward()
    opt.step()
    return L.LossReport(i_cyc=value, total=value)


# --- data ------------------------------------------------------------------

class PatchSource:
    """In-memory training volumes and seed-driven batch drawing."""

    def __init__(self, manifest: DatasetManifest, spec: PatchSpec, mode: str):
        self.spec = spec
        self.mode = mode
        self.target_ids = manifest.ids("target")
        self.lr = {p: load_volume(manifest.path_for("target", "LR", p)).data for p in self.target_ids}
        self.source_ids = manifest.ids("source")
        self.hr = {p: load_volume(manifest.path_for("source", "HR", p)).data for p in self.source_ids}
        if not self.lr or not self.hr:
            raise TrainError("manifest needs populated source and target groups")
        if mode == "supervised_baseline" and set(self.source_ids) != set(self.target_ids):
            raise TrainError("supervised baseline needs source/target pairs sharing participants")
        for arr in self.lr.values():
            if any(p > n for p, n in zip(spec.lr_patch_shape, arr.shape)):
                raise TrainError(f"LR patch {spec.lr_patch_shape} larger than volume {arr.shape}")

    def lr_voxels(self):
        return sum(a.size for a in self.lr.values())

    @staticmethod
    def _crop(rng, arr, shape):
        o = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(arr.shape, shape))
        return o, arr[tuple(slice(a, a + p) for a, p in zip(o, shape))]

    def batch(self, rng: np.random.Generator, batch_size: int):
        lr_shape, hr_shape = self.spec.lr_patch_shape, self.spec.hr_patch_shape
        xs, ys = [], []
        for _ in range(batch_size):
            pid = self.target_ids[int(rng.integers(len(self.target_ids)))]
            o, x = self._crop(rng, self.lr[pid], lr_shape)
            if self.mode == "supervised_baseline":
                ho = tuple(a * k for a, k in zip(o, self.spec.scale))
                y = self.hr[pid][tuple(slice(a, a + p) for a, p in zip(ho, hr_shape))]
            else:
                sid = self.source_ids[int(rng.integers(len(self.source_ids)))]
                _, y = self._crop(rng, self.hr[sid], hr_shape)
            xs.append(x)
            ys.append(y)

        def stack(a):
            return torch.from_numpy(np.stack(a)[:, None].astype(np.float32))

        return stack(xs), stack(ys)


# --- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    components: ComponentSet
    history: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_epoch: int | None = None
    best_ssim: float = -math.inf
    # copy of the best-validation parameters, restored with ``use_best``
    best_state: dict | None = None
    checkpoints: list = field(default_factory=list)
    disc_updates: int = 0
    gen_updates: int = 0
    seconds: float = 0.0

    def use_best(self) -> ComponentSet:
        if self.best_state is not None:
            self.components.load_state_dict(self.best_state)
        return self.components


def _validation_pairs(manifest: DatasetManifest):
    pairs = []
    for pid in manifest.ids("validation"):
        try:
            pairs.append((load_volume(manifest.path_for("validation", "LR", pid)),
                          load_volume(manifest.path_for("validation", "HR", pid))))
        except KeyError:
            continue
    return pairs


def train(manifest: DatasetManifest, tcfg: TrainConfig, ncfg: NetworkConfig,
          w: L.LossWeights = L.LossWeights(), spec: PatchSpec | None = None,
          run_dir=None, stitch=None, on_iteration=None, components: ComponentSet | None = None,
          meta: dict | None = None) -> TrainResult:
    """Full training loop; writes logs/checkpoints/metrics under ``run_dir`` when given."""
    from .inference import StitchPlan, evaluate_pairs

    spec = spec or PatchSpec(scale=ncfg.scale, batch_size=tcfg.batch_size)
    if spec.scale != ncfg.scale:
        raise TrainError(f"patch scale {spec.scale} != network scale {ncfg.scale}")
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    c = components if components is not None else ComponentSet(ncfg)
    c.train()
    data = PatchSource(manifest, spec, tcfg.mode)
    opts = make_optimizers(c, tcfg)
    per_epoch = tcfg.iters_per_epoch or max(1, math.ceil(
        data.lr_voxels() / (np.prod(spec.lr_patch_shape) * tcfg.batch_size)))
    total_iters = per_epoch * tcfg.epochs
    val_pairs = _validation_pairs(manifest)
    plan = stitch or StitchPlan.default(spec.lr_patch_shape)

    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        (run / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run / "loss_log.jsonl", "w")
        val_fh = open(run / "validation.csv", "w", newline="")
        val_csv = csv.writer(val_fh)
        val_csv.writerow(["epoch", "ssim_mean", "ssim_std", "psnr_mean", "psnr_std"])
    result = TrainResult(c)
    gens = torch.nn.ModuleList([c.component(n) for n in GENERATOR_COMPONENTS])
    discs = torch.nn.ModuleList([c.lr_discriminator, c.feature_discriminator])
    it = 0
    try:
        for epoch in range(1, tcfg.epochs + 1):
            for _ in range(per_epoch):
                lr = cosine_lr(it, total_iters, tcfg.lr_max, tcfg.lr_min)
                set_lr(opts, lr)
                x_t, y_s = data.batch(rng, tcfg.batch_size)
                if tcfg.mode == "supervised_baseline":
                    report = supervised_step(x_t, y_s, c, w, opts)
                    result.gen_updates += 1
                    result.disc_updates += 1  # no discriminators; keeps the counters aligned
                else:
                    bundle = forward_step(y_s, x_t, c)
                    if tcfg.check_isolation:
                        g0 = param_digest(gens)
                    lrd, fd = discriminator_step(bundle, c, opts, tcfg)
                    result.disc_updates += 1
                    if tcfg.check_isolation:
                        assert param_digest(gens) == g0, "discriminator step changed generator parameters"
                        d0 = param_digest(discs)
                    report = generator_step(bundle, c, w, opts, tcfg)
                    result.gen_updates += 1
                    if tcfg.check_isolation:
                        assert param_digest(discs) == d0, "generator step changed discriminator parameters"
                    report.lrd, report.fd = lrd, fd
                assert result.disc_updates == result.gen_updates == it + 1, "alternation broken"
                it += 1
                row = {"iteration": it, "epoch": epoch, **asdict(report), "lr": lr}
                result.history.append(row)
                if run is not None:
                    log_fh.write(json.dumps(row) + "\n")
                if on_iteration is not None:
                    on_iteration(row)

            if val_pairs:
                c.eval()
                stats = evaluate_pairs(val_pairs, c, plan)
                c.train()
                vrow = {"epoch": epoch, **stats}
                result.validation.append(vrow)
                if run is not None:
                    val_csv.writerow([epoch] + [repr(stats[k]) for k in
                                                ("ssim_mean", "ssim_std", "psnr_mean", "psnr_std")])
                    val_fh.flush()
                improved = stats["ssim_mean"] > result.best_ssim
            else:
                improved = True
            if improved:
                result.best_epoch = epoch
                result.best_ssim = result.validation[-1]["ssim_mean"] if val_pairs else result.best_ssim
                result.best_state = {k: v.detach().clone() for k, v in c.state_dict().items()}
            if run is not None:
                ck = run / "checkpoints" / f"epoch_{epoch:03d}.npz"
                save_checkpoint(ck, c, {"epoch": epoch, "iteration": it, **(meta or {})})
                result.checkpoints.append(ck)
                if improved:
                    shutil.copyfile(ck, run / "checkpoints" / "best.npz")
                log_fh.flush()
            log.info("epoch %d done (%d iterations), total=%.4f", epoch, it, result.history[-1]["total"])
        if run is not None:
            (run / "DONE").write_text(json.dumps({"iterations": it, "best_epoch": result.best_epoch}) + "\n")
    finally:
        if run is not None:
            log_fh.close()
            val_fh.close()
    c.eval()
    return result
