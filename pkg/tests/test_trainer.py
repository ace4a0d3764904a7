import json
import math

import numpy as np
import pytest
import torch

from udean import config as C
from udean.cli import prepare_data, load_manifest
from udean.degradation import PatchSpec, ScaleFactor
from udean.losses import LossWeights
from udean.network import ComponentSet, NetworkConfig, load_checkpoint
from udean.trainer import (ForwardBundle, NumericAbort, TrainConfig, TrainError, cosine_lr,
                           discriminator_step, forward_step, generator_losses, generator_step,
                           make_optimizers, param_digest, train)

NET = dict(feat_channels=8, n_groups=1, n_blocks=1, reduction=4, disc_base_channels=4)
SPEC = PatchSpec((16, 16, 3), ScaleFactor(2, 2, 2), 2)


def net(**kw):
    return NetworkConfig(scale="2x2x2", **{**NET, **kw})


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = C.from_dict({"seed": 5, "paths": {"output_dir": str(root)},
                       "data": {"counts": [3, 3, 1, 1], "phantom_shape": [32, 32, 12]},
                       "patch": {"lr_patch_shape": [16, 16, 3]}})
    prepare_data(cfg, 5)
    return load_manifest(cfg)


def batch(seed=0, b=2):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 1, 32, 32, 6, generator=g), torch.rand(b, 1, 16, 16, 3, generator=g)


def test_cosine_values():
    assert cosine_lr(0, 100) == pytest.approx(1e-4, abs=1e-18)
    assert cosine_lr(100, 100) == pytest.approx(1e-8, abs=1e-18)
    assert cosine_lr(50, 100) == pytest.approx(5.0005e-5, abs=1e-15)


def test_config_validation():
    with pytest.raises(TrainError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainError):
        TrainConfig(lr_min=1.0)
    with pytest.raises(TrainError):
        TrainConfig(mode="semi")


def test_forward_shapes_at_full_patch_size():
    torch.manual_seed(0)
    c = ComponentSet(net())
    with torch.no_grad():
        b = forward_step(torch.rand(1, 1, 128, 128, 6), torch.rand(1, 1, 64, 64, 3), c)
    assert b.x_st.shape == b.x_hat_t.shape == (1, 1, 64, 64, 3)
    assert b.y_sts.shape == b.y_hat_s.shape == (1, 1, 128, 128, 6)
    assert b.f_s.shape == b.f_t.shape == b.f_sts.shape == (1, 8, 64, 64, 3)


def test_forward_rejects_mismatched_patches():
    c = ComponentSet(net())
    with pytest.raises(TrainError):
        forward_step(torch.rand(1, 1, 32, 32, 6), torch.rand(1, 1, 8, 8, 3), c)


def test_forward_deterministic():
    torch.manual_seed(0)
    c = ComponentSet(net()).eval()
    y, x = batch()
    with torch.no_grad():
        a, b = forward_step(y, x, c), forward_step(y, x, c)
    assert all(torch.equal(getattr(a, k), getattr(b, k)) for k in a.__dataclass_fields__)


def _generators(c):
    return torch.nn.ModuleList([c.downsampling_extractor, c.lr_encoder, c.lr_decoder, c.sr_decoder])


def test_discriminator_step_isolation():
    torch.manual_seed(1)
    c = ComponentSet(net())
    opts = make_optimizers(c, TrainConfig())
    b = forward_step(*batch(), c)
    g0, d0 = param_digest(_generators(c)), param_digest(c.lr_discriminator)
    f0 = param_digest(c.feature_discriminator)
    lrd, fd = discriminator_step(b, c, opts, TrainConfig())
    assert math.isfinite(lrd) and math.isfinite(fd)
    assert param_digest(_generators(c)) == g0
    assert param_digest(c.lr_discriminator) != d0
    assert param_digest(c.feature_discriminator) != f0
    # fake inputs are constants: no gradient reaches any generator parameter
    assert all(p.grad is None for p in _generators(c).parameters())


def test_generator_step_isolation():
    torch.manual_seed(2)
    c = ComponentSet(net())
    opts = make_optimizers(c, TrainConfig())
    b = forward_step(*batch(), c)
    d0 = param_digest(torch.nn.ModuleList([c.lr_discriminator, c.feature_discriminator]))
    g0 = param_digest(_generators(c))
    report = generator_step(b, c, LossWeights(), opts, TrainConfig())
    assert param_digest(torch.nn.ModuleList([c.lr_discriminator, c.feature_discriminator])) == d0
    assert param_digest(_generators(c)) != g0
    assert all(p.grad is None for p in c.lr_discriminator.parameters())
    assert report.total == pytest.approx(sum(l * v for l, v in zip(LossWeights().lambdas(),
                                                                   report.components())), rel=1e-6)


def test_discriminator_learns_on_fixed_bundle():
    torch.manual_seed(3)
    c = ComponentSet(net())
    tcfg = TrainConfig(lr_max=1e-4)
    opts = make_optimizers(c, tcfg)
    b = forward_step(*batch(), c)
    b = ForwardBundle(**{k: v.detach() for k, v in vars(b).items()})
    lrd = [discriminator_step(b, c, opts, tcfg)[0] for _ in range(50)]
    assert np.mean(lrd[-10:]) < np.mean(lrd[:10])


def test_perfect_reconstruction_gives_zero():
    torch.manual_seed(4)
    c = ComponentSet(net())
    y, x = batch()
    f = torch.rand(2, 8, 16, 16, 3)

    def leaf(t):
        return t.clone().requires_grad_(True)

    b = ForwardBundle(y_s=y, x_t=x, f_s=leaf(f), x_st=leaf(x), f_sts=leaf(f * 2), y_sts=leaf(y),
                      f_t=leaf(f), x_hat_t=leaf(x), y_hat_s=leaf(y))
    w = LossWeights(beta=0.0, lambda2=0.0, lambda5=0.0, lambda6=0.0)
    parts, total = generator_losses(b, c, w, TrainConfig())
    assert total.item() == pytest.approx(0.0, abs=1e-6)
    total.backward()
    for k in ("y_sts", "y_hat_s", "x_hat_t", "x_st", "f_s", "f_t", "f_sts"):
        g = getattr(b, k).grad
        assert g is None or g.abs().max().item() < 1e-6, k


@pytest.mark.parametrize("flag,term,disc", [("da_feature_enabled", "fa", "feature_discriminator"),
                                            ("da_image_enabled", "da", "lr_discriminator")])
def test_ablation_switches(flag, term, disc):
    torch.manual_seed(5)
    c = ComponentSet(net())
    tcfg = TrainConfig(**{flag: False})
    opts = make_optimizers(c, tcfg)
    b = forward_step(*batch(), c)
    d0 = param_digest(c.component(disc))
    out = discriminator_step(b, c, opts, tcfg)
    assert out[0 if disc == "lr_discriminator" else 1] is None
    assert param_digest(c.component(disc)) == d0
    report = generator_step(b, c, LossWeights(), opts, tcfg)
    assert getattr(report, term) == 0.0


def test_numeric_abort_names_component():
    torch.manual_seed(6)
    c = ComponentSet(net())
    opts = make_optimizers(c, TrainConfig())
    b = forward_step(*batch(), c)
    b.x_hat_t = b.x_hat_t * float("nan")
    with pytest.raises(NumericAbort, match="lr_con"):
        generator_step(b, c, LossWeights(), opts, TrainConfig())


def test_train_outputs_and_lr_trace(manifest, tmp_path):
    tcfg = TrainConfig(epochs=2, batch_size=2, iters_per_epoch=3, lr_max=1e-3, check_isolation=True)
    res = train(manifest, tcfg, net(), spec=SPEC, run_dir=tmp_path)
    assert res.disc_updates == res.gen_updates == 6
    rows = [json.loads(line) for line in (tmp_path / "loss_log.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in rows] == list(range(1, 7))
    for r in rows:
        assert r["lr"] == cosine_lr(r["iteration"] - 1, 6, 1e-3, 1e-8)
        assert math.isfinite(r["lrd"]) and math.isfinite(r["fd"])
    val = (tmp_path / "validation.csv").read_text().splitlines()
    assert val[0] == "epoch,ssim_mean,ssim_std,psnr_mean,psnr_std" and len(val) == 3
    assert (tmp_path / "checkpoints" / "epoch_002.npz").exists()
    assert (tmp_path / "checkpoints" / "best.npz").exists()
    assert json.loads((tmp_path / "DONE").read_text())["iterations"] == 6

    # reloaded checkpoint reproduces a forward pass bitwise
    loaded, header = load_checkpoint(tmp_path / "checkpoints" / "epoch_002.npz")
    assert header["meta"]["iteration"] == 6
    y, x = batch(9)
    with torch.no_grad():
        a = forward_step(y, x, res.components.eval())
        b = forward_step(y, x, loaded.eval())
    assert torch.equal(a.y_sts, b.y_sts) and torch.equal(a.x_hat_t, b.x_hat_t)


def test_train_deterministic(manifest, tmp_path):
    tcfg = TrainConfig(epochs=2, batch_size=2, iters_per_epoch=2, seed=11)
    a = train(manifest, tcfg, net(), spec=SPEC, run_dir=tmp_path / "a")
    b = train(manifest, tcfg, net(), spec=SPEC, run_dir=tmp_path / "b")
    for ra, rb in zip(a.history, b.history):
        for k, v in ra.items():
            if isinstance(v, float):
                assert v == pytest.approx(rb[k], rel=1e-6, abs=0)
    assert (tmp_path / "a" / "validation.csv").read_text() == (tmp_path / "b" / "validation.csv").read_text()


def test_supervised_mode_trains_inference_path_only(manifest):
    torch.manual_seed(0)
    c = ComponentSet(net())
    untouched = torch.nn.ModuleList([c.downsampling_extractor, c.lr_decoder,
                                     c.lr_discriminator, c.feature_discriminator])
    before, sr_before = param_digest(untouched), param_digest(c.sr_decoder)
    tcfg = TrainConfig(epochs=1, batch_size=2, iters_per_epoch=2, mode="supervised_baseline")
    res = train(manifest, tcfg, net(), spec=SPEC, components=c)
    assert param_digest(untouched) == before
    assert param_digest(c.sr_decoder) != sr_before
    assert all(r["lrd"] is None and r["f_cyc"] == 0.0 for r in res.history)


def test_scale_mismatch_rejected(manifest):
    with pytest.raises(TrainError):
        train(manifest, TrainConfig(epochs=1), net(), spec=PatchSpec((16, 16, 3), ScaleFactor(2, 2, 1)))
