import numpy as np
import pytest
import torch
from torch import nn

from gradcheck import component_input, directional_check
from udean.degradation import ScaleFactor
from udean.network import (COMPONENTS, ComponentSet, Discriminator, NetworkConfig, NetworkError,
                           count_parameters, load_checkpoint, pixel_shuffle_inplane,
                           read_checkpoint_header, save_checkpoint)

TINY = dict(feat_channels=8, n_groups=1, n_blocks=2, reduction=4, disc_base_channels=4)


def tiny(scale="2x2x2", **kw):
    return ComponentSet(NetworkConfig(scale=scale, **{**TINY, **kw})).eval()


@pytest.mark.parametrize("scale,hr,lr", [("2x2x2", (128, 128, 6), (64, 64, 3)),
                                         ("2x2x1", (128, 128, 3), (64, 64, 3))])
def test_shape_contract(scale, hr, lr):
    c = tiny(scale)
    with torch.no_grad():
        f_s = c.extract(torch.zeros(1, 1, *hr))
        f_t = c.lr_encoder(torch.zeros(1, 1, *lr))
        assert f_s.shape == f_t.shape == (1, 8, *lr)
        assert c.lr_decoder(f_t).shape == (1, 1, *lr)
        assert c.sr_decoder(f_t).shape == (1, 1, *hr)
        assert c.lr_discriminator(torch.zeros(1, 1, *lr)).shape == (1, 1, 4, 4, 3)
        assert c.feature_discriminator(f_s).shape == (1, 1, 4, 4, 3)
    assert Discriminator.output_shape(lr) == (4, 4, 3)


def test_default_width_extractor_shape():
    c = ComponentSet(NetworkConfig(n_groups=1, n_blocks=1))
    with torch.no_grad():
        assert c.extract(torch.zeros(1, 1, 32, 32, 6)).shape == (1, 64, 16, 16, 3)


def test_bad_inputs():
    c = tiny()
    with pytest.raises(NetworkError):
        c.extract(torch.zeros(1, 1, 15, 16, 6))
    with pytest.raises(NetworkError):
        c.lr_decoder(torch.zeros(1, 3, 4, 4, 3))
    with pytest.raises(NetworkError):
        c.lr_discriminator(torch.zeros(1, 2, 8, 8, 3))
    with pytest.raises(NetworkError):
        NetworkConfig(feat_channels=10, reduction=4)
    with pytest.raises(NetworkError):
        NetworkConfig(scale="4x4x1")
    with pytest.raises(NetworkError):
        NetworkConfig(n_groups=0)


def test_zero_in_zero_out():
    c = tiny()
    with torch.no_grad():
        assert not c.extract(torch.zeros(1, 1, 16, 16, 6)).any()
        assert not c.lr_encoder(torch.zeros(1, 1, 8, 8, 3)).any()
        assert not c.lr_discriminator(torch.zeros(1, 1, 8, 8, 3)).any()
        assert not c.feature_discriminator(torch.zeros(1, 8, 8, 8, 3)).any()


@pytest.mark.parametrize("name", ["lr_decoder", "sr_decoder"])
def test_projection_bias_only(name):
    c = tiny()
    dec = c.component(name)
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
        dec.project.bias.fill_(0.3)
        out = dec(torch.randn(1, 8, 4, 4, 3))
    np.testing.assert_allclose(out.numpy(), 0.3, atol=1e-7)


def test_open_gate_is_plain_residual_block():
    c = tiny()
    block = c.lr_decoder.trunk.groups[0].blocks[0]
    x = torch.randn(1, 8, 4, 4, 3)
    block.attention.force_open = True
    with torch.no_grad():
        np.testing.assert_allclose(block(x).numpy(), (x + block.body(x)).numpy(), atol=1e-6)


def test_pixel_shuffle_constant():
    out = pixel_shuffle_inplane(torch.full((1, 4, 3, 5, 2), 0.7))
    assert out.shape == (1, 1, 6, 10, 2)
    assert torch.all(out == 0.7)


def test_pixel_shuffle_layout():
    x = torch.arange(4.0).view(1, 4, 1, 1, 1)
    out = pixel_shuffle_inplane(x)[0, 0, :, :, 0]
    assert out.tolist() == [[0.0, 1.0], [2.0, 3.0]]


def test_parameter_counts():
    assert count_parameters(nn.Conv3d(1, 64, 3)) == 1792
    c = tiny()
    assert count_parameters(c, "inference") < count_parameters(c, "all")
    per = [count_parameters(c.component(n)) for n in COMPONENTS]
    assert sum(per) == count_parameters(c, "all")
    ids = [id(p) for n in COMPONENTS for p in c.component(n).parameters()]
    assert len(ids) == len(set(ids))


def test_forward_deterministic():
    c = tiny()
    x = torch.rand(2, 1, 8, 8, 3)
    with torch.no_grad():
        assert torch.equal(c.super_resolve(x), c.super_resolve(x))


@pytest.mark.parametrize("name", COMPONENTS)
def test_directional_derivative(name, double_precision):
    torch.manual_seed(0)
    c = tiny().double()
    directional_check(c.component(name), component_input(name))


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(3)
    c = tiny()
    save_checkpoint(tmp_path / "c.npz", c, {"epoch": 4})
    loaded, header = load_checkpoint(tmp_path / "c.npz")
    assert header["meta"] == {"epoch": 4}
    assert loaded.config.scale == ScaleFactor(2, 2, 2)
    x = torch.rand(1, 1, 8, 8, 3)
    with torch.no_grad():
        assert torch.equal(c.super_resolve(x), loaded.eval().super_resolve(x))
    for (k, a), (_, b) in zip(c.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k


def test_checkpoint_version_and_missing(tmp_path):
    import json
    c = tiny()
    save_checkpoint(tmp_path / "c.npz", c)
    with np.load(tmp_path / "c.npz") as z:
        arrays = {k: z[k] for k in z.files}
    header = json.loads(bytes(arrays["__header__"]).decode())
    header["version"] = "1.7"
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), np.uint8)
    np.savez(tmp_path / "minor.npz", **arrays)
    assert read_checkpoint_header(tmp_path / "minor.npz")["version"] == "1.7"
    header["version"] = "2.0"
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), np.uint8)
    np.savez(tmp_path / "major.npz", **arrays)
    with pytest.raises(NetworkError):
        read_checkpoint_header(tmp_path / "major.npz")
    header["version"] = "1.0"
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), np.uint8)
    del arrays[next(k for k in arrays if k.startswith("sr_decoder/"))]
    np.savez(tmp_path / "short.npz", **arrays)
    with pytest.raises(NetworkError, match="lacks"):
        load_checkpoint(tmp_path / "short.npz")
